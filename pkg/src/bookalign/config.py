"""Declarative pipeline configuration.

INI-style file (sections of key = value). Command-line overrides of the
form ``section.key=value`` take precedence over the file, which takes
precedence over built-in defaults. All randomness is seeded from config
values; nothing is seeded from the clock.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path

from .errors import DataError

DEFAULTS: dict[str, dict[str, str]] = {
    "skipthought": {
        "vocab_size": "2000",
        "embed_dim": "32",
        "hidden_dim": "64",
        "epochs": "10",
        "batch_size": "16",
        "lr": "0.001",
        "seed": "1",
    },
    "vsembed": {
        "vocab_size": "2000",
        "embed_dim": "32",
        "hidden_dim": "64",
        "epochs": "20",
        "batch_size": "16",
        "lr": "0.01",
        "margin": "0.2",
        "holdout_fraction": "0.1",
        "seed": "2",
    },
    "cnn": {
        "kernels": "5,7,5",
        "widths": "16,16,8",
        "dropout": "0.3",
        "epochs": "200",
        "batch_size": "64",
        "lr": "0.001",
        "negative_ratio": "3.0",
        "guard_i": "5",
        "guard_j": "3",
        "seed": "3",
    },
    "crf": {
        "wu": "1.0",
        "wp": "1.0",
        "wq": "1.0",
        "sigma2": "0.01",
        "prune_fraction": "0.3333333333",
        "fit": "false",
        "fit_wu": "1.0",
        "fit_wp": "0.0,0.5,1.0,2.0",
        "fit_wq": "0.0,0.5,1.0",
        "fit_sigma2": "0.01",
    },
    "eval": {
        "para_slack": "3",
        "sent_slack": "5",
        "t_max": "10",
        "top_k": "10",
    },
}


class PipelineConfig:
    def __init__(self, values: dict[str, dict[str, str]], source: str = "<none>"):
        self.values = values
        self.source = source

    @classmethod
    def load(cls, path, overrides=()) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string(text, source=str(path))
        values: dict[str, dict[str, str]] = {
            section: dict(parser.items(section)) for section in parser.sections()
        }
        for item in overrides:
            key, _, value = item.partition("=")
            section, _, name = key.partition(".")
            if not section or not name or not _:
                raise DataError(f"override must look like section.key=value, got {item!r}")
            values.setdefault(section, {})[name.strip()] = value.strip()
        return cls(values, source=str(path))

    def get(self, section: str, key: str, default: str | None = None) -> str:
        if section in self.values and key in self.values[section]:
            return self.values[section][key]
        if section in DEFAULTS and key in DEFAULTS[section]:
            return DEFAULTS[section][key]
        if default is not None:
            return default
        raise DataError(f"missing config key [{section}] {key}")

    def get_int(self, section: str, key: str, default: str | None = None) -> int:
        return int(self.get(section, key, default))

    def get_float(self, section: str, key: str, default: str | None = None) -> float:
        return float(self.get(section, key, default))

    def get_bool(self, section: str, key: str, default: str | None = None) -> bool:
        raw = self.get(section, key, default).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise DataError(f"config key [{section}] {key} is not a boolean: {raw!r}")

    def get_floats(self, section: str, key: str, default: str | None = None) -> tuple[float, ...]:
        return tuple(float(x) for x in self.get(section, key, default).split(",") if x.strip())

    def get_ints(self, section: str, key: str, default: str | None = None) -> tuple[int, ...]:
        return tuple(int(x) for x in self.get(section, key, default).split(",") if x.strip())

    def path(self, key: str, required: bool = True) -> Path | None:
        raw = self.values.get("paths", {}).get(key, "")
        if not raw:
            if required:
                raise DataError(f"missing config key [paths] {key}")
            return None
        base = Path(self.source).parent if self.source != "<none>" else Path(".")
        p = Path(raw)
        return p if p.is_absolute() else (base / p)

    def output_dir(self) -> Path:
        out = self.path("output_dir")
        out.mkdir(parents=True, exist_ok=True)
        return out

    def config_hash(self) -> str:
        digest = hashlib.sha256()
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                digest.update(f"[{section}]{key}={self.values[section][key]}\n".encode())
        return digest.hexdigest()
