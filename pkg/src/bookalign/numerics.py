"""Shared numeric core: parameter stores, optimizers, initializers,
finite-difference gradient checking, and the binary checkpoint container.

Everything is 64-bit floats. Models register their tensors in a
:class:`ParamStore` and keep direct references to the arrays; optimizers
update the arrays in place, so a model never has to re-fetch parameters
after a step.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, NumericError

Array = np.ndarray

CHECKPOINT_MAGIC = b"ALIGNCKPT"
CHECKPOINT_VERSION = 1


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for a 64-bit seed."""
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent, reproducible stream named by `labels`.

    Uses sha256 of the labels so the stream does not depend on Python's
    per-process hash randomization.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        keys.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(keys)


class ParamStore:
    """Named float64 tensors with same-shape gradient accumulators.

    Insertion order is the canonical parameter order; checkpoints,
    optimizers and gradient checks all iterate in that order. Value and
    gradient arrays are mutated in place and never replaced, so holding a
    reference to ``store.value(name)`` stays valid across optimizer steps.
    """

    def __init__(self) -> None:
        self._values: dict[str, Array] = {}
        self._grads: dict[str, Array] = {}

    def add(self, name: str, value: Array) -> Array:
        if name in self._values:
            raise DataError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> Array:
        return self._values[name]

    def grad(self, name: str) -> Array:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_coordinates(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy())
            np.copyto(out.grad(name), self._grads[name])
        return out

    def load_values(self, other: "ParamStore") -> None:
        """Copy values from `other` in place; names and shapes must match."""
        if self.names() != other.names():
            raise DataError("parameter name mismatch while loading values")
        for name in self.names():
            src = other.value(name)
            dst = self._values[name]
            if src.shape != dst.shape:
                raise DataError(
                    f"shape mismatch for {name!r}: {dst.shape} vs {src.shape}"
                )
            np.copyto(dst, src)


def init_gaussian(shape: Sequence[int], scale: float, rng: np.random.Generator) -> Array:
    """Zero-mean Gaussian tensor with standard deviation `scale`."""
    if scale == 0.0:
        return np.zeros(shape, dtype=np.float64)
    return scale * rng.standard_normal(shape)


def init_orthogonal(shape: Sequence[int], rng: np.random.Generator) -> Array:
    """Orthogonal (or row/column-orthonormal) tensor via sign-fixed QR."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    # Fixing the signs makes the decomposition unique, hence reproducible.
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q[:rows, :cols])


@dataclass
class AdamState:
    """Adam optimizer state. Defaults follow the common recommendation."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One Adam update with bias-corrected moments; zeroes gradients after."""
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for name in params.names():
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / b1t) / (np.sqrt(v / b2t) + state.eps)
        value = params.value(name)
        value -= state.lr * update
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value for parameter {name!r} after update")
    params.zero_grads()


@dataclass
class SgdConfig:
    """Plain stochastic gradient descent, no momentum."""

    lr: float

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise DataError("sgd learning rate must be positive")


def sgd_step(params: ParamStore, cfg: SgdConfig) -> None:
    """theta <- theta - lr * grad; zeroes gradients after."""
    for name in params.names():
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        value = params.value(name)
        value -= cfg.lr * g
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value for parameter {name!r} after update")
    params.zero_grads()


@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict[str, float]
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    param_names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Central finite differences against the gradients stored in `params`.

    The analytic gradients must already be populated (run the model's
    loss-with-gradients once before calling). `f` must be a pure function
    of the parameter values. The reported error is
    max|g_an - g_fd| / max(1e-8, |g_an| + |g_fd|) with |g| the magnitude
    of the full gradient vector, so the tolerance is meaningful even when
    individual coordinates sit below the finite-difference noise floor.
    """
    names = list(param_names) if param_names is not None else params.names()
    max_diff: dict[str, float] = {}
    an_scale = 0.0
    fd_scale = 0.0
    for name in names:
        value = params.value(name)
        analytic = params.grad(name)
        flat_v = value.reshape(-1)
        flat_g = analytic.reshape(-1)
        worst_diff = 0.0
        for idx in range(flat_v.size):
            orig = flat_v[idx]
            flat_v[idx] = orig + h
            f_plus = f(params)
            flat_v[idx] = orig - h
            f_minus = f(params)
            flat_v[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an = flat_g[idx]
            worst_diff = max(worst_diff, abs(an - fd))
            an_scale = max(an_scale, abs(an))
            fd_scale = max(fd_scale, abs(fd))
        max_diff[name] = worst_diff
    denom = max(1e-8, an_scale + fd_scale)
    per_param = {name: diff / denom for name, diff in max_diff.items()}
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(tolerance=tolerance, per_param=per_param, max_rel_error=worst)


@dataclass
class Checkpoint:
    kind: str
    vocab_hash: str
    params: ParamStore


def _write_str(out: list[bytes], s: str) -> None:
    data = s.encode("utf-8")
    out.append(struct.pack("<H", len(data)))
    out.append(data)


def checkpoint_bytes(kind: str, params: ParamStore, vocab_hash: str = "") -> bytes:
    """Serialize a parameter store; round-trips bit-exactly."""
    out: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    _write_str(out, kind)
    _write_str(out, vocab_hash)
    names = params.names()
    out.append(struct.pack("<I", len(names)))
    for name in names:
        value = params.value(name)
        _write_str(out, name)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack("<" + "Q" * value.ndim, *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, kind: str, params: ParamStore, vocab_hash: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(kind, params, vocab_hash))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    kind = r.read_str()
    vocab_hash = r.read_str()
    (count,) = r.unpack("<I")
    params = ParamStore()
    for _ in range(count):
        name = r.read_str()
        (ndim,) = r.unpack("<B")
        shape = r.unpack("<" + "Q" * ndim) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * size)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        params.add(name, arr)
    return Checkpoint(kind=kind, vocab_hash=vocab_hash, params=params)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
