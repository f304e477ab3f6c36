"""Context-aware similarity combiner.

A stack of 2-D convolutions (ReLU + dropout after each) over the
similarity tensor, followed by a 1x1 projection and a sigmoid, produces
a match-probability map aligned cell-for-cell with (i, j).

Border handling: the input is replicate-padded once by the total halo of
the stack, and every convolution is then 'valid'. This keeps the output
on the (i, j) grid and makes patch-based training (only the receptive
field of each labeled cell is evaluated) produce exactly the gradients
of the full-map computation.

Dropout is inverted: activations are masked and scaled by 1/keep at
train time, so inference needs no rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, TrainingDiverged
from .numerics import AdamState, ParamStore, adam_step, derive_rng, init_gaussian

MODEL_KIND = "ctxcnn"


@dataclass
class CnnConfig:
    in_channels: int = 9
    kernels: tuple[int, ...] = (5, 7, 5)
    widths: tuple[int, ...] = (16, 16, 8)
    dropout: float = 0.3
    channel_mask: tuple[bool, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.kernels) != len(self.widths):
            raise DataError("kernels and widths must have equal length")
        if any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise DataError("kernel sizes must be odd and positive")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")
        if self.channel_mask is not None and len(self.channel_mask) != self.in_channels:
            raise DataError("channel_mask length must equal in_channels")

    @property
    def halo(self) -> int:
        return sum(k - 1 for k in self.kernels) // 2


@dataclass
class CnnTrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class TrainingLabels:
    """Sparse labeled cells; positives and negatives must be disjoint."""

    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]

    def __post_init__(self) -> None:
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise DataError(f"labels overlap at {sorted(overlap)[:3]}")

    def cells(self) -> list[tuple[int, int, float]]:
        out = [(i, j, 1.0) for i, j in self.positives]
        out += [(i, j, 0.0) for i, j in self.negatives]
        return out


# ---------------------------------------------------------------------------
# Convolution primitives (channel-first (C, H, W) layout, stride 1)


def conv_valid(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c_out, c_in, kh, kw = kernel.shape
    h_out = x.shape[1] - kh + 1
    w_out = x.shape[2] - kw + 1
    out = np.zeros((c_out, h_out, w_out))
    for dy in range(kh):
        for dx in range(kw):
            out += np.tensordot(
                kernel[:, :, dy, dx], x[:, dy : dy + h_out, dx : dx + w_out], axes=(1, 0)
            )
    return out + bias[:, None, None]


def conv_valid_backward(x: np.ndarray, kernel: np.ndarray, g_out: np.ndarray):
    """Gradients of a valid convolution: returns (g_x, g_kernel, g_bias)."""
    c_out, c_in, kh, kw = kernel.shape
    h_out, w_out = g_out.shape[1], g_out.shape[2]
    g_x = np.zeros_like(x)
    g_k = np.zeros_like(kernel)
    for dy in range(kh):
        for dx in range(kw):
            window = x[:, dy : dy + h_out, dx : dx + w_out]
            g_k[:, :, dy, dx] = np.tensordot(g_out, window, axes=([1, 2], [1, 2]))
            g_x[:, dy : dy + h_out, dx : dx + w_out] += np.tensordot(
                kernel[:, :, dy, dx].T, g_out, axes=(1, 0)
            )
    g_b = g_out.sum(axis=(1, 2))
    return g_x, g_k, g_b


def pad_edge(x: np.ndarray, halo: int) -> np.ndarray:
    if halo == 0:
        return x
    return np.pad(x, ((0, 0), (halo, halo), (halo, halo)), mode="edge")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ContextCnn:
    """Fixed-depth convolutional fuser of the similarity channels."""

    def __init__(self, config: CnnConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params = ParamStore()
        rng = rng if rng is not None else derive_rng(config.seed, "ctxcnn-init")
        c_in = config.in_channels
        for layer, (k, width) in enumerate(zip(config.kernels, config.widths)):
            scale = np.sqrt(2.0 / (c_in * k * k))
            self.params.add(f"conv{layer}.K", init_gaussian((width, c_in, k, k), scale, rng))
            self.params.add(f"conv{layer}.b", np.zeros(width))
            c_in = width
        self.params.add("proj.K", init_gaussian((1, c_in, 1, 1), np.sqrt(1.0 / c_in), rng))
        self.params.add("proj.b", np.zeros(1))

    def _w(self, name: str) -> np.ndarray:
        return self.params.value(name)

    def _g(self, name: str) -> np.ndarray:
        return self.params.grad(name)

    def _prepare(self, tensor_data: np.ndarray) -> np.ndarray:
        """(i, j, m) -> channel-first with the optional channel mask applied."""
        if tensor_data.ndim != 3:
            raise DataError("similarity tensor must be 3-D (i, j, channels)")
        if tensor_data.shape[2] != self.config.in_channels:
            raise DataError(
                f"tensor has {tensor_data.shape[2]} channels, "
                f"model expects {self.config.in_channels}"
            )
        x = np.ascontiguousarray(np.moveaxis(tensor_data, 2, 0), dtype=np.float64)
        if self.config.channel_mask is not None:
            mask = np.asarray(self.config.channel_mask, dtype=np.float64)
            x = x * mask[:, None, None]
        return x

    def _run(self, padded: np.ndarray, train_mode: bool, rng: np.random.Generator | None):
        """Forward over a pre-padded input; returns (logit map, cache)."""
        use_dropout = train_mode and self.config.dropout > 0.0
        if use_dropout and rng is None:
            raise DataError("train-mode forward with dropout needs an rng")
        keep = 1.0 - self.config.dropout
        activations = [padded]
        relu_masks = []
        drop_masks = []
        x = padded
        for layer in range(len(self.config.kernels)):
            z = conv_valid(x, self._w(f"conv{layer}.K"), self._w(f"conv{layer}.b"))
            relu_mask = z > 0.0
            x = z * relu_mask
            if use_dropout:
                mask = (rng.random(x.shape) < keep) / keep
                x = x * mask
                drop_masks.append(mask)
            else:
                drop_masks.append(None)
            relu_masks.append(relu_mask)
            activations.append(x)
        logits = conv_valid(x, self._w("proj.K"), self._w("proj.b"))[0]
        cache = {
            "activations": activations,
            "relu_masks": relu_masks,
            "drop_masks": drop_masks,
        }
        return logits, cache

    def forward(
        self,
        tensor_data: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Score map in (0, 1), aligned with the (i, j) grid."""
        x = self._prepare(tensor_data)
        logits, _ = self._run(pad_edge(x, self.config.halo), train_mode, rng)
        return _sigmoid(logits)

    def _backward(self, cache, d_logits: np.ndarray) -> None:
        """Accumulate parameter gradients from a gradient on the logit map."""
        x_last = cache["activations"][-1]
        g_x, g_k, g_b = conv_valid_backward(x_last, self._w("proj.K"), d_logits[None, :, :])
        self._g("proj.K")[:] += g_k
        self._g("proj.b")[:] += g_b
        for layer in range(len(self.config.kernels) - 1, -1, -1):
            if cache["drop_masks"][layer] is not None:
                g_x = g_x * cache["drop_masks"][layer]
            g_x = g_x * cache["relu_masks"][layer]
            g_x, g_k, g_b = conv_valid_backward(
                cache["activations"][layer], self._w(f"conv{layer}.K"), g_x
            )
            self._g(f"conv{layer}.K")[:] += g_k
            self._g(f"conv{layer}.b")[:] += g_b


def bce_loss(
    model: ContextCnn,
    tensor_data: np.ndarray,
    labels: TrainingLabels,
    grad_scale: float = 1.0,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean binary cross-entropy over labeled cells of the full map.

    Accumulates parameter gradients scaled by `grad_scale` (0 disables).
    """
    cells = labels.cells()
    if not cells:
        raise DataError("no labeled cells")
    x = model._prepare(tensor_data)
    logits, cache = model._run(pad_edge(x, model.config.halo), train_mode, rng)
    p = _sigmoid(logits)
    n = len(cells)
    loss = 0.0
    d_logits = np.zeros_like(logits)
    for i, j, y in cells:
        pij = p[i, j]
        loss -= y * np.log(max(pij, 1e-300)) + (1.0 - y) * np.log(max(1.0 - pij, 1e-300))
        d_logits[i, j] += (pij - y) / n
    if grad_scale != 0.0:
        model._backward(cache, grad_scale * d_logits)
    return float(loss / n)


# ---------------------------------------------------------------------------
# Training (patch-wise)


def _extract_patches(tensor_data: np.ndarray, model: ContextCnn, cells):
    """Receptive-field windows around labeled cells, border-replicated
    exactly as the full-map forward sees them."""
    x = model._prepare(tensor_data)
    halo = model.config.halo
    padded = pad_edge(x, halo)
    size = 2 * halo + 1
    return [(padded[:, i : i + size, j : j + size].copy(), y) for i, j, y in cells]


@dataclass
class CnnTrainResult:
    model: ContextCnn
    loss_curve: list[float] = field(default_factory=list)


def train(
    tensor_data: np.ndarray,
    labels: TrainingLabels,
    config: CnnConfig,
    train_config: CnnTrainConfig,
) -> CnnTrainResult:
    """Adam on mean BCE over labeled cells, evaluated patch-wise.

    Patch evaluation touches only each cell's receptive field, which is
    all the full-map loss depends on, so gradients match the full-map
    computation while cost stays independent of the map size.
    """
    cells = labels.cells()
    if not cells:
        raise DataError("training needs at least one labeled cell")
    model = ContextCnn(config)
    patches = _extract_patches(tensor_data, model, cells)
    state = AdamState(lr=train_config.lr)
    rng = derive_rng(train_config.seed, "ctxcnn-train")
    drop_rng = derive_rng(train_config.seed, "ctxcnn-dropout")
    curve: list[float] = []
    last_good = model.params.copy()
    for _ in range(train_config.epochs):
        order = rng.permutation(len(patches))
        epoch_loss = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            scale = 1.0 / batch.size
            batch_loss = 0.0
            for idx in batch:
                patch, y = patches[idx]
                logits, cache = model._run(patch, train_mode=True, rng=drop_rng)
                p = float(_sigmoid(logits)[0, 0])
                batch_loss -= y * np.log(max(p, 1e-300)) + (1.0 - y) * np.log(
                    max(1.0 - p, 1e-300)
                )
                model._backward(cache, np.array([[(p - y) * scale]]))
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    "cnn training diverged (non-finite loss)", last_good_params=last_good
                )
            adam_step(model.params, state)
            epoch_loss += batch_loss
        curve.append(epoch_loss / len(order))
        last_good = model.params.copy()
    return CnnTrainResult(model=model, loss_curve=curve)


def negative_sampling(
    positives,
    extents: tuple[int, int],
    ratio: float,
    seed: int,
    guard_i: int = 5,
    guard_j: int = 3,
) -> list[tuple[int, int]]:
    """Uniform negatives outside a guard band around every positive.

    A cell is eligible unless some positive is within `guard_i` rows and
    `guard_j` columns of it. Draws `round(ratio * len(positives))`
    distinct cells (fewer when not enough are eligible); deterministic
    for a fixed seed.
    """
    h, w = extents
    if not positives:
        raise DataError("negative sampling needs at least one positive")
    eligible = np.ones((h, w), dtype=bool)
    for i, j in positives:
        lo_i, hi_i = max(0, i - guard_i), min(h, i + guard_i + 1)
        lo_j, hi_j = max(0, j - guard_j), min(w, j + guard_j + 1)
        eligible[lo_i:hi_i, lo_j:hi_j] = False
    cells = np.argwhere(eligible)
    want = int(round(ratio * len(positives)))
    count = min(want, len(cells))
    rng = derive_rng(seed, "negative-sampling")
    chosen = rng.choice(len(cells), size=count, replace=False)
    return sorted((int(cells[k][0]), int(cells[k][1])) for k in chosen)


def expand_positives(cells, extents: tuple[int, int]) -> list[tuple[int, int]]:
    """Widen each positive to a 1-cell neighborhood along the book axis."""
    h, w = extents
    out = set()
    for i, j in cells:
        for dj in (-1, 0, 1):
            jj = j + dj
            if 0 <= i < h and 0 <= jj < w:
                out.add((i, jj))
    return sorted(out)


def load_model(checkpoint, config: CnnConfig | None = None) -> ContextCnn:
    """Rebuild from a checkpoint; architecture is recovered from shapes."""
    params = checkpoint.params
    kernels = []
    widths = []
    layer = 0
    while f"conv{layer}.K" in params:
        k = params.value(f"conv{layer}.K")
        widths.append(k.shape[0])
        kernels.append(k.shape[2])
        layer += 1
    in_channels = params.value("conv0.K").shape[1]
    if config is None:
        config = CnnConfig(
            in_channels=in_channels,
            kernels=tuple(kernels),
            widths=tuple(widths),
            dropout=0.0,
        )
    model = ContextCnn(config, rng=np.random.default_rng(0))
    model.params.load_values(params)
    return model
