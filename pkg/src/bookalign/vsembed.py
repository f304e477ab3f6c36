"""Joint embedding of movie clips and sentences.

An LSTM with diagonal peephole connections encodes a sentence into its
final memory vector; a linear map embeds a precomputed clip feature
vector into the same space. Scores are cosine similarities and training
minimizes a pairwise hinge ranking loss with in-batch contrastive
samples, using plain SGD.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, TrainingDiverged
from .numerics import ParamStore, SgdConfig, derive_rng, init_gaussian, init_orthogonal, sgd_step
from .skipthought import sigmoid

MODEL_KIND = "vsembed"


@dataclass
class VsEmbedConfig:
    vocab_size: int
    clip_dim: int
    embed_dim: int = 32
    hidden_dim: int = 64  # joint embedding dimension
    margin: float = 0.2
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    seed: int = 0
    holdout_fraction: float = 0.1


class VsEmbedModel:
    """LSTM sentence encoder plus linear clip projection."""

    def __init__(self, config: VsEmbedConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params = ParamStore()
        rng = rng if rng is not None else derive_rng(config.seed, "vsembed-init")
        v, dx, dm, dq = config.vocab_size, config.embed_dim, config.hidden_dim, config.clip_dim
        p = self.params
        p.add("emb", init_gaussian((v, dx), 0.1, rng))
        for gate in ("i", "f", "c", "o"):
            p.add(f"lstm.Wx{gate}", init_gaussian((dm, dx), 0.1, rng))
            p.add(f"lstm.Wh{gate}", init_orthogonal((dm, dm), rng))
        # Peepholes multiply the cell componentwise, so they are vectors.
        for gate in ("i", "f", "o"):
            p.add(f"lstm.wc{gate}", init_gaussian((dm,), 0.1, rng))
        p.add("clip.WI", init_gaussian((dm, dq), 0.1, rng))

    def _w(self, name: str) -> np.ndarray:
        return self.params.value(name)

    def _g(self, name: str) -> np.ndarray:
        return self.params.grad(name)

    def _validate_ids(self, ids) -> np.ndarray:
        arr = np.asarray(ids, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError("sentence must be a non-empty 1-D id sequence")
        if arr.min() < 0 or arr.max() >= self.config.vocab_size:
            raise DataError(f"token id out of range 0..{self.config.vocab_size - 1}")
        return arr

    # -- LSTM encoder -----------------------------------------------------------

    def encode_forward(self, ids):
        ids = self._validate_ids(ids)
        emb = self._w("emb")
        Wxi, Whi, wci = self._w("lstm.Wxi"), self._w("lstm.Whi"), self._w("lstm.wci")
        Wxf, Whf, wcf = self._w("lstm.Wxf"), self._w("lstm.Whf"), self._w("lstm.wcf")
        Wxc, Whc = self._w("lstm.Wxc"), self._w("lstm.Whc")
        Wxo, Who, wco = self._w("lstm.Wxo"), self._w("lstm.Who"), self._w("lstm.wco")
        dm = self.config.hidden_dim
        n = ids.size
        X = emb[ids]
        I = np.empty((n, dm))
        F = np.empty((n, dm))
        A = np.empty((n, dm))
        Cc = np.empty((n, dm))
        O = np.empty((n, dm))
        M = np.empty((n, dm))
        c_prev = np.zeros(dm)
        m_prev = np.zeros(dm)
        for t in range(n):
            x = X[t]
            i_t = sigmoid(Wxi @ x + Whi @ m_prev + wci * c_prev)
            f_t = sigmoid(Wxf @ x + Whf @ m_prev + wcf * c_prev)
            a_t = np.tanh(Wxc @ x + Whc @ m_prev)
            c_t = f_t * c_prev + i_t * a_t
            o_t = sigmoid(Wxo @ x + Who @ m_prev + wco * c_t)
            m_t = o_t * np.tanh(c_t)
            I[t], F[t], A[t], Cc[t], O[t], M[t] = i_t, f_t, a_t, c_t, o_t, m_t
            c_prev, m_prev = c_t, m_t
        return {"ids": ids, "X": X, "I": I, "F": F, "A": A, "C": Cc, "O": O, "M": M}

    def encode(self, ids) -> np.ndarray:
        """Sentence vector: the final memory output m^N."""
        return self.encode_forward(ids)["M"][-1].copy()

    def encode_backward(self, cache, dM_last: np.ndarray) -> None:
        ids, X = cache["ids"], cache["X"]
        I, F, A, C, O, M = cache["I"], cache["F"], cache["A"], cache["C"], cache["O"], cache["M"]
        Whi, Whf, Whc, Who = (
            self._w("lstm.Whi"),
            self._w("lstm.Whf"),
            self._w("lstm.Whc"),
            self._w("lstm.Who"),
        )
        Wxi, Wxf, Wxc, Wxo = (
            self._w("lstm.Wxi"),
            self._w("lstm.Wxf"),
            self._w("lstm.Wxc"),
            self._w("lstm.Wxo"),
        )
        wci, wcf, wco = self._w("lstm.wci"), self._w("lstm.wcf"), self._w("lstm.wco")
        g = self._g
        n = ids.size
        dm_next = dM_last.copy()
        dc_next = np.zeros_like(dM_last)
        for t in range(n - 1, -1, -1):
            c_prev = C[t - 1] if t > 0 else np.zeros_like(dm_next)
            m_prev = M[t - 1] if t > 0 else np.zeros_like(dm_next)
            i_t, f_t, a_t, c_t, o_t = I[t], F[t], A[t], C[t], O[t]
            tanh_c = np.tanh(c_t)
            do = dm_next * tanh_c
            dc = dc_next + dm_next * o_t * (1.0 - tanh_c * tanh_c)
            da_o = do * o_t * (1.0 - o_t)
            g("lstm.Wxo")[:] += np.outer(da_o, X[t])
            g("lstm.Who")[:] += np.outer(da_o, m_prev)
            g("lstm.wco")[:] += da_o * c_t
            dc = dc + da_o * wco
            di = dc * a_t
            df = dc * c_prev
            da = dc * i_t
            dc_prev = dc * f_t
            da_i = di * i_t * (1.0 - i_t)
            g("lstm.Wxi")[:] += np.outer(da_i, X[t])
            g("lstm.Whi")[:] += np.outer(da_i, m_prev)
            g("lstm.wci")[:] += da_i * c_prev
            dc_prev = dc_prev + da_i * wci
            da_f = df * f_t * (1.0 - f_t)
            g("lstm.Wxf")[:] += np.outer(da_f, X[t])
            g("lstm.Whf")[:] += np.outer(da_f, m_prev)
            g("lstm.wcf")[:] += da_f * c_prev
            dc_prev = dc_prev + da_f * wcf
            da_a = da * (1.0 - a_t * a_t)
            g("lstm.Wxc")[:] += np.outer(da_a, X[t])
            g("lstm.Whc")[:] += np.outer(da_a, m_prev)
            dm_prev = Whi.T @ da_i + Whf.T @ da_f + Whc.T @ da_a + Who.T @ da_o
            dx = Wxi.T @ da_i + Wxf.T @ da_f + Wxc.T @ da_a + Wxo.T @ da_o
            self._g("emb")[ids[t]] += dx
            dm_next = dm_prev
            dc_next = dc_prev
        return None

    # -- clip side ---------------------------------------------------------------

    def embed_clip(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.config.clip_dim,):
            raise DataError(f"clip feature must have dim {self.config.clip_dim}")
        return self._w("clip.WI") @ q


def pool_frames(frame_features) -> np.ndarray:
    """Mean-pool per-frame feature vectors into one clip vector."""
    frames = [np.asarray(f, dtype=np.float64) for f in frame_features]
    if not frames:
        raise DataError("pool_frames needs at least one frame")
    dim = frames[0].shape
    if any(f.shape != dim for f in frames):
        raise DataError("frame features must share one dimension")
    return np.mean(frames, axis=0)


def score(m: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; both vectors must be nonzero."""
    nm, nv = np.linalg.norm(m), np.linalg.norm(v)
    if nm == 0.0 or nv == 0.0:
        raise NumericError("cosine score undefined for zero vector")
    return float(np.dot(m, v) / (nm * nv))


def _unit_rows(X: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm {label} vector in batch")
    return X / norms[:, None], norms


def ranking_loss(M: np.ndarray, V: np.ndarray, alpha: float):
    """Pairwise hinge ranking loss over a matched batch.

    Row b of `M` (sentence vectors) matches row b of `V` (clip
    embeddings); all other rows act as contrastive samples for both
    directions. Returns (loss, dM, dV); the subgradient at a hinge kink
    is zero.
    """
    if M.shape != V.shape or M.ndim != 2:
        raise DataError("ranking_loss expects matched (B, d) arrays")
    Mu, m_norms = _unit_rows(M, "sentence")
    Vu, v_norms = _unit_rows(V, "clip")
    S = Mu @ Vu.T  # S[b, c] = cos(m_b, v_c)
    B = S.shape[0]
    diag = np.diag(S)
    # Sentence -> contrastive clips, and clip -> contrastive sentences.
    viol_m = np.maximum(0.0, alpha - diag[:, None] + S)
    viol_v = np.maximum(0.0, alpha - diag[None, :] + S)
    np.fill_diagonal(viol_m, 0.0)
    np.fill_diagonal(viol_v, 0.0)
    loss = float(viol_m.sum() + viol_v.sum())
    dS = np.zeros_like(S)
    active_m = viol_m > 0.0
    active_v = viol_v > 0.0
    dS += active_m
    dS += active_v
    np.fill_diagonal(dS, -(active_m.sum(axis=1) + active_v.sum(axis=0)))
    # Back through the cosine: s = m_hat . v_hat.
    dMu = dS @ Vu
    dVu = dS.T @ Mu
    dM = (dMu - (dMu * Mu).sum(axis=1, keepdims=True) * Mu) / m_norms[:, None]
    dV = (dVu - (dVu * Vu).sum(axis=1, keepdims=True) * Vu) / v_norms[:, None]
    return loss, dM, dV


def batch_loss(model: VsEmbedModel, batch, alpha: float, grad_scale: float = 1.0) -> float:
    """Encode a batch of (clip feature, token ids) pairs, apply the hinge
    loss and accumulate gradients (scaled) into the model."""
    caches = [model.encode_forward(ids) for _, ids in batch]
    M = np.stack([c["M"][-1] for c in caches])
    Q = np.stack([np.asarray(q, dtype=np.float64) for q, _ in batch])
    V = Q @ model._w("clip.WI").T
    loss, dM, dV = ranking_loss(M, V, alpha)
    if grad_scale != 0.0:
        model._g("clip.WI")[:] += grad_scale * dV.T @ Q
        for cache, dm in zip(caches, dM):
            model.encode_backward(cache, grad_scale * dm)
    return loss


def median_rank(model: VsEmbedModel, pairs) -> float:
    """Median rank of each sentence's own clip among all clips in `pairs`."""
    if not pairs:
        raise DataError("median_rank needs at least one pair")
    M = np.stack([model.encode(ids) for _, ids in pairs])
    V = np.stack([model.embed_clip(q) for q, _ in pairs])
    Mu, _ = _unit_rows(M, "sentence")
    Vu, _ = _unit_rows(V, "clip")
    S = Mu @ Vu.T
    ranks = []
    for b in range(S.shape[0]):
        own = S[b, b]
        ranks.append(1 + int(np.sum(S[b] > own)))
    return float(statistics.median(ranks))


@dataclass
class VsTrainResult:
    model: VsEmbedModel
    loss_curve: list[float] = field(default_factory=list)
    holdout_median_rank: float | None = None


def train(pairs, config: VsEmbedConfig) -> VsTrainResult:
    """Minibatch SGD (no momentum) on the hinge ranking loss.

    The loss curve reports the mean per-pair hinge loss per epoch; after
    training, the median retrieval rank on a held-out split (or the
    training set when the split would be empty) is attached.
    """
    if not pairs:
        raise DataError("training set is empty")
    model = VsEmbedModel(config)
    rng = derive_rng(config.seed, "vsembed-train")
    n_holdout = int(len(pairs) * config.holdout_fraction)
    split = rng.permutation(len(pairs))
    holdout = [pairs[i] for i in split[:n_holdout]]
    trainset = [pairs[i] for i in split[n_holdout:]]
    if not trainset:
        raise DataError("holdout fraction leaves no training pairs")
    sgd = SgdConfig(lr=config.lr)
    curve: list[float] = []
    last_good = model.params.copy()
    for _ in range(config.epochs):
        order = rng.permutation(len(trainset))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue  # a singleton batch has no contrastive samples
            batch = [trainset[i] for i in idx]
            loss = batch_loss(model, batch, config.margin, grad_scale=1.0 / idx.size)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    "vsembed training diverged (non-finite loss)",
                    last_good_params=last_good,
                )
            sgd_step(model.params, sgd)
            epoch_loss += loss
        curve.append(epoch_loss / len(order))
        last_good = model.params.copy()
    result = VsTrainResult(model=model, loss_curve=curve)
    eval_pairs = holdout if len(holdout) >= 2 else trainset
    result.holdout_median_rank = median_rank(model, eval_pairs)
    return result


def load_model(checkpoint) -> VsEmbedModel:
    params = checkpoint.params
    v, dx = params.value("emb").shape
    dm, dq = params.value("clip.WI").shape
    config = VsEmbedConfig(vocab_size=v, clip_dim=dq, embed_dim=dx, hidden_dim=dm)
    model = VsEmbedModel(config, rng=np.random.default_rng(0))
    model.params.load_values(params)
    return model
