"""Sentence encoder trained to reconstruct neighboring sentences.

A GRU encodes a sentence into its final hidden state; two separate GRU
decoders, conditioned on that vector, reconstruct the previous and the
next sentence. Both decoders share the word embedding matrix and one
vocabulary projection. The recurrences carry no bias terms. Similarity
between trained sentence vectors is an inner product.

All forward/backward passes are hand-written; gradients accumulate into
the model's ParamStore.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, TrainingDiverged
from .numerics import (
    AdamState,
    ParamStore,
    adam_step,
    derive_rng,
    init_gaussian,
    init_orthogonal,
)

MODEL_KIND = "skipthought"

DECODER_SIDES = ("prev", "next")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; saturates to exact 0/1 for huge |x|."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class SkipThoughtConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    eos_id: int = 1
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class SentenceTriple:
    """Token-id sequences of three consecutive sentences in one document."""

    prev: tuple[int, ...]
    current: tuple[int, ...]
    next: tuple[int, ...]


class SkipThoughtModel:
    """GRU encoder + two conditioned GRU decoders over a shared vocabulary."""

    def __init__(self, config: SkipThoughtConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params = ParamStore()
        rng = rng if rng is not None else derive_rng(config.seed, "skipthought-init")
        v, dx, dh = config.vocab_size, config.embed_dim, config.hidden_dim
        if config.eos_id >= v:
            raise DataError("eos_id outside vocabulary")
        p = self.params
        p.add("emb", init_gaussian((v, dx), 0.1, rng))
        for gate in ("", "z", "r"):
            p.add(f"enc.W{gate}", init_gaussian((dh, dx), 0.1, rng))
            p.add(f"enc.U{gate}", init_orthogonal((dh, dh), rng))
        for side in DECODER_SIDES:
            for gate in ("", "z", "r"):
                p.add(f"dec.{side}.W{gate}", init_gaussian((dh, dx), 0.1, rng))
                p.add(f"dec.{side}.U{gate}", init_orthogonal((dh, dh), rng))
                p.add(f"dec.{side}.C{gate}", init_orthogonal((dh, dh), rng))
        p.add("proj.V", init_gaussian((v, dh), 0.1, rng))

    # -- parameter accessors -------------------------------------------------

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

    # -- encoder ---------------------------------------------------------------

    def encode_forward(self, ids):
        """Run the encoder; returns a cache with all per-step quantities."""
        ids = self._validate_ids(ids)
        emb = self._w("emb")
        W, U = self._w("enc.W"), self._w("enc.U")
        Wz, Uz = self._w("enc.Wz"), self._w("enc.Uz")
        Wr, Ur = self._w("enc.Wr"), self._w("enc.Ur")
        dh = self.config.hidden_dim
        n = ids.size
        X = emb[ids]
        Z = np.empty((n, dh))
        R = np.empty((n, dh))
        Hbar = np.empty((n, dh))
        H = np.empty((n, dh))
        h_prev = np.zeros(dh)
        for t in range(n):
            x = X[t]
            z = sigmoid(Wz @ x + Uz @ h_prev)
            r = sigmoid(Wr @ x + Ur @ h_prev)
            hbar = np.tanh(W @ x + U @ (r * h_prev))
            h = (1.0 - z) * h_prev + z * hbar
            Z[t], R[t], Hbar[t], H[t] = z, r, hbar, h
            h_prev = h
        return {"ids": ids, "X": X, "Z": Z, "R": R, "Hbar": Hbar, "H": H}

    def encode(self, ids) -> np.ndarray:
        """Sentence vector: the encoder's final hidden state."""
        return self.encode_forward(ids)["H"][-1].copy()

    def encode_states(self, ids):
        """(sentence vector, all hidden states) per the encoder contract."""
        cache = self.encode_forward(ids)
        return cache["H"][-1].copy(), cache["H"].copy()

    def encode_backward(self, cache, dH_last: np.ndarray, scale: float = 1.0) -> None:
        """Backpropagate a gradient on the final hidden state through time."""
        ids, X = cache["ids"], cache["X"]
        Z, R, Hbar, H = cache["Z"], cache["R"], cache["Hbar"], cache["H"]
        W, U = self._w("enc.W"), self._w("enc.U")
        Uz, Ur = self._w("enc.Uz"), self._w("enc.Ur")
        gW, gU = self._g("enc.W"), self._g("enc.U")
        gWz, gUz = self._g("enc.Wz"), self._g("enc.Uz")
        gWr, gUr = self._g("enc.Wr"), self._g("enc.Ur")
        Wz, Wr = self._w("enc.Wz"), self._w("enc.Wr")
        gEmb = self._g("emb")
        n = ids.size
        dh_next = scale * dH_last
        for t in range(n - 1, -1, -1):
            h_prev = H[t - 1] if t > 0 else np.zeros_like(dh_next)
            z, r, hbar = Z[t], R[t], Hbar[t]
            dz = dh_next * (hbar - h_prev)
            dhbar = dh_next * z
            dh_prev = dh_next * (1.0 - z)
            da_h = dhbar * (1.0 - hbar * hbar)
            gW += np.outer(da_h, X[t])
            gU += np.outer(da_h, r * h_prev)
            d_rh = U.T @ da_h
            dr = d_rh * h_prev
            dh_prev = dh_prev + d_rh * r
            da_z = dz * z * (1.0 - z)
            gWz += np.outer(da_z, X[t])
            gUz += np.outer(da_z, h_prev)
            dh_prev = dh_prev + Uz.T @ da_z
            da_r = dr * r * (1.0 - r)
            gWr += np.outer(da_r, X[t])
            gUr += np.outer(da_r, h_prev)
            dh_prev = dh_prev + Ur.T @ da_r
            dx = W.T @ da_h + Wz.T @ da_z + Wr.T @ da_r
            gEmb[ids[t]] += dx
            dh_next = dh_prev

    # -- decoder ---------------------------------------------------------------

    def decode_forward(self, target_ids, h_sentence: np.ndarray, side: str):
        """Teacher-forced decoder pass conditioned on the sentence vector.

        Step t consumes the embedding of target token t-1; the first step
        consumes the end-of-sentence embedding (reused as start symbol).
        """
        if side not in DECODER_SIDES:
            raise DataError(f"unknown decoder side {side!r}")
        target = self._validate_ids(target_ids)
        emb = self._w("emb")
        p = f"dec.{side}."
        W, U, C = self._w(p + "W"), self._w(p + "U"), self._w(p + "C")
        Wz, Uz, Cz = self._w(p + "Wz"), self._w(p + "Uz"), self._w(p + "Cz")
        Wr, Ur, Cr = self._w(p + "Wr"), self._w(p + "Ur"), self._w(p + "Cr")
        V = self._w("proj.V")
        dh = self.config.hidden_dim
        n = target.size
        inputs = np.concatenate(([self.config.eos_id], target[:-1]))
        X = emb[inputs]
        ch = C @ h_sentence
        ch_z = Cz @ h_sentence
        ch_r = Cr @ h_sentence
        Z = np.empty((n, dh))
        R = np.empty((n, dh))
        Hbar = np.empty((n, dh))
        H = np.empty((n, dh))
        h_prev = np.zeros(dh)
        for t in range(n):
            x = X[t]
            z = sigmoid(Wz @ x + Uz @ h_prev + ch_z)
            r = sigmoid(Wr @ x + Ur @ h_prev + ch_r)
            hbar = np.tanh(W @ x + U @ (r * h_prev) + ch)
            h = (1.0 - z) * h_prev + z * hbar
            Z[t], R[t], Hbar[t], H[t] = z, r, hbar, h
            h_prev = h
        logits = H @ V.T
        return {
            "side": side,
            "target": target,
            "inputs": inputs,
            "X": X,
            "Z": Z,
            "R": R,
            "Hbar": Hbar,
            "H": H,
            "h_sentence": h_sentence,
            "logits": logits,
        }

    def decode_logits(self, target_ids, h_sentence: np.ndarray, side: str) -> np.ndarray:
        """Per-step vocabulary logits V @ h^t under teacher forcing."""
        return self.decode_forward(target_ids, h_sentence, side)["logits"].copy()

    def _decode_backward(self, cache, dLogits: np.ndarray) -> np.ndarray:
        """Backward through projection and decoder; returns grad on h_sentence."""
        side = cache["side"]
        p = f"dec.{side}."
        W, U = self._w(p + "W"), self._w(p + "U")
        Uz, Ur = self._w(p + "Uz"), self._w(p + "Ur")
        Wz, Wr = self._w(p + "Wz"), self._w(p + "Wr")
        C, Cz, Cr = self._w(p + "C"), self._w(p + "Cz"), self._w(p + "Cr")
        gW, gU, gC = self._g(p + "W"), self._g(p + "U"), self._g(p + "C")
        gWz, gUz, gCz = self._g(p + "Wz"), self._g(p + "Uz"), self._g(p + "Cz")
        gWr, gUr, gCr = self._g(p + "Wr"), self._g(p + "Ur"), self._g(p + "Cr")
        V, gV = self._w("proj.V"), self._g("proj.V")
        gEmb = self._g("emb")
        X, Z, R, Hbar, H = cache["X"], cache["Z"], cache["R"], cache["Hbar"], cache["H"]
        inputs = cache["inputs"]
        h_sentence = cache["h_sentence"]
        n = inputs.size
        gV += dLogits.T @ H
        dH = dLogits @ V
        dh_next = np.zeros(self.config.hidden_dim)
        dh_sent = np.zeros_like(h_sentence)
        for t in range(n - 1, -1, -1):
            dh = dH[t] + dh_next
            h_prev = H[t - 1] if t > 0 else np.zeros_like(dh)
            z, r, hbar = Z[t], R[t], Hbar[t]
            dz = dh * (hbar - h_prev)
            dhbar = dh * z
            dh_prev = dh * (1.0 - z)
            da_h = dhbar * (1.0 - hbar * hbar)
            gW += np.outer(da_h, X[t])
            gU += np.outer(da_h, r * h_prev)
            gC += np.outer(da_h, h_sentence)
            dh_sent += C.T @ da_h
            d_rh = U.T @ da_h
            dr = d_rh * h_prev
            dh_prev = dh_prev + d_rh * r
            da_z = dz * z * (1.0 - z)
            gWz += np.outer(da_z, X[t])
            gUz += np.outer(da_z, h_prev)
            gCz += np.outer(da_z, h_sentence)
            dh_sent += Cz.T @ da_z
            dh_prev = dh_prev + Uz.T @ da_z
            da_r = dr * r * (1.0 - r)
            gWr += np.outer(da_r, X[t])
            gUr += np.outer(da_r, h_prev)
            gCr += np.outer(da_r, h_sentence)
            dh_sent += Cr.T @ da_r
            dh_prev = dh_prev + Ur.T @ da_r
            dx = W.T @ da_h + Wz.T @ da_z + Wr.T @ da_r
            gEmb[inputs[t]] += dx
            dh_next = dh_prev
        return dh_sent

    # -- loss -------------------------------------------------------------------

    def triple_loss(self, triple: SentenceTriple, grad_scale: float = 1.0) -> float:
        """Negative log-likelihood of both neighbors given the encoded center.

        Gradients scaled by `grad_scale` are added to the parameter
        store's accumulators; pass 0.0 for a loss-only evaluation.
        """
        enc_cache = self.encode_forward(triple.current)
        h_sentence = enc_cache["H"][-1]
        loss = 0.0
        dec_caches = []
        dlogits_list = []
        for side, target in (("prev", triple.prev), ("next", triple.next)):
            cache = self.decode_forward(target, h_sentence, side)
            logp = np.empty(cache["target"].size)
            dlog = np.empty_like(cache["logits"])
            for t, w in enumerate(cache["target"]):
                ls = log_softmax(cache["logits"][t])
                logp[t] = ls[w]
                probs = np.exp(ls)
                probs[w] -= 1.0
                dlog[t] = probs
            loss -= logp.sum()
            dec_caches.append(cache)
            dlogits_list.append(dlog)
        if grad_scale != 0.0:
            dh_sent = np.zeros_like(h_sentence)
            for cache, dlog in zip(dec_caches, dlogits_list):
                dh_sent += self._decode_backward(cache, grad_scale * dlog)
            self.encode_backward(enc_cache, dh_sent)
        return float(loss)

    # -- similarity -------------------------------------------------------------

    @staticmethod
    def similarity(u: np.ndarray, v: np.ndarray) -> float:
        """Raw inner product between two sentence vectors."""
        return float(np.dot(u, v))

    @staticmethod
    def cosine(u: np.ndarray, v: np.ndarray) -> float:
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            raise NumericError("cosine undefined for zero vector")
        return float(np.dot(u, v) / (nu * nv))


def nearest_neighbors(model: SkipThoughtModel, query_ids, pool, k: int):
    """Top-k pool entries by inner product with the encoded query.

    Ties break toward the smaller pool index. `pool` is a sequence of
    token-id sequences; returns (pool_index, score) pairs.
    """
    if k <= 0:
        return []
    q = model.encode(query_ids)
    scores = np.array([model.similarity(q, model.encode(ids)) for ids in pool])
    order = np.argsort(-scores, kind="stable")
    return [(int(i), float(scores[i])) for i in order[:k]]


def make_triples(documents, eos_id: int = 1) -> list[SentenceTriple]:
    """Build training triples from documents (lists of id sequences).

    Triples never cross document boundaries. The end-of-sentence id is
    appended to the decoded targets so the model learns termination; the
    encoder consumes the center sentence as-is.
    """
    triples: list[SentenceTriple] = []
    for doc in documents:
        for i in range(1, len(doc) - 1):
            prev_ids, cur_ids, next_ids = doc[i - 1], doc[i], doc[i + 1]
            if not prev_ids or not cur_ids or not next_ids:
                continue
            triples.append(
                SentenceTriple(
                    prev=tuple(prev_ids) + (eos_id,),
                    current=tuple(cur_ids),
                    next=tuple(next_ids) + (eos_id,),
                )
            )
    return triples


@dataclass
class TrainResult:
    model: SkipThoughtModel
    loss_curve: list[float] = field(default_factory=list)


def train(triples, config: SkipThoughtConfig) -> TrainResult:
    """Minibatch Adam on the mean triple loss; deterministic given the seed."""
    if not triples:
        raise DataError("training corpus is empty")
    model = SkipThoughtModel(config)
    state = AdamState(lr=config.lr)
    rng = derive_rng(config.seed, "skipthought-train")
    curve: list[float] = []
    last_good = model.params.copy()
    for _ in range(config.epochs):
        order = rng.permutation(len(triples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            scale = 1.0 / batch.size
            batch_loss = 0.0
            for idx in batch:
                batch_loss += model.triple_loss(triples[idx], grad_scale=scale)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    "skipthought training diverged (non-finite loss)",
                    last_good_params=last_good,
                )
            adam_step(model.params, state)
            epoch_loss += batch_loss
        curve.append(epoch_loss / len(order))
        last_good = model.params.copy()
    return TrainResult(model=model, loss_curve=curve)


def load_model(checkpoint) -> SkipThoughtModel:
    """Rebuild a model from a loaded checkpoint (dims come from shapes)."""
    params = checkpoint.params
    v, dx = params.value("emb").shape
    dh = params.value("enc.U").shape[0]
    config = SkipThoughtConfig(vocab_size=v, embed_dim=dx, hidden_dim=dh)
    model = SkipThoughtModel(config, rng=np.random.default_rng(0))
    model.params.load_values(params)
    return model
