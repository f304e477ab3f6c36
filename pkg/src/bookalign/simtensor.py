"""Per-channel similarities between subtitle and book sentences, stacked
into a 3-D tensor S(i, j, m) with nine channels in a fixed order:

    VIS, BOOK_EMB, BLEU1..BLEU5, TFIDF, PRIOR

Each channel is min-max normalized to [0, 1] over its own slice
(constant channels become 0.5); the normalization metadata is kept so a
tensor file is self-describing.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DataError, NumericError, ParseError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"ALIGNTENS"
TENSOR_VERSION = 1


class ChannelId(IntEnum):
    VIS = 0
    BOOK_EMB = 1
    BLEU1 = 2
    BLEU2 = 3
    BLEU3 = 4
    BLEU4 = 5
    BLEU5 = 6
    TFIDF = 7
    PRIOR = 8


CHANNEL_NAMES = tuple(c.name for c in ChannelId)
NUM_CHANNELS = len(CHANNEL_NAMES)


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int) -> float:
    """Sentence BLEU up to order `n` with clipped n-gram precision.

    Geometric mean of precisions of orders 1..n, brevity penalty
    exp(1 - r/c) when the candidate is shorter than the reference.
    Orders above 1 use add-one smoothing on numerator and denominator so
    identical sentences score exactly 1.
    """
    if not 1 <= n <= 5:
        raise DataError("bleu order must be in 1..5")
    candidate = list(candidate)
    reference = list(reference)
    c = len(candidate)
    if c == 0:
        return 0.0
    r = len(reference)
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = _ngram_counts(candidate, k)
        total = max(c - k + 1, 0)
        ref_counts = _ngram_counts(reference, k)
        clipped = sum(min(cnt, ref_counts[g]) for g, cnt in counts.items())
        if k == 1:
            p = clipped / total
        else:
            p = (clipped + 1.0) / (total + 1.0)
        if p == 0.0:
            return 0.0
        log_sum += math.log(p) / n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


# ---------------------------------------------------------------------------
# tf-idf


@dataclass
class CorpusStats:
    """Document frequencies over a sentence corpus (one sentence = one doc)."""

    df: dict[str, int]
    doc_count: int

    def idf(self, token: str) -> float:
        return math.log((1.0 + self.doc_count) / (1.0 + self.df.get(token, 0))) + 1.0


def build_corpus_stats(documents) -> CorpusStats:
    df: Counter[str] = Counter()
    count = 0
    for tokens in documents:
        count += 1
        df.update(set(tokens))
    return CorpusStats(df=dict(df), doc_count=count)


def _tfidf_vector(tokens, stats: CorpusStats) -> dict[str, float]:
    tf = Counter(tokens)
    return {t: c * stats.idf(t) for t, c in tf.items()}


def tfidf_similarity(a, b, stats: CorpusStats) -> float:
    """Cosine of raw-count tf-idf vectors; 0 when either vector is zero."""
    va = _tfidf_vector(a, stats)
    vb = _tfidf_vector(b, stats)
    na = math.sqrt(sum(x * x for x in va.values()))
    nb = math.sqrt(sum(x * x for x in vb.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    if len(va) > len(vb):
        va, vb = vb, va
    dot = sum(x * vb.get(t, 0.0) for t, x in va.items())
    return dot / (na * nb)


# ---------------------------------------------------------------------------
# Channel slices


def bleu_channel(sub_tokens, book_tokens, n: int) -> np.ndarray:
    """BLEU-n with candidate = subtitle sentence, reference = book sentence."""
    out = np.empty((len(sub_tokens), len(book_tokens)))
    for i, cand in enumerate(sub_tokens):
        for j, ref in enumerate(book_tokens):
            out[i, j] = bleu_n(cand, ref, n)
    return out


def tfidf_channel(sub_tokens, book_tokens, stats: CorpusStats) -> np.ndarray:
    out = np.empty((len(sub_tokens), len(book_tokens)))
    vb = [_tfidf_vector(t, stats) for t in book_tokens]
    nb = [math.sqrt(sum(x * x for x in v.values())) for v in vb]
    for i, tokens in enumerate(sub_tokens):
        va = _tfidf_vector(tokens, stats)
        na = math.sqrt(sum(x * x for x in va.values()))
        for j in range(len(book_tokens)):
            if na == 0.0 or nb[j] == 0.0:
                out[i, j] = 0.0
            else:
                dot = sum(x * vb[j].get(t, 0.0) for t, x in va.items())
                out[i, j] = dot / (na * nb[j])
    return out


def _encode_matrix(model, id_sequences, label: str) -> np.ndarray:
    vecs = np.stack([model.encode(ids) for ids in id_sequences])
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm {label} sentence vector")
    return vecs / norms[:, None]


def book_emb_channel(sub_ids, book_ids, st_model) -> np.ndarray:
    """Cosine similarity of skip-thought sentence vectors per (i, j)."""
    S = _encode_matrix(st_model, sub_ids, "subtitle")
    B = _encode_matrix(st_model, book_ids, "book")
    return S @ B.T


def vis_channel(shots, sentence_spans, book_ids, vs_model) -> np.ndarray:
    """Clip-sentence scores mapped onto subtitle-sentence rows.

    Each shot with a feature is scored against every book sentence; a
    subtitle sentence's row is the overlap-weighted average over shots
    intersecting its time span. Rows with no overlapping shot receive the
    channel's minimum value; with no usable shots at all the channel is a
    neutral 0.5 fill.
    """
    n_sub = len(sentence_spans)
    n_book = len(book_ids)
    featured = [s for s in shots if s.feature is not None]
    if not featured:
        logger.warning("vis_channel: no shot features available; neutral 0.5 fill")
        return np.full((n_sub, n_book), 0.5)
    B = _encode_matrix(vs_model, book_ids, "book")
    V = np.stack([vs_model.embed_clip(s.feature) for s in featured])
    v_norms = np.linalg.norm(V, axis=1)
    if np.any(v_norms == 0.0):
        raise NumericError("zero-norm clip embedding")
    V = V / v_norms[:, None]
    shot_scores = V @ B.T  # (n_shots, n_book)
    out = np.empty((n_sub, n_book))
    uncovered = []
    covered_rows = []
    for i, (a, b) in enumerate(sentence_spans):
        weights = np.array(
            [max(0, min(b, s.end) - max(a, s.start)) for s in featured], dtype=np.float64
        )
        total = weights.sum()
        if total > 0:
            out[i] = (weights / total) @ shot_scores
            covered_rows.append(i)
        else:
            uncovered.append(i)
    if not covered_rows:
        logger.warning("vis_channel: no sentence overlaps any shot; neutral 0.5 fill")
        return np.full((n_sub, n_book), 0.5)
    if uncovered:
        fill = out[covered_rows].min()
        for i in uncovered:
            out[i] = fill
    return out


def prior_channel(n_sub: int, n_book: int) -> np.ndarray:
    """Closeness to the uniform timeline: 1 - |i/(N-1) - j/(M-1)|."""
    if n_sub < 1 or n_book < 1:
        raise DataError("prior_channel needs positive extents")
    if n_sub == 1 or n_book == 1:
        return np.ones((n_sub, n_book))
    fi = np.arange(n_sub) / (n_sub - 1)
    fj = np.arange(n_book) / (n_book - 1)
    return 1.0 - np.abs(fi[:, None] - fj[None, :])


# ---------------------------------------------------------------------------
# Assembly


@dataclass
class ChannelNorm:
    name: str
    raw_min: float
    raw_max: float
    constant: bool


@dataclass
class SimilarityTensor:
    data: np.ndarray  # (n_sub, n_book, channels), float64, values in [0, 1]
    channel_names: tuple[str, ...]
    normalization: list[ChannelNorm]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, :, self.channel_names.index(name)]


def _normalize_channel(raw: np.ndarray, name: str) -> tuple[np.ndarray, ChannelNorm]:
    if not np.all(np.isfinite(raw)):
        i, j = np.argwhere(~np.isfinite(raw))[0]
        raise NumericError(f"non-finite value in channel {name} at ({i}, {j})")
    lo = float(raw.min())
    hi = float(raw.max())
    if hi == lo:
        return np.full_like(raw, 0.5), ChannelNorm(name, lo, hi, True)
    return (raw - lo) / (hi - lo), ChannelNorm(name, lo, hi, False)


def assemble(
    sub_tokens,
    book_tokens,
    sub_ids_st,
    book_ids_st,
    st_model,
    sub_spans,
    shots,
    book_ids_vs,
    vs_model,
    extra_channels: dict[str, np.ndarray] | None = None,
) -> SimilarityTensor:
    """Compute every channel and stack the normalized tensor.

    `sub_tokens`/`book_tokens` are token-string sequences (BLEU, tf-idf);
    `*_ids_st` are the same sentences encoded with the sentence-embedding
    vocabulary, `book_ids_vs` with the clip-embedding vocabulary.
    Optional extra channels (already computed (n_sub, n_book) slices) are
    appended after the nine standard ones.
    """
    n_sub, n_book = len(sub_tokens), len(book_tokens)
    if n_sub == 0 or n_book == 0:
        raise DataError("assemble needs at least one subtitle and one book sentence")
    stats = build_corpus_stats(list(book_tokens) + list(sub_tokens))
    raw = {
        ChannelId.VIS: vis_channel(shots, sub_spans, book_ids_vs, vs_model),
        ChannelId.BOOK_EMB: book_emb_channel(sub_ids_st, book_ids_st, st_model),
        ChannelId.BLEU1: bleu_channel(sub_tokens, book_tokens, 1),
        ChannelId.BLEU2: bleu_channel(sub_tokens, book_tokens, 2),
        ChannelId.BLEU3: bleu_channel(sub_tokens, book_tokens, 3),
        ChannelId.BLEU4: bleu_channel(sub_tokens, book_tokens, 4),
        ChannelId.BLEU5: bleu_channel(sub_tokens, book_tokens, 5),
        ChannelId.TFIDF: tfidf_channel(sub_tokens, book_tokens, stats),
        ChannelId.PRIOR: prior_channel(n_sub, n_book),
    }
    names = list(CHANNEL_NAMES)
    slices = [raw[c] for c in ChannelId]
    for name, slice_ in (extra_channels or {}).items():
        if slice_.shape != (n_sub, n_book):
            raise DataError(f"extra channel {name} has shape {slice_.shape}")
        names.append(name)
        slices.append(np.asarray(slice_, dtype=np.float64))
    data = np.empty((n_sub, n_book, len(slices)))
    norms: list[ChannelNorm] = []
    for m, (name, slice_) in enumerate(zip(names, slices)):
        normalized, meta = _normalize_channel(slice_, name)
        data[:, :, m] = normalized
        norms.append(meta)
    return SimilarityTensor(data=data, channel_names=tuple(names), normalization=norms)


# ---------------------------------------------------------------------------
# Persistence (header + raw 32-bit floats)


def save_tensor(path, tensor: SimilarityTensor) -> None:
    header = {
        "extents": list(tensor.data.shape),
        "channels": list(tensor.channel_names),
        "normalization": [
            {"name": n.name, "min": n.raw_min, "max": n.raw_max, "constant": n.constant}
            for n in tensor.normalization
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_tensor(path) -> SimilarityTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise ParseError(f"not a tensor file: {path}")
    off = len(TENSOR_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != TENSOR_VERSION:
        raise ParseError(f"unsupported tensor version {version}")
    off += 8
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    extents = tuple(header["extents"])
    count = int(np.prod(extents))
    values = np.frombuffer(data[off : off + 4 * count], dtype="<f4")
    if values.size != count:
        raise ParseError(f"tensor file {path} truncated")
    norms = [
        ChannelNorm(n["name"], n["min"], n["max"], n["constant"])
        for n in header["normalization"]
    ]
    return SimilarityTensor(
        data=values.astype(np.float64).reshape(extents),
        channel_names=tuple(header["channels"]),
        normalization=norms,
    )


def save_score_map(path, score_map: np.ndarray) -> None:
    """Persist a CNN score map in the tensor container (single channel)."""
    tensor = SimilarityTensor(
        data=score_map[:, :, None].astype(np.float64),
        channel_names=("cnn_score",),
        normalization=[ChannelNorm("cnn_score", 0.0, 1.0, False)],
    )
    save_tensor(path, tensor)


def load_score_map(path) -> np.ndarray:
    tensor = load_tensor(path)
    if tensor.channel_names != ("cnn_score",):
        raise DataError(f"{path} is not a score map")
    return tensor.data[:, :, 0]
