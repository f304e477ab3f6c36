"""Global alignment as a chain CRF over subtitle-sentence nodes.

Each node's state is a book sentence index. The unary potential is the
negative log of the CNN score; two pairwise potentials compare the
normalized time gap between neighboring nodes with their normalized book
distance (robust quadratic saturation) and penalize book distance alone.
The minimum-energy configuration is found exactly by dynamic programming
over a band of states around the uniform alignment.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

DEFAULT_PRUNE_FRACTION = 1.0 / 3.0


@dataclass
class CrfWeights:
    wu: float = 1.0
    wp: float = 1.0
    wq: float = 1.0
    sigma2: float = 0.01

    def __post_init__(self) -> None:
        if self.wu < 0 or self.wp < 0 or self.wq < 0:
            raise DataError("crf weights must be nonnegative")
        if not (self.wu > 0 or self.wp > 0 or self.wq > 0):
            raise DataError("at least one crf weight must be positive")
        if not self.sigma2 > 0:
            raise DataError("sigma2 must be positive")


@dataclass
class ChainCrf:
    """Unary table plus normalized node positions along the movie timeline.

    `unary[k, j]` is the unweighted unary potential of node k in state j.
    `positions` are node midpoints normalized to [0, 1]; consecutive
    differences give the subtitle-side distance d_s of each edge.
    """

    unary: np.ndarray  # (K, n_states)
    positions: np.ndarray  # (K,)
    node_subtitle_ids: np.ndarray | None = None
    node_spans_ms: np.ndarray | None = None  # (K, 2)

    def __post_init__(self) -> None:
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.unary.ndim != 2:
            raise DataError("unary table must be 2-D (nodes, states)")
        if self.positions.shape != (self.unary.shape[0],):
            raise DataError("positions must have one entry per node")
        if self.unary.shape[0] == 0 or self.unary.shape[1] == 0:
            raise DataError("chain needs at least one node and one state")
        if np.any(np.diff(self.positions) < 0):
            raise DataError("node positions must be nondecreasing")
        if self.positions.min() < 0 or self.positions.max() > 1:
            raise DataError("node positions must lie in [0, 1]")
        if not np.all(np.isfinite(self.unary)):
            raise NumericError("non-finite unary potential")

    @property
    def num_nodes(self) -> int:
        return self.unary.shape[0]

    @property
    def num_states(self) -> int:
        return self.unary.shape[1]

    def edge_ds(self) -> np.ndarray:
        return np.diff(self.positions)


def unary_from_scores(score_map: np.ndarray) -> np.ndarray:
    """-log of CNN match probabilities; scores must lie in [0, 1].

    Values are clamped into (0, 1) before the log so that float32
    round-tripped maps with cells at exactly 0 or 1 stay finite.
    """
    scores = np.asarray(score_map, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite score in score map")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise NumericError("scores must lie in (0, 1)")
    eps = 1e-12
    return -np.log(np.clip(scores, eps, 1.0 - eps))


def build_chain(score_map: np.ndarray, subtitle) -> ChainCrf:
    """One CRF node per subtitle sentence, carrying its time span."""
    spans = np.asarray(subtitle.spans, dtype=np.float64)
    if spans.shape[0] != score_map.shape[0]:
        raise DataError("score map rows must match subtitle sentence count")
    mids = spans.mean(axis=1)
    lo, hi = mids.min(), mids.max()
    positions = (mids - lo) / (hi - lo) if hi > lo else np.zeros_like(mids)
    return ChainCrf(
        unary=unary_from_scores(score_map),
        positions=positions,
        node_subtitle_ids=np.array([s.id for s in subtitle.sentences]),
        node_spans_ms=np.asarray(subtitle.spans, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Potentials


def book_distance(j1: int, j2: int, n_states: int) -> float:
    """Normalized book-side distance d_b in [0, 1]."""
    if n_states <= 1:
        return 0.0
    return abs(int(j1) - int(j2)) / (n_states - 1)


def pairwise_p(d_s: float, d_b: float, sigma2: float) -> float:
    """Timeline-consistency potential: saturating squared gap mismatch."""
    gap = (d_s - d_b) ** 2
    return gap / (gap + sigma2)


def pairwise_q(d_b: float, sigma2: float) -> float:
    """State-consistency potential: saturating squared book distance."""
    sq = d_b * d_b
    return sq / (sq + sigma2)


@dataclass
class AlignmentPath:
    y: np.ndarray  # (K,) book sentence indices
    energy: float
    node_unaries: np.ndarray  # (K,) weighted unary terms
    edge_terms: np.ndarray  # (K-1,) weighted pairwise terms

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.int64)


def path_energy(crf: ChainCrf, weights: CrfWeights, y) -> AlignmentPath:
    """Energy with its per-node / per-edge breakdown (each edge once)."""
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (crf.num_nodes,):
        raise DataError("path length must equal node count")
    if y.min() < 0 or y.max() >= crf.num_states:
        raise DataError("path state out of range")
    node_unaries = weights.wu * crf.unary[np.arange(crf.num_nodes), y]
    ds = crf.edge_ds()
    edge_terms = np.empty(max(crf.num_nodes - 1, 0))
    for k in range(crf.num_nodes - 1):
        db = book_distance(y[k], y[k + 1], crf.num_states)
        edge_terms[k] = weights.wp * pairwise_p(ds[k], db, weights.sigma2) + (
            weights.wq * pairwise_q(db, weights.sigma2)
        )
    energy = float(node_unaries.sum() + edge_terms.sum())
    return AlignmentPath(y=y, energy=energy, node_unaries=node_unaries, edge_terms=edge_terms)


def energy(crf: ChainCrf, weights: CrfWeights, y) -> float:
    return path_energy(crf, weights, y).energy


# ---------------------------------------------------------------------------
# Inference


def _state_bands(crf: ChainCrf, prune_fraction: float) -> list[tuple[int, int]]:
    """Closed index interval of allowed states per node.

    Node k keeps states within `prune_fraction * n_states` of the uniform
    alignment at its timeline position.
    """
    n = crf.num_states
    half = prune_fraction * n
    bands = []
    for k in range(crf.num_nodes):
        center = crf.positions[k] * (n - 1)
        lo = max(0, int(np.ceil(center - half)))
        hi = min(n - 1, int(np.floor(center + half)))
        if lo > hi:
            raise DataError(f"empty state band at node {k}")
        bands.append((lo, hi))
    return bands


def infer(
    crf: ChainCrf,
    weights: CrfWeights,
    prune_fraction: float = DEFAULT_PRUNE_FRACTION,
) -> AlignmentPath:
    """Exact minimum-energy path within the pruned bands (Viterbi).

    Ties break toward the smaller book index at every step.
    """
    bands = _state_bands(crf, prune_fraction)
    n = crf.num_states
    ds = crf.edge_ds()
    scale = n - 1 if n > 1 else 1

    lo, hi = bands[0]
    states = np.arange(lo, hi + 1)
    cum = weights.wu * crf.unary[0, states]
    back: list[np.ndarray] = []
    prev_states = states
    for k in range(1, crf.num_nodes):
        lo, hi = bands[k]
        states = np.arange(lo, hi + 1)
        # Pairwise cost depends only on |j - j'| for a fixed edge.
        deltas = np.arange(n) / scale
        cost_by_delta = weights.wp * (
            ((ds[k - 1] - deltas) ** 2) / ((ds[k - 1] - deltas) ** 2 + weights.sigma2)
        ) + weights.wq * ((deltas**2) / (deltas**2 + weights.sigma2))
        pair = cost_by_delta[np.abs(prev_states[:, None] - states[None, :])]
        totals = cum[:, None] + pair
        best_prev = np.argmin(totals, axis=0)
        cum = totals[best_prev, np.arange(states.size)] + weights.wu * crf.unary[k, states]
        back.append(best_prev)
        prev_states = states

    path = np.empty(crf.num_nodes, dtype=np.int64)
    idx = int(np.argmin(cum))
    path[-1] = prev_states[idx]
    for k in range(crf.num_nodes - 2, -1, -1):
        idx = int(back[k][idx])
        lo, hi = bands[k]
        path[k] = lo + idx
    return path_energy(crf, weights, path)


# ---------------------------------------------------------------------------
# Weight fitting by grid search


@dataclass
class FitInstance:
    """A chain with partially observed ground truth for weight fitting."""

    crf: ChainCrf
    observed: dict[int, int]  # node index -> true book sentence
    paragraph_of: np.ndarray  # (n_states,) sentence -> paragraph id


@dataclass
class WeightGrid:
    wu: tuple[float, ...] = (1.0,)
    wp: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    wq: tuple[float, ...] = (0.0, 0.5, 1.0)
    sigma2: tuple[float, ...] = (0.01,)


def _instance_recall(
    instance: FitInstance,
    path: AlignmentPath,
    para_slack: int,
    sent_slack: int,
) -> tuple[int, int]:
    crf = instance.crf
    node_ids = (
        crf.node_subtitle_ids
        if crf.node_subtitle_ids is not None
        else np.arange(crf.num_nodes)
    )
    para = instance.paragraph_of
    hit = 0
    for node, true_state in instance.observed.items():
        window = np.flatnonzero(np.abs(node_ids - node_ids[node]) <= sent_slack)
        target_para = para[true_state]
        if any(abs(int(para[path.y[w]]) - int(target_para)) <= para_slack for w in window):
            hit += 1
    return hit, len(instance.observed)


def fit_weights(
    instances,
    grid: WeightGrid,
    para_slack: int = 3,
    sent_slack: int = 5,
    prune_fraction: float = DEFAULT_PRUNE_FRACTION,
) -> CrfWeights:
    """Grid search maximizing recall on the observed nodes.

    Ties break toward the smaller (wp, wq, wu, sigma2) tuple, so the
    result is deterministic regardless of grid order.
    """
    instances = list(instances)
    if not instances or all(not inst.observed for inst in instances):
        raise DataError("fit_weights needs at least one observed node")
    best: tuple[float, tuple[float, float, float, float]] | None = None
    best_weights: CrfWeights | None = None
    for wu, wp, wq, s2 in itertools.product(
        sorted(grid.wu), sorted(grid.wp), sorted(grid.wq), sorted(grid.sigma2)
    ):
        if not (wu > 0 or wp > 0 or wq > 0):
            continue
        weights = CrfWeights(wu=wu, wp=wp, wq=wq, sigma2=s2)
        hits = 0
        total = 0
        for inst in instances:
            path = infer(inst.crf, weights, prune_fraction)
            h, t = _instance_recall(inst, path, para_slack, sent_slack)
            hits += h
            total += t
        recall = hits / total
        key = (-recall, (wp, wq, wu, s2))
        if best is None or key < best:
            best = key
            best_weights = weights
    assert best_weights is not None
    return best_weights


# ---------------------------------------------------------------------------
# Output


ALIGNMENT_COLUMNS = (
    "node_id",
    "subtitle_sentence_id",
    "start_ms",
    "end_ms",
    "book_sentence_id",
    "book_line",
    "paragraph_id",
    "chapter_id",
    "unary",
    "edge_energy",
)


def write_alignment_tsv(path_out, alignment: AlignmentPath, crf: ChainCrf, book) -> None:
    """One row per node. `edge_energy` is the weighted pairwise term of the
    edge arriving from the previous node (0 for the first node)."""
    para_of = book.paragraph_index()
    with open(path_out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(ALIGNMENT_COLUMNS)
        for k in range(crf.num_nodes):
            j = int(alignment.y[k])
            sentence = book.sentences[j]
            paragraph = int(para_of[j])
            chapter = book.chapter_of(paragraph)
            sub_id = (
                int(crf.node_subtitle_ids[k]) if crf.node_subtitle_ids is not None else k
            )
            span = (
                crf.node_spans_ms[k] if crf.node_spans_ms is not None else (0, 0)
            )
            edge = 0.0 if k == 0 else float(alignment.edge_terms[k - 1])
            writer.writerow(
                [
                    k,
                    sub_id,
                    int(span[0]),
                    int(span[1]),
                    j,
                    sentence.source_line,
                    paragraph,
                    chapter,
                    f"{alignment.node_unaries[k]:.12g}",
                    f"{edge:.12g}",
                ]
            )


def read_alignment_tsv(path_in):
    """Parse an alignment TSV back into (path, node subtitle ids, spans)."""
    with open(path_in, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != ALIGNMENT_COLUMNS:
            raise DataError(f"{path_in} is not an alignment file")
        y = []
        sub_ids = []
        spans = []
        unaries = []
        edges = []
        for row in reader:
            y.append(int(row[4]))
            sub_ids.append(int(row[1]))
            spans.append((int(row[2]), int(row[3])))
            unaries.append(float(row[8]))
            edges.append(float(row[9]))
    path = AlignmentPath(
        y=np.array(y, dtype=np.int64),
        energy=float(np.sum(unaries) + np.sum(edges)),
        node_unaries=np.array(unaries),
        edge_terms=np.array(edges[1:]) if len(edges) > 1 else np.empty(0),
    )
    return path, np.array(sub_ids), np.array(spans, dtype=np.int64).reshape(-1, 2)
