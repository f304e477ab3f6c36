"""Metrics and baselines for movie-book alignment.

Recall counts a ground-truth correspondence as hit when some node within
5 subtitle sentences of the annotated time predicts a book sentence
within 3 paragraphs of the annotated one. Average precision sweeps the
paragraph threshold from 0 upward and integrates the precision-recall
steps. The precision denominator at each threshold is the set of
predicted nodes lying within the sentence slack of any ground-truth
time (recorded in the report metadata).
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crfalign import AlignmentPath
from .errors import DataError, ParseError

GT_TAGS = ("visual", "dialogue", "audio")


@dataclass(frozen=True)
class GroundTruthEntry:
    time_s: float
    line_start: int
    time_end_s: float | None = None
    line_end: int | None = None
    tag: str = "dialogue"

    def __post_init__(self) -> None:
        if self.time_s < 0:
            raise DataError("ground-truth time must be nonnegative")
        if self.line_start < 1:
            raise DataError("ground-truth line numbers are 1-based")
        if self.tag not in GT_TAGS:
            raise DataError(f"unknown ground-truth tag {self.tag!r}")


def parse_ground_truth(text: str, source: str = "<string>") -> list[GroundTruthEntry]:
    """TSV rows: time_s, time_end_s (may be empty), line_start, line_end
    (may be empty), tag. Lines starting with '#' are comments."""
    entries: list[GroundTruthEntry] = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ParseError(f"{source}:{ln}: expected 5 tab-separated fields")
        try:
            time_s = float(parts[0])
            time_end = float(parts[1]) if parts[1].strip() else None
            line_start = int(parts[2])
            line_end = int(parts[3]) if parts[3].strip() else None
        except ValueError as exc:
            raise ParseError(f"{source}:{ln}: bad numeric field") from exc
        entries.append(
            GroundTruthEntry(
                time_s=time_s,
                time_end_s=time_end,
                line_start=line_start,
                line_end=line_end,
                tag=parts[4].strip(),
            )
        )
    return entries


def load_ground_truth(path) -> list[GroundTruthEntry]:
    entries = parse_ground_truth(Path(path).read_text(encoding="utf-8"), source=str(path))
    if not entries:
        raise DataError(f"ground-truth file {path} has no entries")
    return entries


# ---------------------------------------------------------------------------
# Lookup helpers


def sentence_at_line(book, line: int) -> int:
    """Sentence whose source line is the closest at or before `line`."""
    if not book.sentences:
        raise DataError("book has no sentences")
    lines = [s.source_line for s in book.sentences]
    idx = bisect.bisect_right(lines, line) - 1
    return max(idx, 0)


def nearest_subtitle_sentence(subtitle, time_ms: float) -> int:
    """Global subtitle sentence index with the nearest span midpoint."""
    if not subtitle.sentences:
        raise DataError("subtitle track has no sentences")
    mids = subtitle.midpoints_ms()
    dist = np.abs(mids - time_ms)
    return int(np.argmin(dist))


@dataclass
class EvalReport:
    recall: float  # percent
    average_precision: float  # percent
    curve: list[tuple[int, float, float]]  # (threshold, precision, recall)
    counts: dict[str, int] = field(default_factory=dict)
    metadata: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "recall": self.recall,
                "average_precision": self.average_precision,
                "curve": [
                    {"threshold": t, "precision": p, "recall": r} for t, p, r in self.curve
                ],
                "counts": self.counts,
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )

    def to_table(self) -> str:
        lines = [
            f"recall@(3,5)      {self.recall:8.2f} %",
            f"average precision {self.average_precision:8.2f} %",
            "threshold  precision  recall",
        ]
        for t, p, r in self.curve:
            lines.append(f"{t:9d}  {p:9.4f}  {r:6.4f}")
        return "\n".join(lines)

    def curve_csv(self) -> str:
        rows = ["threshold,precision,recall"]
        rows += [f"{t},{p:.6f},{r:.6f}" for t, p, r in self.curve]
        return "\n".join(rows) + "\n"


def _gt_windows(gt, pred, book, subtitle, sent_slack: int):
    """Per GT entry: candidate node indices and paragraph distances."""
    para_of = book.paragraph_index()
    n_nodes = len(pred.y)
    windows = []
    for entry in gt:
        center = nearest_subtitle_sentence(subtitle, entry.time_s * 1000.0)
        lo = max(0, center - sent_slack)
        hi = min(n_nodes - 1, center + sent_slack)
        nodes = list(range(lo, hi + 1))
        target_sentence = sentence_at_line(book, entry.line_start)
        target_para = int(para_of[target_sentence])
        dists = [abs(int(para_of[pred.y[n]]) - target_para) for n in nodes]
        windows.append((nodes, dists))
    return windows


def recall_at(
    gt,
    pred: AlignmentPath,
    book,
    subtitle,
    para_slack: int = 3,
    sent_slack: int = 5,
) -> float:
    """Percent of GT entries with a close-enough prediction nearby."""
    if not gt:
        raise DataError("ground truth is empty")
    windows = _gt_windows(gt, pred, book, subtitle, sent_slack)
    hit = sum(1 for _, dists in windows if dists and min(dists) <= para_slack)
    return 100.0 * hit / len(gt)


def average_precision(
    gt,
    pred: AlignmentPath,
    book,
    subtitle,
    t_max: int = 10,
    sent_slack: int = 5,
):
    """AP over paragraph-offset thresholds 0..t_max (step interpolation).

    Returns (ap_percent, curve) where curve rows are
    (threshold, precision, recall) with fractions in [0, 1].
    """
    if not gt:
        raise DataError("ground truth is empty")
    windows = _gt_windows(gt, pred, book, subtitle, sent_slack)
    gt_best = [min(dists) if dists else np.inf for _, dists in windows]
    node_best: dict[int, float] = {}
    for nodes, dists in windows:
        for n, d in zip(nodes, dists):
            node_best[n] = min(node_best.get(n, np.inf), d)
    denom = len(node_best)
    curve = []
    ap = 0.0
    prev_recall = 0.0
    for tau in range(t_max + 1):
        recall = sum(1 for d in gt_best if d <= tau) / len(gt)
        precision = (
            sum(1 for d in node_best.values() if d <= tau) / denom if denom else 0.0
        )
        ap += precision * (recall - prev_recall)
        prev_recall = recall
        curve.append((tau, precision, recall))
    return 100.0 * ap, curve


def evaluate(
    gt,
    pred: AlignmentPath,
    book,
    subtitle,
    para_slack: int = 3,
    sent_slack: int = 5,
    t_max: int = 10,
) -> EvalReport:
    recall = recall_at(gt, pred, book, subtitle, para_slack, sent_slack)
    ap, curve = average_precision(gt, pred, book, subtitle, t_max, sent_slack)
    return EvalReport(
        recall=recall,
        average_precision=ap,
        curve=curve,
        counts={"ground_truth": len(gt), "nodes": len(pred.y)},
        metadata={
            "para_slack": para_slack,
            "sent_slack": sent_slack,
            "t_max": t_max,
            "precision_denominator": "nodes within sent_slack of any ground-truth time",
        },
    )


# ---------------------------------------------------------------------------
# Baselines and retrieval


def uniform_baseline(subtitle, book) -> AlignmentPath:
    """Map each node's time fraction to the nearest book line fraction.

    Ties go to the smaller line (hence the earlier sentence). The result
    carries no CRF energy (nan).
    """
    if not subtitle.sentences or not book.sentences:
        raise DataError("uniform baseline needs sentences on both sides")
    mids = subtitle.midpoints_ms()
    lo, hi = mids.min(), mids.max()
    fracs = (mids - lo) / (hi - lo) if hi > lo else np.zeros_like(mids)
    lines = np.array([s.source_line for s in book.sentences], dtype=np.float64)
    l_lo, l_hi = lines.min(), lines.max()
    line_fracs = (lines - l_lo) / (l_hi - l_lo) if l_hi > l_lo else np.zeros_like(lines)
    y = np.empty(len(subtitle.sentences), dtype=np.int64)
    for k, f in enumerate(fracs):
        dist = np.abs(line_fracs - f)
        y[k] = int(np.argmin(dist))  # first occurrence = smaller line
    return AlignmentPath(
        y=y,
        energy=float("nan"),
        node_unaries=np.zeros(len(y)),
        edge_terms=np.zeros(max(len(y) - 1, 0)),
    )


def argmax_path(score_map: np.ndarray) -> AlignmentPath:
    """Per-node argmax of the CNN score map (no CRF smoothing)."""
    y = np.argmax(score_map, axis=1).astype(np.int64)
    return AlignmentPath(
        y=y,
        energy=float("nan"),
        node_unaries=np.zeros(len(y)),
        edge_terms=np.zeros(max(len(y) - 1, 0)),
    )


@dataclass
class RetrievalResult:
    name: str
    energy: float
    score: float  # best candidate scores exactly 100


def book_retrieval(candidates, align_energy) -> list[RetrievalResult]:
    """Rank candidate books by alignment energy (lower is better).

    `candidates` is a sequence of (name, payload); `align_energy` maps a
    payload to the optimal CRF energy. Scores are inverse-energy ratios
    scaled so the best candidate gets exactly 100 (energies are shifted
    positive first when necessary), preserving the energy order.
    """
    candidates = list(candidates)
    if not candidates:
        raise DataError("book retrieval needs at least one candidate")
    names = [name for name, _ in candidates]
    energies = np.array([float(align_energy(payload)) for _, payload in candidates])
    if not np.all(np.isfinite(energies)):
        raise DataError("non-finite alignment energy")
    shifted = energies - energies.min() + 1.0 if energies.min() <= 0 else energies
    scores = 100.0 * shifted.min() / shifted
    order = sorted(range(len(names)), key=lambda i: (-scores[i], i))
    return [
        RetrievalResult(name=names[i], energy=float(energies[i]), score=float(scores[i]))
        for i in order
    ]


@dataclass
class CrossMatch:
    node: int
    book_sentence: int
    paragraph: int
    score: float


def cross_match(score_map: np.ndarray, book, top_k: int) -> list[CrossMatch]:
    """Top-k (node, book sentence) cells of the CNN score map, no CRF."""
    if top_k <= 0:
        return []
    para_of = book.paragraph_index()
    flat = score_map.reshape(-1)
    k = min(top_k, flat.size)
    # Sort by descending score, then ascending (node, sentence).
    order = np.lexsort((np.arange(flat.size), -flat))[:k]
    n_book = score_map.shape[1]
    out = []
    for idx in order:
        i, j = divmod(int(idx), n_book)
        out.append(
            CrossMatch(
                node=i,
                book_sentence=j,
                paragraph=int(para_of[j]),
                score=float(score_map[i, j]),
            )
        )
    return out
