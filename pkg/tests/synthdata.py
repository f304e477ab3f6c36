"""Synthetic movie/book worlds for end-to-end tests.

The generator plants a known node -> book-sentence alignment that is
piecewise linear in time, far from the uniform diagonal, and has one
backward crossing (a flashback at the end). A configurable fraction of
nodes carry near-duplicate dialog of their book sentence; some of those
duplicates also appear verbatim at far-away decoy positions so that only
context can disambiguate them. The remaining nodes are vocabulary-
disjoint chatter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bookalign import corpus
from bookalign.corpus import Shot
from bookalign.numerics import derive_rng

NOUNS = [
    "captain", "garden", "river", "lantern", "engine", "harbor", "letter",
    "mirror", "orchard", "saddle", "tunnel", "violin", "window", "anchor",
    "bridge", "candle", "dagger", "meadow", "organ", "parcel", "quarry",
    "ribbon", "shutter", "tailor", "wagon", "cellar", "falcon", "goblet",
]
VERBS = [
    "carried", "dropped", "followed", "guarded", "hid", "lifted", "mended",
    "opened", "painted", "quieted", "raised", "sealed", "traded", "watched",
    "buried", "chased", "dragged", "emptied", "folded", "gathered",
]
ADJS = [
    "broken", "copper", "dusty", "eager", "faded", "gentle", "hollow",
    "iron", "jagged", "kind", "little", "mossy", "narrow", "old", "pale",
    "quiet", "rusty", "silver", "tall", "woven",
]
CHATTER = [
    "yeah", "okay", "whatever", "really", "maybe", "huh", "listen",
    "right", "sure", "fine", "nope", "honestly", "anyway", "look",
    "seriously", "wait", "hey", "come", "on", "now",
]


def _book_sentence_text(rng: np.random.Generator) -> str:
    a = ADJS[int(rng.integers(len(ADJS)))]
    n1 = NOUNS[int(rng.integers(len(NOUNS)))]
    v = VERBS[int(rng.integers(len(VERBS)))]
    a2 = ADJS[int(rng.integers(len(ADJS)))]
    n2 = NOUNS[int(rng.integers(len(NOUNS)))]
    return f"The {a} {n1} {v} the {a2} {n2}."


def _chatter_text(rng: np.random.Generator) -> str:
    k = int(rng.integers(3, 7))
    words = [CHATTER[int(rng.integers(len(CHATTER)))] for _ in range(k)]
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def _near_duplicate(text: str, rng: np.random.Generator) -> str:
    """Drop or swap one interior word of a sentence."""
    words = text.rstrip(".").split()
    if len(words) > 4 and rng.random() < 0.5:
        drop = 1 + int(rng.integers(1, len(words) - 1))
        words = words[:drop] + words[drop + 1 :]
    else:
        pos = 1 + int(rng.integers(1, len(words) - 1))
        words[pos] = ADJS[int(rng.integers(len(ADJS)))]
    return " ".join(words) + "."


def planted_book_fraction(t: float) -> float:
    """Time fraction -> book fraction: rising, one flashback at the end.

    The main story runs well above the uniform diagonal (so the uniform
    baseline recalls nothing) while staying within 1/3 of it (so the
    pruned CRF can reach every true state); the final 20% of the movie
    jumps back across previously covered book territory (the single
    crossing).
    """
    if t <= 0.8:
        return 0.28 + (0.93 - 0.28) * (t / 0.8)
    return 0.60 + (0.72 - 0.60) * ((t - 0.8) / 0.2)


@dataclass
class SynthWorld:
    book_text: str
    srt_text: str
    gt_text: str
    book: corpus.Book
    subtitle: corpus.SubtitleTrack
    shots: list[Shot]
    vs_pairs: list[tuple[np.ndarray, list[str]]]  # (clip feature, tokens)
    planted: dict[int, int]  # node -> book sentence id
    anchor_nodes: list[int]  # nodes with near-duplicate dialog
    decoy_nodes: list[int]  # anchors whose dialog also appears elsewhere
    st_documents: list[list[list[str]]] = field(default_factory=list)


def _format_srt_time(ms: int) -> str:
    s, msec = divmod(ms, 1000)
    m, s = divmod(s, 60)
    h, m = divmod(m, 60)
    return f"{h:02d}:{m:02d}:{s:02d},{msec:03d}"


def build_world(
    seed: int = 7,
    n_book: int = 500,
    n_para: int = 80,
    n_nodes: int = 120,
    anchor_fraction: float = 0.4,
    clip_dim: int = 16,
) -> SynthWorld:
    rng = derive_rng(seed, "synth-world")

    # --- book -------------------------------------------------------------
    sentences = [_book_sentence_text(rng) for _ in range(n_book)]

    # Anchor layout: clumps of consecutive dialog nodes separated by
    # chatter gaps longer than the 5-sentence recall window, so that the
    # middle of each gap can only be recalled by a method that
    # interpolates (the CRF), never by window luck.
    n_anchor = int(round(anchor_fraction * n_nodes))
    anchors: list[int] = []
    i = 0
    while len(anchors) < n_anchor and i < n_nodes:
        for k in range(8):
            if len(anchors) < n_anchor and i + k < n_nodes:
                anchors.append(i + k)
        i += 20
    anchor_nodes = sorted(anchors)

    # Planted alignment.
    planted: dict[int, int] = {}
    for node in range(n_nodes):
        t = node / (n_nodes - 1)
        planted[node] = int(round(planted_book_fraction(t) * (n_book - 1)))

    # Decoys: some anchor dialogs also appear verbatim at the planted
    # position mirrored across the uniform diagonal. Every local channel
    # then ties exactly (identical reference text, and the prior is
    # symmetric), so only the surrounding context can resolve the match.
    planted_spots = set(planted.values())
    decoy_nodes = []
    eligible = [n for n in anchor_nodes if 2 * round(n / (n_nodes - 1) * (n_book - 1)) - planted[n] > 2]
    for idx, node in enumerate(eligible):
        if idx % 3 != 0:
            continue
        diag = round(node / (n_nodes - 1) * (n_book - 1))
        pos = int(min(max(2 * diag - planted[node], 0), n_book - 1))
        near_planted = any(abs(pos - p) <= 3 for p in planted_spots)
        if abs(pos - planted[node]) > 40 and not near_planted:
            sentences[pos] = sentences[planted[node]]
            decoy_nodes.append(node)

    # --- subtitle ---------------------------------------------------------
    node_texts = []
    for node in range(n_nodes):
        if node in anchor_nodes:
            node_texts.append(_near_duplicate(sentences[planted[node]], rng))
        else:
            node_texts.append(_chatter_text(rng))

    cue_ms = 4000
    srt_lines = []
    for node, text in enumerate(node_texts):
        start = 1000 + node * cue_ms
        end = start + cue_ms - 500
        srt_lines += [
            str(node + 1),
            f"{_format_srt_time(start)} --> {_format_srt_time(end)}",
            text,
            "",
        ]
    srt_text = "\n".join(srt_lines)

    # --- book text layout: one sentence per line, indented paragraph
    # openers, a chapter heading every 20 paragraphs. -----------------------
    per_para = n_book // n_para
    lines: list[str] = []
    para_of_sentence: list[int] = []
    idx = 0
    for para in range(n_para):
        if para % 20 == 0:
            lines += ["", "", f"   Part {para // 20 + 1}"]
        count = per_para + (1 if para < n_book % n_para else 0)
        for k in range(count):
            prefix = "   " if k == 0 else ""
            lines.append(prefix + sentences[idx])
            para_of_sentence.append(para)
            idx += 1
        lines.append("")
    book_text = "\n".join(lines) + "\n"

    book = corpus.parse_book(book_text)
    subtitle = corpus.parse_srt(srt_text)
    assert len(subtitle.sentences) == n_nodes, "cue texts must stay one sentence each"

    # Headings insert extra sentences; re-locate the planted targets in
    # the parsed book by matching original sentence order.
    body_ids = [s.id for s in book.sentences if not s.text.startswith("Part ")]
    assert len(body_ids) == n_book
    planted_parsed = {node: body_ids[j] for node, j in planted.items()}

    # --- ground truth ------------------------------------------------------
    gt_rows = []
    for node in range(n_nodes):
        mid_s = (1000 + node * cue_ms + (cue_ms - 500) / 2.0) / 1000.0
        line = book.sentences[planted_parsed[node]].source_line
        tag = "dialogue" if node in anchor_nodes else "visual"
        gt_rows.append(f"{mid_s:.3f}\t\t{line}\t\t{tag}")
    gt_text = "\n".join(gt_rows) + "\n"

    # --- shots and clip features -------------------------------------------
    # One shot per 3 nodes; its feature encodes a coarse book-position
    # bucket (4 buckets) of the planted target, plus noise. The bucketing
    # is deliberately too coarse to separate a decoy from its true cell.
    shots: list[Shot] = []
    vs_pairs: list[tuple[np.ndarray, list[str]]] = []
    for s_idx in range(0, n_nodes, 3):
        node_mid = min(s_idx + 1, n_nodes - 1)
        start = 1000 + s_idx * cue_ms - 200
        end = start + 3 * cue_ms
        bucket = min(int(planted_parsed[node_mid] / len(book.sentences) * 4), 3)
        feature = 0.15 * rng.standard_normal(clip_dim)
        feature[bucket] += 1.0
        shots.append(Shot(id=s_idx // 3, start=max(start, 0), end=end, feature=feature))
        if node_mid in anchor_nodes:
            target_tokens = list(book.sentences[planted_parsed[node_mid]].tokens)
            vs_pairs.append((feature, target_tokens))

    # --- skip-thought training documents: the book's chapters --------------
    st_documents = []
    for chapter in book.chapters:
        doc = []
        for p in range(*chapter.paragraph_range):
            lo, hi = book.paragraphs[p].sentence_range
            doc.extend(list(s.tokens) for s in book.sentences[lo:hi])
        if doc:
            st_documents.append(doc)

    return SynthWorld(
        book_text=book_text,
        srt_text=srt_text,
        gt_text=gt_text,
        book=book,
        subtitle=subtitle,
        shots=shots,
        vs_pairs=vs_pairs,
        planted=planted_parsed,
        anchor_nodes=anchor_nodes,
        decoy_nodes=decoy_nodes,
        st_documents=st_documents,
    )


def build_decoy_book(seed: int, n_book: int = 300, n_para: int = 50) -> str:
    """A same-style book with no relation to the subtitle dialogs."""
    rng = derive_rng(seed, "decoy-book")
    lines: list[str] = []
    per_para = n_book // n_para
    idx = 0
    for para in range(n_para):
        if para % 20 == 0:
            lines += ["", "", f"   Part {para // 20 + 1}"]
        count = per_para + (1 if para < n_book % n_para else 0)
        for k in range(count):
            prefix = "   " if k == 0 else ""
            lines.append(prefix + _book_sentence_text(rng))
            idx += 1
        lines.append("")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# On-disk layout for CLI-level tests


def write_world_files(world: SynthWorld, root) -> dict[str, str]:
    """Write a world as the input files the CLI expects; returns paths."""
    from pathlib import Path

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "book.txt").write_text(world.book_text, encoding="utf-8")
    (root / "movie.srt").write_text(world.srt_text, encoding="utf-8")
    (root / "gt.tsv").write_text(world.gt_text, encoding="utf-8")

    features = root / "features"
    features.mkdir(exist_ok=True)
    shot_rows = []
    for shot in world.shots:
        fname = f"features/shot{shot.id:03d}.vec"
        corpus.write_feature_vector(root / fname, shot.feature)
        shot_rows.append(f"{shot.id}\t{shot.start}\t{shot.end}\t{fname}")
    (root / "shots.tsv").write_text("\n".join(shot_rows) + "\n", encoding="utf-8")

    pair_rows = []
    for idx, (feature, tokens) in enumerate(world.vs_pairs):
        fname = f"features/pair{idx:03d}.vec"
        corpus.write_feature_vector(root / fname, feature)
        pair_rows.append(f"{fname}\t{' '.join(tokens)}")
    (root / "pairs.tsv").write_text("\n".join(pair_rows) + "\n", encoding="utf-8")

    corpus_lines = []
    for doc in world.st_documents:
        corpus_lines.extend(" ".join(tokens) for tokens in doc)
        corpus_lines.append("")
    (root / "corpus.txt").write_text("\n".join(corpus_lines), encoding="utf-8")

    return {name: str(root / name) for name in (
        "book.txt", "movie.srt", "gt.tsv", "shots.tsv", "pairs.tsv", "corpus.txt")}


def write_config(
    root,
    out_dir,
    st_epochs=2,
    vs_epochs=5,
    cnn_epochs=5,
    cnn_kernels="3,5,3",
    cnn_widths="6,6,4",
) -> str:
    """A small INI config pointing at write_world_files output."""
    from pathlib import Path

    root = Path(root)
    text = f"""\
[paths]
book = book.txt
srt = movie.srt
shots = shots.tsv
ground_truth = gt.tsv
skipthought_corpus = corpus.txt
vsembed_pairs = pairs.tsv
output_dir = {out_dir}

[skipthought]
vocab_size = 400
embed_dim = 8
hidden_dim = 12
epochs = {st_epochs}
batch_size = 16
lr = 0.002
seed = 11

[vsembed]
vocab_size = 300
embed_dim = 8
hidden_dim = 12
epochs = {vs_epochs}
batch_size = 8
lr = 0.05
margin = 0.2
holdout_fraction = 0.0
seed = 12

[cnn]
kernels = {cnn_kernels}
widths = {cnn_widths}
dropout = 0.1
epochs = {cnn_epochs}
batch_size = 64
lr = 0.002
negative_ratio = 2.0
seed = 13

[crf]
wu = 1.0
wp = 3.0
wq = 0.3
sigma2 = 0.01
"""
    path = root / "config.ini"
    path.write_text(text, encoding="utf-8")
    return str(path)
