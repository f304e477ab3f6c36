"""Parsing of raw book text and SRT subtitles into structured units.

A book becomes chapters -> paragraphs -> sentences, with the 1-based
source line preserved for every sentence (ground-truth annotations refer
to line numbers). Subtitles become time-stamped sentences; a sentence
that spans several cues is merged and gets the union of the cue spans.

All functions here are pure and deterministic.
"""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"
SOMEONE_TOKEN = "<someone>"
SPECIAL_TOKENS = (UNK_TOKEN, EOS_TOKEN, SOMEONE_TOKEN)

# Sentence-final characters used by the chapter-heading heuristic. Curly
# quotes count the same as their ASCII forms.
_FINAL_PUNCT = set(".!?\"'”’")

# Tokens that end in a period without ending a sentence.
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "st", "vs", "etc", "prof", "jr", "sr",
    "e.g", "i.e", "rev", "gen", "col", "capt", "sgt", "lt",
}

_OPEN_QUOTES = "\"'“‘("
_CLOSE_QUOTES = "\"'”’)"

_PUNCT_CHARS = set("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~“”‘’…—–«»")

_CONTRACTION_SUFFIXES = ("'s", "'re", "'ve", "'ll", "'d", "'m")


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Sentence:
    """One sentence with its tokens and 1-based source line."""

    id: int
    text: str
    tokens: tuple[str, ...]
    source_line: int


@dataclass(frozen=True)
class Paragraph:
    id: int
    sentence_range: tuple[int, int]  # half-open [start, stop)


@dataclass(frozen=True)
class Chapter:
    id: int
    title_line: int | None
    paragraph_range: tuple[int, int]  # half-open [start, stop)


@dataclass
class Book:
    chapters: list[Chapter]
    paragraphs: list[Paragraph]
    sentences: list[Sentence]

    def paragraph_of(self, sentence_id: int) -> int:
        """Paragraph id containing a sentence id."""
        starts = [p.sentence_range[0] for p in self.paragraphs]
        idx = bisect.bisect_right(starts, sentence_id) - 1
        if idx < 0 or sentence_id >= self.paragraphs[idx].sentence_range[1]:
            raise DataError(f"sentence id {sentence_id} not in any paragraph")
        return idx

    def chapter_of(self, paragraph_id: int) -> int:
        starts = [c.paragraph_range[0] for c in self.chapters]
        idx = bisect.bisect_right(starts, paragraph_id) - 1
        if idx < 0 or paragraph_id >= self.chapters[idx].paragraph_range[1]:
            raise DataError(f"paragraph id {paragraph_id} not in any chapter")
        return idx

    def paragraph_index(self) -> np.ndarray:
        """Array mapping sentence id -> paragraph id."""
        out = np.zeros(len(self.sentences), dtype=np.int64)
        for p in self.paragraphs:
            out[p.sentence_range[0] : p.sentence_range[1]] = p.id
        return out


@dataclass(frozen=True)
class SubtitleEntry:
    start: int  # milliseconds
    end: int
    sentences: tuple[Sentence, ...]


@dataclass
class SubtitleTrack:
    entries: list[SubtitleEntry]
    sentences: list[Sentence]  # flat, global order
    spans: list[tuple[int, int]]  # (start_ms, end_ms) per flat sentence

    def midpoints_ms(self) -> np.ndarray:
        return np.array([(a + b) / 2.0 for a, b in self.spans], dtype=np.float64)


@dataclass(frozen=True)
class Shot:
    id: int
    start: int  # milliseconds
    end: int
    feature: np.ndarray | None = None


@dataclass
class Vocabulary:
    """Token ids with `<unk>`, `<eos>`, `<someone>` specials at 0, 1, 2."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    unk_id: int = 0
    eos_id: int = 1
    someone_id: int = 2

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def fingerprint(self) -> str:
        import hashlib

        payload = "\n".join(self.id_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[:3] != list(SPECIAL_TOKENS):
            raise DataError(f"vocabulary file {path} does not start with special tokens")
        return cls(token_to_id={t: i for i, t in enumerate(tokens)}, id_to_token=tokens)


# ---------------------------------------------------------------------------
# Sentence segmentation and tokenization


def _segment_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences; spans are stripped of outer whitespace."""
    spans: list[tuple[int, int]] = []
    n = len(text)
    start = 0
    i = 0
    while i < n:
        ch = text[i]
        if ch not in ".!?":
            i += 1
            continue
        # Consume the whole punctuation run (handles "..." and "?!").
        j = i
        while j < n and text[j] in ".!?":
            j += 1
        # Optional closing quotes directly after the punctuation.
        k = j
        while k < n and text[k] in _CLOSE_QUOTES:
            k += 1
        # A boundary needs whitespace and then a capital or an open quote.
        m = k
        while m < n and text[m].isspace():
            m += 1
        has_gap = m > k
        next_ok = m < n and (text[m].isupper() or text[m] in _OPEN_QUOTES or text[m].isdigit())
        if has_gap and next_ok and not _protected_abbreviation(text, i, j):
            spans.append(_strip_span(text, start, k))
            start = m
            i = m
        else:
            i = j
    if start < n:
        last = _strip_span(text, start, n)
        if last[0] < last[1]:
            spans.append(last)
    return [s for s in spans if s[0] < s[1]]


def _strip_span(text: str, a: int, b: int) -> tuple[int, int]:
    while a < b and text[a].isspace():
        a += 1
    while b > a and text[b - 1].isspace():
        b -= 1
    return a, b


def _protected_abbreviation(text: str, punct_start: int, punct_end: int) -> bool:
    """True when the token before a '.' run is on the abbreviation list."""
    if text[punct_start:punct_end] != ".":
        return False
    w = punct_start
    while w > 0 and not text[w - 1].isspace():
        w -= 1
    word = text[w:punct_start].lstrip("".join(_OPEN_QUOTES))
    return word.lower() in _ABBREVIATIONS


def segment_sentences(text: str) -> list[str]:
    """Rule-based sentence splitter; deterministic, never splits inside a token."""
    return [text[a:b] for a, b in _segment_spans(text)]


def _split_contraction(core: str) -> list[str]:
    if core.endswith("n't") and len(core) > 3:
        return [core[:-3], "n't"]
    for suffix in _CONTRACTION_SUFFIXES:
        if core.endswith(suffix) and len(core) > len(suffix):
            return [core[: -len(suffix)], suffix]
    return [core]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, peel leading/trailing punctuation."""
    out: list[str] = []
    for raw in text.lower().replace("’", "'").split():
        lead: list[str] = []
        trail: list[str] = []
        a, b = 0, len(raw)
        while a < b and raw[a] in _PUNCT_CHARS:
            lead.append(raw[a])
            a += 1
        while b > a and raw[b - 1] in _PUNCT_CHARS:
            trail.append(raw[b - 1])
            b -= 1
        core = raw[a:b]
        out.extend(lead)
        if core:
            out.extend(_split_contraction(core))
        out.extend(reversed(trail))
    return out


# ---------------------------------------------------------------------------
# Vocabulary and name replacement


def build_vocab(corpus, max_size: int) -> Vocabulary:
    """Keep the most frequent tokens; ties go to the lexicographically smaller.

    `corpus` is an iterable of Sentence objects or plain token sequences.
    `max_size` counts the three special tokens.
    """
    if max_size < 4:
        raise DataError("max_size must be at least 4 (specials + 1 token)")
    counts: Counter[str] = Counter()
    for item in corpus:
        tokens = item.tokens if isinstance(item, Sentence) else item
        counts.update(t for t in tokens if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    id_to_token = list(SPECIAL_TOKENS) + kept
    return Vocabulary(
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        id_to_token=id_to_token,
    )


def replace_names_with_someone(tokens, name_lexicon) -> list[str]:
    """Replace every lexicon name (case-insensitive) with the someone token."""
    lex = {name.lower() for name in name_lexicon}
    return [SOMEONE_TOKEN if t.lower() in lex else t for t in tokens]


def load_name_lexicon(path) -> set[str]:
    names = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.add(line)
    return names


# ---------------------------------------------------------------------------
# Book parsing


def _decode(raw) -> str:
    if isinstance(raw, bytes):
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"undecodable byte at offset {exc.start}") from exc
    return raw


def parse_book(raw) -> Book:
    """Parse plain book text into chapters, paragraphs and sentences.

    Paragraphs break at blank lines and at indented lines. A chapter
    starts at an indented line that follows a page break (a form feed or
    two or more consecutive blank lines) and does not end with
    sentence-final punctuation; the heading line becomes the chapter's
    first (single-sentence) paragraph so that no input line is dropped.
    """
    text = _decode(raw)
    lines = text.split("\n")

    # Group lines into raw paragraphs, tagging chapter starts.
    paragraphs_raw: list[list[tuple[int, str]]] = []
    chapter_marks: dict[int, int] = {}  # paragraph index -> title line
    current: list[tuple[int, str]] = []
    blank_run = 0
    saw_formfeed = False

    def close() -> None:
        nonlocal current
        if current:
            paragraphs_raw.append(current)
            current = []

    for line_no, line in enumerate(lines, 1):
        has_ff = "\f" in line
        stripped = line.replace("\f", " ").strip()
        if not stripped:
            close()
            blank_run += 1
            saw_formfeed = saw_formfeed or has_ff
            continue
        page_break = blank_run >= 2 or saw_formfeed or has_ff
        indented = line[0] in (" ", "\t") or line.replace("\f", "")[:1] in (" ", "\t")
        ends_final = stripped[-1] in _FINAL_PUNCT
        if indented and page_break and not ends_final:
            close()
            chapter_marks[len(paragraphs_raw)] = line_no
            current = [(line_no, stripped)]
        elif indented:
            close()
            current = [(line_no, stripped)]
        else:
            current.append((line_no, stripped))
        blank_run = 0
        saw_formfeed = False
    close()

    # Sentence-split each paragraph, mapping characters back to lines.
    sentences: list[Sentence] = []
    paragraphs: list[Paragraph] = []
    final_index: dict[int, int] = {}  # raw paragraph index -> final id
    for raw_idx, para_lines in enumerate(paragraphs_raw):
        offsets: list[int] = []
        pieces: list[str] = []
        pos = 0
        for _, piece in para_lines:
            offsets.append(pos)
            pieces.append(piece)
            pos += len(piece) + 1  # the joining space
        joined = " ".join(pieces)
        first = len(sentences)
        for a, b in _segment_spans(joined):
            line_idx = bisect.bisect_right(offsets, a) - 1
            sentence_text = joined[a:b]
            sentences.append(
                Sentence(
                    id=len(sentences),
                    text=sentence_text,
                    tokens=tuple(tokenize(sentence_text)),
                    source_line=para_lines[line_idx][0],
                )
            )
        if len(sentences) > first:
            final_index[raw_idx] = len(paragraphs)
            paragraphs.append(Paragraph(id=len(paragraphs), sentence_range=(first, len(sentences))))

    # Chapters from the marked paragraph indices.
    chapters: list[Chapter] = []
    if paragraphs:
        marks = sorted(
            (final_index[k], line) for k, line in chapter_marks.items() if k in final_index
        )
        bounds: list[tuple[int, int | None]] = []
        if not marks or marks[0][0] > 0:
            bounds.append((0, None))
        bounds.extend(marks)
        for i, (start_para, title_line) in enumerate(bounds):
            stop_para = bounds[i + 1][0] if i + 1 < len(bounds) else len(paragraphs)
            chapters.append(
                Chapter(id=i, title_line=title_line, paragraph_range=(start_para, stop_para))
            )
    return Book(chapters=chapters, paragraphs=paragraphs, sentences=sentences)


# ---------------------------------------------------------------------------
# SRT parsing


def _parse_timestamp(token: str, cue_index: int) -> int:
    token = token.strip()
    try:
        hms, msec = token.replace(".", ",").split(",")
        h, m, s = hms.split(":")
        value = ((int(h) * 60 + int(m)) * 60 + int(s)) * 1000 + int(msec)
    except ValueError as exc:
        raise ParseError(f"cue {cue_index}: malformed timestamp {token!r}") from exc
    return value


def parse_srt(raw) -> SubtitleTrack:
    """Parse SRT text into time-stamped sentences.

    Cue texts are concatenated in start-time order and sentence-segmented
    as one stream, so a sentence that runs across cues is merged and
    spans the union of its cues.
    """
    text = _decode(raw)
    lines = text.split("\n")
    cues: list[tuple[int, int, str, int]] = []  # start, end, text, first line no
    i = 0
    cue_index = 0
    n = len(lines)
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        cue_index += 1
        # Optional numeric index line.
        if lines[i].strip().isdigit():
            i += 1
        if i >= n or "-->" not in lines[i]:
            raise ParseError(f"cue {cue_index}: missing timestamp line")
        left, _, right = lines[i].partition("-->")
        start = _parse_timestamp(left, cue_index)
        end = _parse_timestamp(right, cue_index)
        if start >= end:
            raise ParseError(f"cue {cue_index}: start {start} >= end {end}")
        i += 1
        text_lines: list[str] = []
        first_text_line = i + 1
        while i < n and lines[i].strip():
            text_lines.append(lines[i].strip())
            i += 1
        cue_text = " ".join(text_lines).strip()
        if cue_text:
            cues.append((start, end, cue_text, first_text_line))

    cues.sort(key=lambda c: c[0])

    # One concatenated stream with per-character cue provenance.
    offsets: list[int] = []
    pos = 0
    for _, _, cue_text, _ in cues:
        offsets.append(pos)
        pos += len(cue_text) + 1
    stream = " ".join(c[2] for c in cues)

    sentences: list[Sentence] = []
    spans: list[tuple[int, int]] = []
    for a, b in _segment_spans(stream):
        first_cue = bisect.bisect_right(offsets, a) - 1
        last_cue = bisect.bisect_right(offsets, b - 1) - 1
        start = min(cues[k][0] for k in range(first_cue, last_cue + 1))
        end = max(cues[k][1] for k in range(first_cue, last_cue + 1))
        sentence_text = stream[a:b]
        sentences.append(
            Sentence(
                id=len(sentences),
                text=sentence_text,
                tokens=tuple(tokenize(sentence_text)),
                source_line=cues[first_cue][3],
            )
        )
        spans.append((start, end))

    entries: list[SubtitleEntry] = []
    group: list[Sentence] = []
    for sent, span in zip(sentences, spans):
        if group and spans[group[0].id] == span:
            group.append(sent)
        else:
            if group:
                gspan = spans[group[0].id]
                entries.append(SubtitleEntry(start=gspan[0], end=gspan[1], sentences=tuple(group)))
            group = [sent]
    if group:
        gspan = spans[group[0].id]
        entries.append(SubtitleEntry(start=gspan[0], end=gspan[1], sentences=tuple(group)))

    return SubtitleTrack(entries=entries, sentences=sentences, spans=spans)


# ---------------------------------------------------------------------------
# Shot lists and feature vectors


def read_feature_vector(path) -> np.ndarray:
    """Little-endian f32 vector file: u32 length then the values."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError(f"feature file too short: {path}")
    (count,) = np.frombuffer(data[:4], dtype="<u4")
    expected = 4 + 4 * int(count)
    if len(data) != expected:
        raise ParseError(f"feature file {path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data[4:], dtype="<f4").astype(np.float64)


def write_feature_vector(path, vec) -> None:
    vec = np.asarray(vec, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(np.array([vec.size], dtype="<u4").tobytes())
        fh.write(vec.tobytes())


def load_shots(tsv_path) -> list[Shot]:
    """Shot list TSV: shot_id, start_ms, end_ms, feature_file (may be empty).

    Feature paths are resolved relative to the TSV's directory. Shots must
    be sorted and non-overlapping.
    """
    base = Path(tsv_path).parent
    shots: list[Shot] = []
    for ln, line in enumerate(Path(tsv_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ParseError(f"{tsv_path}:{ln}: expected at least 3 columns")
        try:
            shot_id, start, end = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ParseError(f"{tsv_path}:{ln}: bad integer field") from exc
        if start >= end:
            raise DataError(f"{tsv_path}:{ln}: shot start {start} >= end {end}")
        feature = None
        if len(parts) > 3 and parts[3].strip():
            feature = read_feature_vector(base / parts[3].strip())
        shots.append(Shot(id=shot_id, start=start, end=end, feature=feature))
    shots.sort(key=lambda s: s.start)
    for a, b in zip(shots, shots[1:]):
        if b.start < a.end:
            raise DataError(f"shots {a.id} and {b.id} overlap")
    return shots
