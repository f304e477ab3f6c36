"""Pipeline command-line interface.

Stages (each reads its input artifacts and writes its own outputs, so
deleting a downstream artifact never forces upstream retraining):

    train-skipthought -> skipthought.ckpt + skipthought.vocab
    train-vsembed     -> vsembed.ckpt + vsembed.vocab
    build-tensor      -> tensor.bin
    train-cnn         -> ctxcnn.ckpt
    align             -> score_map.bin + alignment.tsv + manifest.json
    eval              -> eval_report.{json,txt} + pr_curve.csv
    retrieve-book     -> retrieval.json
    cross-match       -> cross_matches.tsv
    selftest          (no artifacts; exit 0 iff all oracles pass)

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, corpus, crfalign, ctxcnn, evalharness, selftest, simtensor
from . import skipthought as st
from . import vsembed as vs
from .config import PipelineConfig
from .errors import BookAlignError, DataError, NumericError, ParseError
from .numerics import file_sha256, load_checkpoint, save_checkpoint

logger = logging.getLogger("bookalign")

ARTIFACTS = {
    "skipthought_ckpt": "skipthought.ckpt",
    "skipthought_vocab": "skipthought.vocab",
    "vsembed_ckpt": "vsembed.ckpt",
    "vsembed_vocab": "vsembed.vocab",
    "tensor": "tensor.bin",
    "cnn_ckpt": "ctxcnn.ckpt",
    "score_map": "score_map.bin",
    "alignment": "alignment.tsv",
    "manifest": "manifest.json",
}


def _artifact(cfg: PipelineConfig, name: str, producer: str, must_exist: bool = True) -> Path:
    path = cfg.output_dir() / ARTIFACTS[name]
    if must_exist and not path.exists():
        raise DataError(f"missing artifact {path}: run `bookalign {producer}` first")
    return path


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _read_input(cfg: PipelineConfig, key: str) -> bytes:
    path = cfg.path(key)
    if not path.exists():
        raise DataError(f"input file for [paths] {key} not found: {path}")
    return path.read_bytes()


def _load_book(cfg: PipelineConfig) -> corpus.Book:
    return corpus.parse_book(_read_input(cfg, "book"))


def _load_subtitle(cfg: PipelineConfig) -> corpus.SubtitleTrack:
    return corpus.parse_srt(_read_input(cfg, "srt"))


def _maybe_someone(cfg: PipelineConfig, tokens):
    lex_path = cfg.path("name_lexicon", required=False)
    if lex_path is None:
        return tokens
    lexicon = corpus.load_name_lexicon(lex_path)
    return corpus.replace_names_with_someone(tokens, lexicon)


# ---------------------------------------------------------------------------
# Stages


def cmd_train_skipthought(cfg: PipelineConfig) -> None:
    corpus_path = cfg.path("skipthought_corpus", required=False)
    documents_tokens: list[list[list[str]]] = []
    if corpus_path is not None:
        if not corpus_path.exists():
            raise DataError(f"skipthought corpus not found: {corpus_path}")
        doc: list[list[str]] = []
        for line in corpus_path.read_text(encoding="utf-8").split("\n"):
            if line.strip():
                doc.append(corpus.tokenize(line))
            elif doc:
                documents_tokens.append(doc)
                doc = []
        if doc:
            documents_tokens.append(doc)
    else:
        book = _load_book(cfg)
        for chapter in book.chapters:
            doc = []
            for p in range(*chapter.paragraph_range):
                lo, hi = book.paragraphs[p].sentence_range
                doc.extend(list(s.tokens) for s in book.sentences[lo:hi])
            if doc:
                documents_tokens.append(doc)
    flat = [tokens for doc in documents_tokens for tokens in doc]
    vocab = corpus.build_vocab(flat, cfg.get_int("skipthought", "vocab_size"))
    documents = [[vocab.encode(tokens) for tokens in doc] for doc in documents_tokens]
    triples = st.make_triples(documents, eos_id=vocab.eos_id)
    config = st.SkipThoughtConfig(
        vocab_size=len(vocab),
        embed_dim=cfg.get_int("skipthought", "embed_dim"),
        hidden_dim=cfg.get_int("skipthought", "hidden_dim"),
        eos_id=vocab.eos_id,
        epochs=cfg.get_int("skipthought", "epochs"),
        batch_size=cfg.get_int("skipthought", "batch_size"),
        lr=cfg.get_float("skipthought", "lr"),
        seed=cfg.get_int("skipthought", "seed"),
    )
    result = st.train(triples, config)
    logger.info("skipthought loss curve: %s", [round(x, 4) for x in result.loss_curve])
    vocab.save(_artifact(cfg, "skipthought_vocab", "", must_exist=False))
    save_checkpoint(
        _artifact(cfg, "skipthought_ckpt", "", must_exist=False),
        st.MODEL_KIND,
        result.model.params,
        vocab.fingerprint(),
    )


def cmd_train_vsembed(cfg: PipelineConfig) -> None:
    pairs_path = cfg.path("vsembed_pairs")
    if not pairs_path.exists():
        raise DataError(f"vsembed pairs file not found: {pairs_path}")
    base = pairs_path.parent
    raw_pairs: list[tuple[np.ndarray, list[str]]] = []
    for ln, line in enumerate(pairs_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"{pairs_path}:{ln}: expected feature_file<TAB>sentence")
        feature = corpus.read_feature_vector(base / parts[0].strip())
        tokens = _maybe_someone(cfg, corpus.tokenize(parts[1]))
        if not tokens:
            raise DataError(f"{pairs_path}:{ln}: empty sentence")
        raw_pairs.append((feature, tokens))
    if not raw_pairs:
        raise DataError(f"vsembed pairs file {pairs_path} has no rows")
    dims = {p[0].size for p in raw_pairs}
    if len(dims) != 1:
        raise DataError(f"clip features disagree on dimension: {sorted(dims)}")
    vocab = corpus.build_vocab([t for _, t in raw_pairs], cfg.get_int("vsembed", "vocab_size"))
    pairs = [(q, vocab.encode(tokens)) for q, tokens in raw_pairs]
    config = vs.VsEmbedConfig(
        vocab_size=len(vocab),
        clip_dim=dims.pop(),
        embed_dim=cfg.get_int("vsembed", "embed_dim"),
        hidden_dim=cfg.get_int("vsembed", "hidden_dim"),
        margin=cfg.get_float("vsembed", "margin"),
        epochs=cfg.get_int("vsembed", "epochs"),
        batch_size=cfg.get_int("vsembed", "batch_size"),
        lr=cfg.get_float("vsembed", "lr"),
        seed=cfg.get_int("vsembed", "seed"),
        holdout_fraction=cfg.get_float("vsembed", "holdout_fraction"),
    )
    result = vs.train(pairs, config)
    logger.info(
        "vsembed loss curve: %s; holdout median rank %s",
        [round(x, 4) for x in result.loss_curve],
        result.holdout_median_rank,
    )
    vocab.save(_artifact(cfg, "vsembed_vocab", "", must_exist=False))
    save_checkpoint(
        _artifact(cfg, "vsembed_ckpt", "", must_exist=False),
        vs.MODEL_KIND,
        result.model.params,
        vocab.fingerprint(),
    )


def _load_models(cfg: PipelineConfig):
    st_ckpt = load_checkpoint(_artifact(cfg, "skipthought_ckpt", "train-skipthought"))
    if st_ckpt.kind != st.MODEL_KIND:
        raise DataError(f"expected a {st.MODEL_KIND} checkpoint")
    st_vocab = corpus.Vocabulary.load(_artifact(cfg, "skipthought_vocab", "train-skipthought"))
    if st_vocab.fingerprint() != st_ckpt.vocab_hash:
        raise DataError("skipthought vocabulary does not match its checkpoint")
    vs_ckpt = load_checkpoint(_artifact(cfg, "vsembed_ckpt", "train-vsembed"))
    if vs_ckpt.kind != vs.MODEL_KIND:
        raise DataError(f"expected a {vs.MODEL_KIND} checkpoint")
    vs_vocab = corpus.Vocabulary.load(_artifact(cfg, "vsembed_vocab", "train-vsembed"))
    if vs_vocab.fingerprint() != vs_ckpt.vocab_hash:
        raise DataError("vsembed vocabulary does not match its checkpoint")
    return st.load_model(st_ckpt), st_vocab, vs.load_model(vs_ckpt), vs_vocab


def _assemble_tensor(cfg: PipelineConfig, book: corpus.Book, subtitle: corpus.SubtitleTrack):
    st_model, st_vocab, vs_model, vs_vocab = _load_models(cfg)
    shots_path = cfg.path("shots", required=False)
    shots = corpus.load_shots(shots_path) if shots_path is not None else []
    sub_tokens = [list(s.tokens) for s in subtitle.sentences]
    book_tokens = [list(s.tokens) for s in book.sentences]
    return simtensor.assemble(
        sub_tokens=sub_tokens,
        book_tokens=book_tokens,
        sub_ids_st=[st_vocab.encode(t) for t in sub_tokens],
        book_ids_st=[st_vocab.encode(t) for t in book_tokens],
        st_model=st_model,
        sub_spans=subtitle.spans,
        shots=shots,
        book_ids_vs=[vs_vocab.encode(_maybe_someone(cfg, t)) for t in book_tokens],
        vs_model=vs_model,
    )


def cmd_build_tensor(cfg: PipelineConfig) -> None:
    book = _load_book(cfg)
    subtitle = _load_subtitle(cfg)
    tensor = _assemble_tensor(cfg, book, subtitle)
    simtensor.save_tensor(_artifact(cfg, "tensor", "", must_exist=False), tensor)
    logger.info("tensor extents: %s", tensor.data.shape)


def _gt_cells(cfg: PipelineConfig, book: corpus.Book, subtitle: corpus.SubtitleTrack):
    gt = evalharness.load_ground_truth(cfg.path("ground_truth"))
    cells = []
    for entry in gt:
        i = evalharness.nearest_subtitle_sentence(subtitle, entry.time_s * 1000.0)
        j = evalharness.sentence_at_line(book, entry.line_start)
        cells.append((i, j))
    return cells


def cmd_train_cnn(cfg: PipelineConfig) -> None:
    tensor = simtensor.load_tensor(_artifact(cfg, "tensor", "build-tensor"))
    book = _load_book(cfg)
    subtitle = _load_subtitle(cfg)
    extents = tensor.data.shape[:2]
    positives = ctxcnn.expand_positives(_gt_cells(cfg, book, subtitle), extents)
    negatives = ctxcnn.negative_sampling(
        positives,
        extents,
        ratio=cfg.get_float("cnn", "negative_ratio"),
        seed=cfg.get_int("cnn", "seed"),
        guard_i=cfg.get_int("cnn", "guard_i"),
        guard_j=cfg.get_int("cnn", "guard_j"),
    )
    labels = ctxcnn.TrainingLabels(positives=positives, negatives=negatives)
    config = ctxcnn.CnnConfig(
        in_channels=tensor.data.shape[2],
        kernels=cfg.get_ints("cnn", "kernels"),
        widths=cfg.get_ints("cnn", "widths"),
        dropout=cfg.get_float("cnn", "dropout"),
        seed=cfg.get_int("cnn", "seed"),
    )
    train_config = ctxcnn.CnnTrainConfig(
        epochs=cfg.get_int("cnn", "epochs"),
        lr=cfg.get_float("cnn", "lr"),
        batch_size=cfg.get_int("cnn", "batch_size"),
        seed=cfg.get_int("cnn", "seed"),
    )
    result = ctxcnn.train(tensor.data, labels, config, train_config)
    logger.info("cnn final loss: %.6f", result.loss_curve[-1])
    save_checkpoint(
        _artifact(cfg, "cnn_ckpt", "", must_exist=False),
        ctxcnn.MODEL_KIND,
        result.model.params,
    )


def _crf_weights(cfg: PipelineConfig) -> crfalign.CrfWeights:
    return crfalign.CrfWeights(
        wu=cfg.get_float("crf", "wu"),
        wp=cfg.get_float("crf", "wp"),
        wq=cfg.get_float("crf", "wq"),
        sigma2=cfg.get_float("crf", "sigma2"),
    )


def cmd_align(cfg: PipelineConfig) -> None:
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    tensor = simtensor.load_tensor(_artifact(cfg, "tensor", "build-tensor"))
    cnn_ckpt_path = _artifact(cfg, "cnn_ckpt", "train-cnn")
    cnn = ctxcnn.load_model(load_checkpoint(cnn_ckpt_path))
    book = _load_book(cfg)
    subtitle = _load_subtitle(cfg)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    score_map = cnn.forward(tensor.data)
    simtensor.save_score_map(_artifact(cfg, "score_map", "", must_exist=False), score_map)
    timings["cnn_forward"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    crf = crfalign.build_chain(score_map, subtitle)
    prune = cfg.get_float("crf", "prune_fraction")
    if cfg.get_bool("crf", "fit"):
        para_of = book.paragraph_index()
        observed = {}
        for i, j in _gt_cells(cfg, book, subtitle):
            observed[i] = j
        grid = crfalign.WeightGrid(
            wu=cfg.get_floats("crf", "fit_wu"),
            wp=cfg.get_floats("crf", "fit_wp"),
            wq=cfg.get_floats("crf", "fit_wq"),
            sigma2=cfg.get_floats("crf", "fit_sigma2"),
        )
        instance = crfalign.FitInstance(crf=crf, observed=observed, paragraph_of=para_of)
        weights = crfalign.fit_weights(
            [instance],
            grid,
            para_slack=cfg.get_int("eval", "para_slack"),
            sent_slack=cfg.get_int("eval", "sent_slack"),
            prune_fraction=prune,
        )
        logger.info("fitted weights: %s", weights)
    else:
        weights = _crf_weights(cfg)
    alignment = crfalign.infer(crf, weights, prune_fraction=prune)
    timings["crf_infer"] = time.perf_counter() - t0

    out_tsv = _artifact(cfg, "alignment", "", must_exist=False)
    crfalign.write_alignment_tsv(out_tsv, alignment, crf, book)
    manifest = {
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
        "weights": {
            "wu": weights.wu,
            "wp": weights.wp,
            "wq": weights.wq,
            "sigma2": weights.sigma2,
        },
        "prune_fraction": prune,
        "energy": alignment.energy,
        "checkpoint_hashes": {
            "skipthought": file_sha256(_artifact(cfg, "skipthought_ckpt", "train-skipthought")),
            "vsembed": file_sha256(_artifact(cfg, "vsembed_ckpt", "train-vsembed")),
            "ctxcnn": file_sha256(cnn_ckpt_path),
        },
        "artifacts": {
            "alignment": str(out_tsv),
            "score_map": str(_artifact(cfg, "score_map", "align")),
            "tensor": str(_artifact(cfg, "tensor", "build-tensor")),
        },
        "timings_s": {k: round(v, 6) for k, v in timings.items()},
    }
    _write_text_atomic(
        _artifact(cfg, "manifest", "", must_exist=False),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )
    logger.info("alignment energy: %.6f", alignment.energy)


def cmd_eval(cfg: PipelineConfig) -> None:
    gt_path = cfg.path("ground_truth")
    if not gt_path.exists():
        raise DataError(f"ground-truth file not found: {gt_path}")
    gt = evalharness.load_ground_truth(gt_path)
    book = _load_book(cfg)
    subtitle = _load_subtitle(cfg)
    pred, _, _ = crfalign.read_alignment_tsv(_artifact(cfg, "alignment", "align"))
    report = evalharness.evaluate(
        gt,
        pred,
        book,
        subtitle,
        para_slack=cfg.get_int("eval", "para_slack"),
        sent_slack=cfg.get_int("eval", "sent_slack"),
        t_max=cfg.get_int("eval", "t_max"),
    )
    out = cfg.output_dir()
    _write_text_atomic(out / "eval_report.json", report.to_json() + "\n")
    _write_text_atomic(out / "eval_report.txt", report.to_table() + "\n")
    _write_text_atomic(out / "pr_curve.csv", report.curve_csv())
    print(report.to_table())


def cmd_retrieve_book(cfg: PipelineConfig) -> None:
    listing = cfg.path("candidate_books")
    if not listing.exists():
        raise DataError(f"candidate book list not found: {listing}")
    base = listing.parent
    candidates: list[tuple[str, corpus.Book]] = []
    for ln, line in enumerate(listing.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        name, _, rel = line.partition("\t")
        if not rel:
            raise ParseError(f"{listing}:{ln}: expected name<TAB>path")
        path = base / rel.strip()
        if not path.exists():
            raise DataError(f"{listing}:{ln}: book not found: {path}")
        candidates.append((name.strip(), corpus.parse_book(path.read_bytes())))
    subtitle = _load_subtitle(cfg)
    cnn = ctxcnn.load_model(load_checkpoint(_artifact(cfg, "cnn_ckpt", "train-cnn")))
    weights = _crf_weights(cfg)
    prune = cfg.get_float("crf", "prune_fraction")

    def align_energy(book: corpus.Book) -> float:
        tensor = _assemble_tensor(cfg, book, subtitle)
        score_map = cnn.forward(tensor.data)
        crf = crfalign.build_chain(score_map, subtitle)
        return crfalign.infer(crf, weights, prune_fraction=prune).energy

    results = evalharness.book_retrieval(candidates, align_energy)
    payload = [
        {"name": r.name, "score": round(r.score, 4), "energy": r.energy} for r in results
    ]
    _write_text_atomic(
        cfg.output_dir() / "retrieval.json", json.dumps(payload, indent=2) + "\n"
    )
    for r in results:
        print(f"{r.score:8.2f}  {r.name}")


def cmd_cross_match(cfg: PipelineConfig) -> None:
    foreign_path = cfg.path("cross_book")
    if not foreign_path.exists():
        raise DataError(f"cross-match book not found: {foreign_path}")
    foreign = corpus.parse_book(foreign_path.read_bytes())
    subtitle = _load_subtitle(cfg)
    cnn = ctxcnn.load_model(load_checkpoint(_artifact(cfg, "cnn_ckpt", "train-cnn")))
    tensor = _assemble_tensor(cfg, foreign, subtitle)
    score_map = cnn.forward(tensor.data)
    matches = evalharness.cross_match(score_map, foreign, cfg.get_int("eval", "top_k"))
    lines = ["node_id\tbook_sentence_id\tparagraph_id\tscore"]
    lines += [f"{m.node}\t{m.book_sentence}\t{m.paragraph}\t{m.score:.6f}" for m in matches]
    _write_text_atomic(cfg.output_dir() / "cross_matches.tsv", "\n".join(lines) + "\n")
    for m in matches:
        print(f"node {m.node:4d} -> paragraph {m.paragraph:4d} (score {m.score:.4f})")


def cmd_selftest(_cfg) -> None:
    if not selftest.run_selftest():
        raise NumericError("selftest failed")


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


COMMANDS = {
    "train-skipthought": cmd_train_skipthought,
    "train-vsembed": cmd_train_vsembed,
    "build-tensor": cmd_build_tensor,
    "train-cnn": cmd_train_cnn,
    "align": cmd_align,
    "eval": cmd_eval,
    "retrieve-book": cmd_retrieve_book,
    "cross-match": cmd_cross_match,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = _Parser(prog="bookalign", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="pipeline config file (INI)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "selftest":
            cfg = None
        else:
            if not args.config:
                print("error: --config is required for this command", file=sys.stderr)
                return 1
            if not Path(args.config).exists():
                raise DataError(f"config file not found: {args.config}")
            cfg = PipelineConfig.load(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except (ParseError, DataError) as exc:
        logger.error("%s", exc)
        return 2
    except NumericError as exc:
        logger.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
