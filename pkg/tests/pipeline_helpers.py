"""Library-level pipeline driver shared by the end-to-end tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bookalign import corpus, crfalign, ctxcnn, evalharness, simtensor
from bookalign import skipthought as st
from bookalign import vsembed as vs


@dataclass
class TrainedModels:
    st_model: st.SkipThoughtModel
    st_vocab: corpus.Vocabulary
    vs_model: vs.VsEmbedModel
    vs_vocab: corpus.Vocabulary


def train_models(world, st_epochs=30, vs_epochs=150, seed=11) -> TrainedModels:
    flat = [tokens for doc in world.st_documents for tokens in doc]
    st_vocab = corpus.build_vocab(flat, 400)
    documents = [[st_vocab.encode(t) for t in doc] for doc in world.st_documents]
    triples = st.make_triples(documents, eos_id=st_vocab.eos_id)
    st_cfg = st.SkipThoughtConfig(
        vocab_size=len(st_vocab),
        embed_dim=16,
        hidden_dim=32,
        eos_id=st_vocab.eos_id,
        epochs=st_epochs,
        batch_size=32,
        lr=2e-3,
        seed=seed,
    )
    st_result = st.train(triples, st_cfg)

    vs_vocab = corpus.build_vocab([t for _, t in world.vs_pairs], 300)
    pairs = [(q, vs_vocab.encode(t)) for q, t in world.vs_pairs]
    vs_cfg = vs.VsEmbedConfig(
        vocab_size=len(vs_vocab),
        clip_dim=world.shots[0].feature.size,
        embed_dim=12,
        hidden_dim=24,
        margin=0.2,
        epochs=vs_epochs,
        batch_size=8,
        lr=0.05,
        seed=seed + 1,
        holdout_fraction=0.0,
    )
    vs_result = vs.train(pairs, vs_cfg)
    return TrainedModels(st_result.model, st_vocab, vs_result.model, vs_vocab)


def assemble_tensor(world, models: TrainedModels, book=None) -> simtensor.SimilarityTensor:
    book = book if book is not None else world.book
    sub_tokens = [list(s.tokens) for s in world.subtitle.sentences]
    book_tokens = [list(s.tokens) for s in book.sentences]
    return simtensor.assemble(
        sub_tokens=sub_tokens,
        book_tokens=book_tokens,
        sub_ids_st=[models.st_vocab.encode(t) for t in sub_tokens],
        book_ids_st=[models.st_vocab.encode(t) for t in book_tokens],
        st_model=models.st_model,
        sub_spans=world.subtitle.spans,
        shots=world.shots,
        book_ids_vs=[models.vs_vocab.encode(t) for t in book_tokens],
        vs_model=models.vs_model,
    )


def cnn_labels(world, train_nodes) -> ctxcnn.TrainingLabels:
    extents = (len(world.subtitle.sentences), len(world.book.sentences))
    raw_positives = [(node, world.planted[node]) for node in train_nodes]
    positives = ctxcnn.expand_positives(raw_positives, extents)
    negatives = ctxcnn.negative_sampling(positives, extents, ratio=3.0, seed=99)
    return ctxcnn.TrainingLabels(positives=positives, negatives=negatives)


def train_cnn(world, tensor, depth3=True, epochs=60, seed=5) -> ctxcnn.ContextCnn:
    train_nodes = [n for n in range(len(world.subtitle.sentences)) if n % 2 == 0]
    labels = cnn_labels(world, train_nodes)
    if depth3:
        config = ctxcnn.CnnConfig(kernels=(5, 7, 5), widths=(12, 12, 8), dropout=0.1, seed=seed)
    else:
        config = ctxcnn.CnnConfig(kernels=(5,), widths=(12,), dropout=0.1, seed=seed)
    train_config = ctxcnn.CnnTrainConfig(epochs=epochs, lr=2e-3, batch_size=64, seed=seed)
    return ctxcnn.train(tensor.data, labels, config, train_config).model


def infer_path(world, score_map, weights=None, prune=1.0 / 3.0) -> crfalign.AlignmentPath:
    weights = weights or crfalign.CrfWeights(wu=1.0, wp=3.0, wq=0.3, sigma2=0.01)
    crf = crfalign.build_chain(score_map, world.subtitle)
    return crfalign.infer(crf, weights, prune_fraction=prune)


def ground_truth(world):
    return evalharness.parse_ground_truth(world.gt_text, source="synthetic")


def recall_of(world, path) -> float:
    return evalharness.recall_at(ground_truth(world), path, world.book, world.subtitle)
