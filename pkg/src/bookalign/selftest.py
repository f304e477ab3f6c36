"""Built-in oracle suite for `bookalign selftest`.

Each check pits a pipeline component against an independent
re-implementation: dynamic-programming inference against exhaustive path
enumeration, BLEU against a naive scan-counting scorer, and every
analytic backward pass against central finite differences.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import crfalign, ctxcnn, simtensor, skipthought, vsembed
from .numerics import derive_rng, grad_check


def _naive_bleu(candidate, reference, n: int) -> float:
    """Brute-force BLEU: counts n-grams by scanning, no Counter."""
    c = len(candidate)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        cand_grams = [tuple(candidate[i : i + k]) for i in range(c - k + 1)]
        ref_grams = [tuple(reference[i : i + k]) for i in range(len(reference) - k + 1)]
        clipped = 0
        seen = []
        for gram in cand_grams:
            if gram in seen:
                continue
            seen.append(gram)
            clipped += min(cand_grams.count(gram), ref_grams.count(gram))
        total = len(cand_grams)
        if k == 1:
            p = clipped / total
        else:
            p = (clipped + 1.0) / (total + 1.0)
        if p == 0.0:
            return 0.0
        log_sum += math.log(p) / n
    bp = 1.0 if c >= len(reference) else math.exp(1.0 - len(reference) / c)
    return bp * math.exp(log_sum)


def _naive_chain_minimum(unary, positions, weights) -> float:
    """Exhaustive minimum energy, potentials written out longhand."""
    k_nodes, n_states = unary.shape
    best = math.inf
    for path in itertools.product(range(n_states), repeat=k_nodes):
        total = 0.0
        for k in range(k_nodes):
            total += weights.wu * unary[k, path[k]]
        for k in range(k_nodes - 1):
            d_s = positions[k + 1] - positions[k]
            d_b = abs(path[k + 1] - path[k]) / (n_states - 1) if n_states > 1 else 0.0
            gap = (d_s - d_b) ** 2
            total += weights.wp * gap / (gap + weights.sigma2)
            total += weights.wq * d_b * d_b / (d_b * d_b + weights.sigma2)
        best = min(best, total)
    return best


def check_dp(trials: int = 25, seed: int = 2024) -> tuple[bool, str]:
    rng = derive_rng(seed, "selftest-dp")
    for _ in range(trials):
        k = int(rng.integers(1, 6))
        s = int(rng.integers(1, 7))
        unary = -np.log(rng.uniform(0.05, 0.95, size=(k, s)))
        positions = np.sort(rng.uniform(0, 1, size=k))
        weights = crfalign.CrfWeights(
            wu=float(rng.uniform(0.1, 2.0)),
            wp=float(rng.uniform(0.0, 2.0)),
            wq=float(rng.uniform(0.0, 2.0)),
            sigma2=float(rng.uniform(0.005, 0.1)),
        )
        crf = crfalign.ChainCrf(unary=unary, positions=positions)
        got = crfalign.infer(crf, weights, prune_fraction=1.0).energy
        want = _naive_chain_minimum(unary, positions, weights)
        if abs(got - want) > 1e-9:
            return False, f"dp energy {got} != enumeration {want}"
    return True, f"{trials} random chains match exhaustive enumeration"


def check_bleu(trials: int = 40, seed: int = 2024) -> tuple[bool, str]:
    rng = derive_rng(seed, "selftest-bleu")
    vocab = ["the", "cat", "sat", "on", "mat", "dog", "ran"]
    for _ in range(trials):
        cand = [vocab[int(i)] for i in rng.integers(0, len(vocab), size=int(rng.integers(1, 9)))]
        ref = [vocab[int(i)] for i in rng.integers(0, len(vocab), size=int(rng.integers(1, 9)))]
        for n in range(1, 6):
            got = simtensor.bleu_n(cand, ref, n)
            want = _naive_bleu(cand, ref, n)
            if abs(got - want) > 1e-12:
                return False, f"bleu_{n}({cand}, {ref}) {got} != {want}"
    worked = simtensor.bleu_n(["the", "the", "the"], ["the", "cat"], 1)
    if abs(worked - 1.0 / 3.0) > 1e-15:
        return False, f"worked example gives {worked}, expected 1/3"
    return True, f"{trials} pairs x 5 orders match the naive counter"


def check_gradients(seed: int = 2024) -> tuple[bool, str]:
    rng = derive_rng(seed, "selftest-grad")
    # Sentence encoder-decoder loss.
    st_cfg = skipthought.SkipThoughtConfig(vocab_size=6, embed_dim=2, hidden_dim=3, seed=17)
    st = skipthought.SkipThoughtModel(st_cfg)
    triple = skipthought.SentenceTriple(prev=(2, 3, 1), current=(4, 5), next=(3, 1))
    st.params.zero_grads()
    st.triple_loss(triple)
    rep = grad_check(lambda p: st.triple_loss(triple, grad_scale=0.0), st.params)
    if not rep.ok:
        return False, f"sentence-model gradient error {rep.max_rel_error:.2e}"
    # Clip-sentence ranking loss.
    vs_cfg = vsembed.VsEmbedConfig(vocab_size=7, clip_dim=4, embed_dim=2, hidden_dim=3, seed=5)
    vs = vsembed.VsEmbedModel(vs_cfg)
    batch = [
        (rng.normal(size=4), (2, 3)),
        (rng.normal(size=4), (4, 1, 5)),
        (rng.normal(size=4), (6,)),
    ]
    vs.params.zero_grads()
    vsembed.batch_loss(vs, batch, alpha=0.2)
    rep = grad_check(lambda p: vsembed.batch_loss(vs, batch, alpha=0.2, grad_scale=0.0), vs.params)
    if not rep.ok:
        return False, f"ranking-loss gradient error {rep.max_rel_error:.2e}"
    # Convolutional combiner cross-entropy.
    tensor = rng.random((5, 5, 9))
    cnn_cfg = ctxcnn.CnnConfig(kernels=(3, 3), widths=(2, 2), dropout=0.0, seed=9)
    cnn = ctxcnn.ContextCnn(cnn_cfg)
    labels = ctxcnn.TrainingLabels(positives=[(1, 1), (3, 4)], negatives=[(0, 3), (4, 0)])
    cnn.params.zero_grads()
    ctxcnn.bce_loss(cnn, tensor, labels)
    rep = grad_check(lambda p: ctxcnn.bce_loss(cnn, tensor, labels, grad_scale=0.0), cnn.params)
    if not rep.ok:
        return False, f"cnn gradient error {rep.max_rel_error:.2e}"
    return True, "all three backward passes match finite differences"


def run_selftest(emit=print) -> bool:
    checks = [
        ("dp-vs-enumeration", check_dp),
        ("bleu-vs-naive", check_bleu),
        ("gradient-checks", check_gradients),
    ]
    all_ok = True
    for name, fn in checks:
        ok, detail = fn()
        emit(f"selftest {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        all_ok = all_ok and ok
    return all_ok
