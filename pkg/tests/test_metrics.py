import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointctc.metrics import (AttentionMap, EvalReport, corpus_bleu, length_ratio, monotonicity,
                              search_error_rate)


def _loop_monotonicity(w):
    L = len(w)
    hits = 0
    for l in range(3, L + 1):  # 1-based rows
        cur = max(range(len(w[l - 1])), key=lambda t: (w[l - 1][t], -t))
        prev = max(range(len(w[l - 2])), key=lambda t: (w[l - 2][t], -t))
        hits += cur >= prev
    return hits / L if L >= 3 else 0.0


def test_identity_map():
    assert monotonicity(AttentionMap(np.eye(4))) == 0.5


def test_reversed_map():
    assert monotonicity(AttentionMap(np.eye(4)[::-1])) == 0.0


def test_normalised_variant():
    assert monotonicity(AttentionMap(np.eye(5)), normalized=True) == 1.0


def test_short_maps_score_zero():
    assert monotonicity(AttentionMap(np.eye(2))) == 0.0


def test_random_map_matches_loop():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(8), size=6)
    assert monotonicity(AttentionMap(w)) == _loop_monotonicity(w.tolist())


def test_ties_go_to_first_position():
    w = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.5, 0.0]])
    # row argmaxes are 0, 1, 0 with ties broken low
    assert monotonicity(w) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 12))
def test_monotone_argmax_scores_l_minus_two_over_l(L):
    w = np.eye(L + 2)[:L] * 0.9 + 0.1 / (L + 2)
    assert monotonicity(AttentionMap(w)) == pytest.approx((L - 2) / L, abs=0)


def test_bleu_identity():
    refs = [(1, 2, 3, 4, 5), (6, 7, 8, 9)]
    assert corpus_bleu(refs, refs) == 100.0


def test_bleu_brevity_penalty():
    assert corpus_bleu([(1, 2, 3, 4)], [(1, 2, 3, 4, 5)]) == pytest.approx(100 * math.exp(-0.25), abs=1e-9)


def test_bleu_smoothing_on_disjoint_vocabulary():
    hyp = tuple(range(1, 21))
    ref = tuple(range(101, 121))
    # each zero-match order k gets precision 1 / (2^k * total)
    want = 100 * math.exp(sum(math.log(1 / (2 ** k * (21 - k))) for k in range(1, 5)) / 4)
    got = corpus_bleu([hyp], [ref])
    assert got == pytest.approx(want, rel=1e-12)
    assert 0 < got < 1.0


def test_bleu_permutation_invariant():
    rng = np.random.default_rng(1)
    hyps = [tuple(rng.integers(1, 6, size=rng.integers(4, 9))) for _ in range(10)]
    refs = [tuple(rng.integers(1, 6, size=rng.integers(4, 9))) for _ in range(10)]
    order = rng.permutation(10)
    assert corpus_bleu(hyps, refs) == pytest.approx(
        corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]), abs=1e-12)


def test_bleu_empty_corpus_rejected():
    with pytest.raises(ValueError):
        corpus_bleu([], [])


def test_length_ratio_cases():
    refs = [(1, 2, 3), (4, 5)]
    assert length_ratio(refs, refs) == 1.0
    assert length_ratio([(), ()], refs) == 0.0
    assert length_ratio([(1,), (1, 2, 3, 4)], refs) == 5 / 5
    assert length_ratio([(1, 1, 1, 1), (2, 2)], [(1, 2), (3,)]) == 6 / 3
    with pytest.raises(ValueError):
        length_ratio([()], [()])


def test_search_error_rate():
    scores = {(1,): -1.0, (2,): -2.0, (3,): -0.5}
    scorer = lambda i, y: scores[tuple(y)]
    assert search_error_rate([(1,), (1,)], [(1,), (1,)], scorer) == 0.0
    assert search_error_rate([(2,), (1,)], [(1,), (3,)], scorer) == 1.0
    assert search_error_rate([(1,), (3,)], [(2,), (1,)], scorer) == 0.0
    infeasible = lambda i, y: -math.inf if y == (3,) else -1.0
    assert search_error_rate([(3,)], [(1,)], infeasible) == 1.0


def test_eval_report_ranges():
    with pytest.raises(ValueError):
        EvalReport(n=1, accuracy=1.0, bleu=0.0, length_ratio=1.0, search_error_rate=1.5)
    r = EvalReport(n=2, accuracy=0.5, bleu=10.0, length_ratio=1.0, monotonicity=[0.3, 0.4])
    assert r.flat()["m_layer1"] == 0.4
