import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointctc import numerics as nx
from jointctc.ctc import (CTCInfeasibleError, PosteriorGrid, batch_occupancy, collapse,
                          ctc_logprob, ctc_loss, ctc_nll_batch, greedy_decode, is_feasible, min_frames, occupancy,
                          viterbi_align)
from jointctc.oracle import brute_best_path, brute_best_path_decode, brute_ctc, random_case

A, B = 1, 2


def one_hot_grid(path, V):
    logp = np.full((len(path), V), -1e4)
    logp[np.arange(len(path)), path] = 0.0
    logp -= nx.logsumexp(logp, axis=1)[:, None]
    return PosteriorGrid(logp)


def uniform_grid(T, V):
    return PosteriorGrid(np.full((T, V), -math.log(V)))


def test_collapse_rule():
    assert collapse([A, A, 0, A, B, B]) == (A, A, B)
    assert collapse([0, 0, 0]) == ()
    assert collapse([A, 0, A]) == (A, A)


def test_single_frame_single_label():
    logp = np.log([[0.4, 0.6]])
    assert ctc_logprob(PosteriorGrid(logp), (A,)) == pytest.approx(math.log(0.6), abs=1e-15)


def test_empty_label_is_all_blank_path():
    logp = np.log(np.full((2, 2), 0.5))
    assert ctc_logprob(PosteriorGrid(logp), ()) == pytest.approx(math.log(0.25), abs=1e-15)


def test_uniform_two_frames_three_symbols():
    g = uniform_grid(2, 3)
    assert ctc_logprob(g, (A,)) == pytest.approx(math.log(1 / 3), abs=1e-12)
    assert brute_ctc(g, (A,)) == pytest.approx(math.log(1 / 3), abs=1e-12)


def test_infeasible_scores_minus_infinity():
    g = uniform_grid(2, 3)
    assert ctc_logprob(g, (A, A)) == -math.inf
    assert min_frames((A, A)) == 3 and not is_feasible(2, (A, A))


def test_matches_enumeration_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(60):
        g, y = random_case(rng, max_T=7, max_V=4, max_L=4)
        assert abs(ctc_logprob(g, y) - brute_ctc(g, y)) <= 1e-9


def test_loss_is_zero_on_matching_one_hot_path():
    g = one_hot_grid([A, 0, B], 3)
    tape = nx.Tape()
    with nx.use_tape(tape):
        logits = nx.Tensor(g.logp * 1.0, requires_grad=True)
        loss = ctc_loss(logits, (A, B))
        nx.backward(loss, tape)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)
    assert np.abs(logits.grad).max() < 1e-9


def test_loss_gradient_random_grid():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, size=(5, 4))
    rep = nx.grad_check(lambda t: ctc_loss(t, (1, 3)), x, tol=1e-5)
    assert rep.passed, rep.max_rel_err


def test_logit_gradient_is_softmax_minus_occupancy():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, 4))
    tape = nx.Tape()
    with nx.use_tape(tape):
        t = nx.Tensor(x, requires_grad=True)
        nx.backward(ctc_loss(t, (2, 2)), tape)
    p = np.exp(x - nx.logsumexp(x, axis=1)[:, None])
    _, gamma = occupancy(np.log(p), (2, 2))
    assert np.allclose(t.grad, p - gamma, atol=1e-12)


def test_loss_raises_on_infeasible_pair():
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(nx.Tensor(np.zeros((2, 3))), (A, A))


def test_batch_loss_ignores_padding():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(6, 3))
    padded = np.zeros((2, 6, 3))
    padded[0, :4] = a
    padded[1] = b
    lp = nx.log_softmax(nx.Tensor(padded))
    got = ctc_nll_batch(lp, [(1,), (2, 1)], [4, 6]).item()
    want = -(ctc_logprob(PosteriorGrid.from_logits(a), (1,)) + ctc_logprob(PosteriorGrid.from_logits(b), (2, 1))) / 2
    assert got == pytest.approx(want, abs=1e-12)


def test_batched_occupancy_matches_per_sequence():
    rng = np.random.default_rng(9)
    for _ in range(50):
        Bn, T, V = int(rng.integers(1, 6)), int(rng.integers(1, 10)), int(rng.integers(2, 6))
        logp = np.log(rng.dirichlet(np.ones(V), size=(Bn, T)))
        labels, lens = [], []
        for _ in range(Bn):
            while True:
                L = int(rng.integers(1, T + 1))
                y = tuple(int(c) for c in rng.integers(1, V, size=int(rng.integers(0, 5))))
                if is_feasible(L, y):
                    break
            labels.append(y)
            lens.append(L)
        ll, gamma = batch_occupancy(logp, labels, lens)
        for b in range(Bn):
            l1, g1 = occupancy(logp[b, :lens[b]], labels[b])
            assert abs(ll[b] - l1) <= 1e-12
            assert np.abs(gamma[b, :lens[b]] - g1).max() <= 1e-12
            assert not gamma[b, lens[b]:].any()


def test_batch_loss_skips_infeasible_items_on_request():
    lp = nx.log_softmax(nx.Tensor(np.zeros((2, 2, 3))))
    with pytest.raises(CTCInfeasibleError):
        ctc_nll_batch(lp, [(1,), (1, 2, 1)], [2, 2])
    with pytest.warns(RuntimeWarning):
        got = ctc_nll_batch(lp, [(1,), (1, 2, 1)], [2, 2], infeasible="skip").item()
    assert got == pytest.approx(-ctc_logprob(PosteriorGrid(np.full((2, 3), -math.log(3))), (1,)) / 2)


def test_greedy_decode():
    assert greedy_decode(one_hot_grid([A, 0, B], 3)) == (A, B)
    assert greedy_decode(one_hot_grid([0, 0, 0], 3)) == ()
    rng = np.random.default_rng(9)
    for _ in range(20):
        g = PosteriorGrid.random(rng, 7, 4)
        assert greedy_decode(g) == brute_best_path_decode(g)


def test_viterbi_one_hot_and_forced_shape():
    path = viterbi_align(one_hot_grid([A, A, 0, B], 3), (A, B))
    assert path.z == (A, A, 0, B) and path.logp == pytest.approx(0.0, abs=1e-9)
    assert viterbi_align(uniform_grid(3, 3), (A, A)).z == (A, 0, A)


def test_viterbi_ties_prefer_blank():
    # all paths tie on a uniform grid; backtracking keeps choosing the blank state
    assert viterbi_align(uniform_grid(3, 3), (A,)).z == (A, 0, 0)


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(10)
    for _ in range(40):
        g, y = random_case(rng, max_T=7, max_V=4, max_L=3)
        p = viterbi_align(g, y)
        assert collapse(p.z) == y
        assert p.logp == pytest.approx(brute_best_path(g, y), abs=1e-9)


def test_viterbi_infeasible_raises():
    with pytest.raises(CTCInfeasibleError):
        viterbi_align(uniform_grid(1, 3), (A, B))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sum_dominates_best_path(seed):
    g, y = random_case(np.random.default_rng(seed), max_T=8, max_V=5, max_L=4)
    assert ctc_logprob(g, y) >= viterbi_align(g, y).logp - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_certain_blank_frame_leaves_likelihood_unchanged(seed):
    g, y = random_case(np.random.default_rng(seed), max_T=7, max_V=4, max_L=3)
    row = np.full((1, g.V), -np.inf)
    row[0, 0] = 0.0
    longer = PosteriorGrid(np.vstack([g.logp, row]))
    assert abs(ctc_logprob(longer, y) - ctc_logprob(g, y)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_occupancy_rows_sum_to_one(seed):
    g, y = random_case(np.random.default_rng(seed), max_T=8, max_V=5, max_L=4)
    _, gamma = occupancy(g.logp, y)
    assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-9)


def test_long_grid_does_not_underflow():
    g = PosteriorGrid.random(np.random.default_rng(11), 400, 6)
    assert np.isfinite(ctc_logprob(g, (1, 2, 3, 4, 5) * 10))
