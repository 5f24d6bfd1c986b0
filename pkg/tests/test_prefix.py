import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointctc.ctc import PosteriorGrid, ctc_logprob
from jointctc.oracle import brute_ctc, brute_prefix_mass, brute_sequence_masses, random_case
from jointctc.prefix import (InSyncFrontier, LogAddCounter, frontier_masses, insync_advance,
                             insync_run, outsync_extend, outsync_extend_many, outsync_initial)

A, B = 1, 2


def _extend(grid, y):
    st_ = outsync_initial(grid.logp, grid.blank_id)
    for c in y:
        st_ = outsync_extend(st_, c, grid)
    return st_


def test_eos_score_equals_sequence_likelihood():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g, y = random_case(rng, max_T=8, max_V=5, max_L=4, feasible_only=False)
        st_ = _extend(g, y)
        want = ctc_logprob(g, y)
        got = outsync_extend(st_, 0, g, eos_id=0)
        if want == -math.inf:
            assert got == -math.inf
        else:
            assert abs(got - want) <= 1e-12


def test_uniform_two_frame_prefix_mass():
    g = PosteriorGrid(np.full((2, 3), -math.log(3)))
    # collapses starting with a: (a), (a,b) -> paths aa, a0, 0a, ab
    assert _extend(g, (A,)).pscore == pytest.approx(math.log(4 / 9), abs=1e-12)
    assert _extend(g, (A,)).pscore == pytest.approx(brute_prefix_mass(g, (A,)), abs=1e-12)


def test_impossible_token_has_no_prefix_mass():
    with np.errstate(divide="ignore"):
        g = PosteriorGrid(np.log(np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])))
    assert _extend(g, (B,)).pscore == -math.inf


def test_outsync_prefix_scores_match_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(80):
        g, y = random_case(rng, max_T=6, max_V=4, max_L=4, feasible_only=False)
        for k in range(len(y) + 1):
            want = brute_prefix_mass(g, y[:k])
            got = _extend(g, y[:k]).pscore
            assert (got == want == -math.inf) or abs(got - want) <= 1e-9


def test_vectorised_extension_matches_single():
    g = PosteriorGrid.random(np.random.default_rng(2), 6, 5)
    base = _extend(g, (A,))
    many = outsync_extend_many(base, [1, 2, 3, 4], g)
    for s in many:
        assert s.pscore == outsync_extend(base, s.prefix[-1], g).pscore


def test_insync_single_frame():
    logp = np.log(np.array([[0.3, 0.7]]))
    g = PosteriorGrid(logp)
    fr = insync_advance(InSyncFrontier.start(), g, 1, [A])
    assert fr[(A,)].p_nb == pytest.approx(math.log(0.7))
    assert fr[()].p_b == pytest.approx(math.log(0.3))


def test_insync_merges_coinciding_prefixes():
    g = PosteriorGrid.random(np.random.default_rng(3), 2, 3)
    # after two frames, (a,0), (a,a) and (0,a) all spell prefix (a)
    fr = insync_advance(insync_advance(InSyncFrontier.start(), g, 1, [A, B]), g, 2, [A, B])
    paths = [(A, 0), (A, A), (0, A)]
    want = np.logaddexp.reduce([g.logp[0, p[0]] + g.logp[1, p[1]] for p in paths])
    assert fr[(A,)].total == pytest.approx(want, abs=1e-12)


def test_insync_requires_ordered_frames():
    g = PosteriorGrid.random(np.random.default_rng(4), 3, 3)
    with pytest.raises(ValueError):
        insync_advance(InSyncFrontier.start(), g, 2, [A])


def test_unpruned_insync_masses_match_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(60):
        T = int(rng.integers(1, 7))
        g = PosteriorGrid.random(rng, T, int(rng.integers(2, 5)))
        masses = frontier_masses(insync_run(g))
        oracle = {k: v for k, v in brute_sequence_masses(g).items() if np.isfinite(v)}
        assert set(oracle) <= set(masses)
        for y, v in oracle.items():
            assert abs(masses[y] - v) <= 1e-9
            assert abs(masses[y] - ctc_logprob(g, y)) <= 1e-9


def test_log_add_counts_scale_as_expected():
    rng = np.random.default_rng(6)
    per_T = {}
    for T in (16, 32, 64):
        g = PosteriorGrid.random(rng, T, 6)
        c = LogAddCounter()
        outsync_extend_many(outsync_initial(g.logp), [1, 2, 3], g, c)
        per_T[T] = c.n
    assert per_T[32] / per_T[16] == pytest.approx(2.0, rel=0.1)
    assert per_T[64] / per_T[32] == pytest.approx(2.0, rel=0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prefix_mass_never_increases_with_extension(seed):
    g, y = random_case(np.random.default_rng(seed), max_T=8, max_V=5, max_L=4, feasible_only=False)
    scores = [_extend(g, y[:k]).pscore for k in range(len(y) + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_frontier_mass_is_a_distribution(seed):
    g = PosteriorGrid.random(np.random.default_rng(seed), 5, 3)
    masses = np.array(list(frontier_masses(insync_run(g)).values()))
    assert np.logaddexp.reduce(masses) == pytest.approx(0.0, abs=1e-9)
    assert brute_ctc(g, ()) == pytest.approx(frontier_masses(insync_run(g))[()], abs=1e-12)
