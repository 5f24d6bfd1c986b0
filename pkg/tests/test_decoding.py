import math

import numpy as np
import pytest

from jointctc.ctc import PosteriorGrid, ctc_logprob
from jointctc.decoding import (DecodeConfig, attention_sequence_score, decode, joint_score,
                               rescore)
from jointctc.oracle import SyntheticAttention, exhaustive_joint_argmax


def _case(seed, T=None, V=4, eos_bias=-0.5):
    rng = np.random.default_rng(seed)
    T = T or int(rng.integers(2, 7))
    return PosteriorGrid.random(rng, T, V), SyntheticAttention(V, seed=seed, eos_bias=eos_bias)


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(mode="greedy")
    with pytest.raises(ValueError):
        DecodeConfig(ctc_weight=1.5)
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=5, prebeam=3)
    assert DecodeConfig(beam_size=5).p(100) == 8
    assert DecodeConfig(beam_size=5).p(4) == 4


def test_default_preset():
    dc = DecodeConfig()
    assert (dc.beam_size, dc.ctc_weight) == (5, 0.3)


def test_hypothesis_score_recomputes_from_parts():
    g, attn = _case(1)
    for mode in ("joint-osync", "joint-isync"):
        dc = DecodeConfig(mode, ctc_weight=0.4, length_penalty=0.3)
        for h in decode(g, attn, dc).nbest:
            again = joint_score(h.ctc_logp, h.attn_logp, len(h.tokens), 0.4, 0.3)
            assert abs(again - h.joint_score) <= 1e-12


def test_nbest_sorted():
    g, attn = _case(2)
    for mode in ("attn-only", "ctc-only", "joint-osync", "joint-isync", "attn-then-ctc-rescore",
                 "ctc-then-attn-rescore"):
        scores = [h.joint_score for h in decode(g, attn, DecodeConfig(mode)).nbest]
        assert scores == sorted(scores, reverse=True)


def test_mirror_property_on_a_fixed_hypothesis():
    g, attn = _case(3, T=5)
    dc = DecodeConfig("joint-osync", ctc_weight=0.3, length_penalty=0.2)
    osync = decode(g, attn, dc).best
    via_rescore = rescore([osync.tokens], g, attn, dc)[0]
    assert abs(osync.joint_score - via_rescore.joint_score) <= 1e-12
    # the in-sync final score of the same tokens, computed from an unpruned search
    wide = DecodeConfig("joint-isync", beam_size=500, prebeam=500, ctc_weight=0.3, length_penalty=0.2)
    isync = {h.tokens: h for h in decode(g, attn, wide).nbest}
    if osync.tokens in isync:
        assert abs(isync[osync.tokens].joint_score - osync.joint_score) <= 1e-12


def test_rescoring_single_item_is_identity():
    g, attn = _case(4)
    out = rescore([(1, 2)], g, attn, DecodeConfig())
    assert [h.tokens for h in out] == [(1, 2)]


def test_ctc_then_attn_rescore_score_is_joint_formula():
    g, attn = _case(5)
    dc = DecodeConfig("ctc-then-attn-rescore", ctc_weight=0.3)
    for h in decode(g, attn, dc).nbest:
        want = 0.3 * ctc_logprob(g, h.tokens) + 0.7 * attention_sequence_score(attn, h.tokens)
        assert abs(h.joint_score - want) <= 1e-12


def test_end_detection():
    g, attn = _case(6, T=6)
    osync = decode(g, attn, DecodeConfig("joint-osync"))
    assert all(h.finished and 0 not in h.tokens for h in osync.nbest)
    isync = decode(g, attn, DecodeConfig("joint-isync"))
    assert isync.steps == g.T
    assert all(h.finished and 0 not in h.tokens and len(h.tokens) <= g.T for h in isync.nbest)


def test_insync_length_bound_even_with_large_reward():
    for seed in range(20):
        g, attn = _case(seed, T=4)
        r = decode(g, attn, DecodeConfig("joint-isync", length_penalty=5.0))
        assert len(r.tokens) <= g.T


def test_zero_weight_matches_attention_beam():
    for seed in range(30):
        g, attn = _case(seed)
        for b in (1, 2, 4):
            a = decode(g, attn, DecodeConfig("joint-osync", beam_size=b, ctc_weight=0.0, length_penalty=0.1))
            r = decode(g, attn, DecodeConfig("attn-only", beam_size=b, length_penalty=0.1))
            assert [h.tokens for h in a.nbest] == [h.tokens for h in r.nbest]


def test_unit_weight_matches_ctc_prefix_beam():
    for seed in range(30):
        g, attn = _case(seed)
        for b in (1, 2, 4):
            a = decode(g, attn, DecodeConfig("joint-isync", beam_size=b, ctc_weight=1.0, blank_penalty=0.5))
            r = decode(g, attn, DecodeConfig("ctc-only", beam_size=b, blank_penalty=0.5))
            assert [h.tokens for h in a.nbest] == [h.tokens for h in r.nbest]


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.7, 1.0])
def test_full_width_search_is_exact(lam):
    for seed in range(10):
        g, attn = _case(100 + seed, T=int(1 + seed % 4), eos_bias=0.0)
        best, score, _ = exhaustive_joint_argmax(g, attn, lam, 0.2, max_len=4)
        modes = ["joint-osync"] + (["joint-isync"] if lam > 0 else [])
        for mode in modes:
            dc = DecodeConfig(mode, beam_size=300, prebeam=300, ctc_weight=lam, length_penalty=0.2)
            r = decode(g, attn, dc, max_len=4)
            assert r.tokens == best
            assert abs(r.best.joint_score - score) <= 1e-12


def test_wider_beam_rarely_hurts():
    # beam search is not guaranteed monotone in the beam width; check it holds almost always
    worse = total = 0
    for seed in range(150):
        g, attn = _case(seed, T=int(3 + seed % 5), V=5)
        prev = -math.inf
        for b in (1, 2, 3, 5, 8):
            s = decode(g, attn, DecodeConfig("joint-osync", beam_size=b)).best.joint_score
            worse += s < prev - 1e-12
            prev = max(prev, s)
            total += 1
    assert worse / total <= 0.01


def test_outsync_logadds_grow_with_input_length_insync_do_not():
    per_step = {}
    for T in (16, 32, 64):
        rng = np.random.default_rng(T)
        g = PosteriorGrid.random(rng, T, 6)
        attn = SyntheticAttention(6, seed=T, eos_bias=-30.0)
        o = decode(g, attn, DecodeConfig("joint-osync", beam_size=3, prebeam=4), max_len=6)
        i = decode(g, attn, DecodeConfig("joint-isync", beam_size=3, prebeam=4))
        per_step[T] = (o.logadds / o.steps, i.logadds / i.steps)
    assert per_step[32][0] / per_step[16][0] == pytest.approx(2.0, rel=0.1)
    assert per_step[64][1] / per_step[32][1] == pytest.approx(1.0, rel=0.1)
