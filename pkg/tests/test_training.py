import math

import numpy as np
import pytest

from jointctc.data import Example, SyntheticTaskSpec, gen_corpus
from jointctc.model import ModelConfig, encode_batch, init_params
from jointctc.training import (MT_PRESET, ST_PRESET, TrainConfig, evaluate, lr_schedule,
                               multitask_loss, train)

TINY = dict(d_model=16, n_heads=2, d_ff=32, n_src_layers=1, n_adjust_layers=1, n_tgt_layers=1,
            n_dec_layers=1, upsample_rate=2, src_vocab=5, tgt_vocab=5, dropout=0.0)
SRC = [[1, 2, 3], [4, 5], [2, 2, 1, 3]]
TGT = [[3, 2, 1], [5, 4], [3, 1, 2, 2]]


def _terms(tcfg, seed=0):
    cfg = ModelConfig(**TINY)
    params = init_params(cfg, seed)
    eb = encode_batch(params, cfg, SRC)
    return multitask_loss(params, cfg, eb, SRC, TGT, tcfg)


def test_schedule_examples():
    assert lr_schedule(10000, 1e-3, 10000) == pytest.approx(1e-3)
    assert lr_schedule(40000, 1e-3, 10000) == pytest.approx(5e-4)
    assert lr_schedule(1, 1e-3, 10000) == pytest.approx(1e-7)
    with pytest.raises(ValueError):
        lr_schedule(0, 1e-3, 10)


def test_schedule_peaks_at_warmup_and_is_continuous():
    lrs = [lr_schedule(s, 1.0, 50) for s in range(1, 400)]
    peak = int(np.argmax(lrs)) + 1
    assert peak == 50
    assert all(a <= b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a >= b for a, b in zip(lrs[49:], lrs[50:]))
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 0.03


def test_presets():
    assert (MT_PRESET["lambda1"], MT_PRESET["lambda2"]) == (1.0, 2.0)
    assert (ST_PRESET["lambda1"], ST_PRESET["lambda2"]) == (2.0, 5.0)
    assert TrainConfig(**MT_PRESET).adam_betas == (0.9, 0.98)


def test_loss_is_linear_in_weights():
    base = TrainConfig(lambda1=1.0, lambda2=1.0, label_smoothing=0.0)
    _, t = _terms(base)
    for l1, l2 in [(0.5, 3.0), (2.0, 5.0), (0.0, 1.5)]:
        total, _ = _terms(TrainConfig(lambda1=l1, lambda2=l2, label_smoothing=0.0))
        want = t["src_ctc"] + l1 * t["tgt_ctc"] + l2 * t["attn"]
        assert abs(float(total.data) - want) <= 1e-12 * max(1.0, abs(want))


def test_disabled_terms_drop_out():
    total, terms = _terms(TrainConfig(lambda1=0.0, lambda2=0.0, use_tgt_ctc=False))
    assert set(terms) == {"src_ctc"}
    assert float(total.data) == terms["src_ctc"]
    with pytest.raises(ValueError):
        _terms(TrainConfig(lambda2=0.0, use_src_ctc=False, use_tgt_ctc=False))


def test_infeasible_pair_raises():
    cfg = ModelConfig(**{**TINY, "upsample_rate": 1})
    params = init_params(cfg, 0)
    eb = encode_batch(params, cfg, [[1, 2]])
    with pytest.raises(ValueError):
        multitask_loss(params, cfg, eb, [[1, 2]], [[1, 2, 3, 4]], TrainConfig())


def _copy_data(n_train=600):
    spec = SyntheticTaskSpec(task="copy", src_vocab=5, min_len=2, max_len=5, n_train=n_train,
                             n_valid=50, n_test=0, seed=1)
    return gen_corpus(spec)


def test_trajectory_is_reproducible(tmp_path):
    data = _copy_data(64)
    runs = []
    for k in range(2):
        cfg = ModelConfig(**{**TINY, "dropout": 0.1})
        tcfg = TrainConfig(max_steps=6, batch_size=16, warmup_steps=5, peak_lr=3e-3, eval_every=3,
                           seed=4)
        res = train(init_params(cfg, 2), cfg, data["train"], data["valid"][:10], tcfg,
                    out_dir=tmp_path / str(k), log_path=tmp_path / f"{k}.jsonl")
        runs.append(((tmp_path / f"{k}.jsonl").read_text(), (tmp_path / str(k) / "best.ckpt").read_bytes()))
    assert runs[0] == runs[1]


def test_learns_copy_task():
    data = _copy_data()
    cfg = ModelConfig(**TINY)
    tcfg = TrainConfig(epochs=40, max_steps=800, batch_size=32, warmup_steps=60, peak_lr=5e-3,
                       eval_every=100, label_smoothing=0.0, seed=0)
    res = train(init_params(cfg, 0), cfg, data["train"], data["valid"], tcfg)
    stats = evaluate(res.params, cfg, data["valid"], tcfg)
    assert stats.attn_acc >= 0.99
    assert math.isfinite(stats.loss)
