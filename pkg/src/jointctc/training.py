"""Multi-task training: source CTC + lambda1 * target CTC + lambda2 * decoder cross-entropy."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ctc import collapse, ctc_nll_batch
from .data import Example
from .model import (BLANK_ID, BOS_ID, EOS_ID, EncodedBatch, ModelConfig, Params,
                    decoder_forward, encode_batch, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0
    peak_lr: float = 1e-3
    warmup_steps: int = 10000
    adam_betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    weight_decay: float = 1e-4
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 32
    seed: int = 0
    use_src_ctc: bool = True
    use_tgt_ctc: bool = True
    label_smoothing: float = 0.1
    clip_norm: float | None = None
    eval_every: int = 500
    n_valid_eval: int | None = None

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


MT_PRESET = dict(lambda1=1.0, lambda2=2.0, warmup_steps=10000, adam_betas=(0.9, 0.98),
                 adam_eps=1e-9, weight_decay=1e-4, peak_lr=1e-3)
ST_PRESET = dict(lambda1=2.0, lambda2=5.0, warmup_steps=25000, adam_betas=(0.9, 0.98),
                 adam_eps=1e-9, weight_decay=1e-4, peak_lr=2e-3)


def lr_schedule(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warmup to ``peak_lr`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Params, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd:
                p.data *= 1 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _decoder_io(targets: Sequence[Sequence[int]]):
    L = max(len(t) for t in targets) + 1
    B = len(targets)
    y_in = np.full((B, L), BOS_ID, dtype=np.int64)
    y_out = np.full((B, L), EOS_ID, dtype=np.int64)
    weight = np.zeros((B, L))
    for i, t in enumerate(targets):
        y_in[i, 1:len(t) + 1] = t
        y_out[i, :len(t)] = t
        weight[i, :len(t) + 1] = 1.0
    return y_in, y_out, weight


def attention_xent(logp: nx.Tensor, y_out: np.ndarray, weight: np.ndarray,
                   smoothing: float) -> nx.Tensor:
    """Label-smoothed cross-entropy summed over real positions, averaged over the batch."""
    B = logp.shape[0]
    nll = nx.mul(nx.pick(logp, y_out), -1.0)
    if smoothing > 0:
        smooth = nx.mul(nx.mean(logp, axis=-1), -1.0)
        tok = nx.add(nx.mul(nll, 1.0 - smoothing), nx.mul(smooth, smoothing))
    else:
        tok = nll
    return nx.mul(nx.sum(nx.mul(tok, nx.Tensor(weight))), 1.0 / B)


def multitask_loss(params: Params, cfg: ModelConfig, eb: EncodedBatch,
                   src_labels: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                   tcfg: TrainConfig, train: bool = False, rng=None,
                   infeasible: str = "error"):
    """Return ``(total, terms)``; ``terms`` maps each active loss name to its value."""
    terms: dict[str, nx.Tensor] = {}
    if tcfg.use_src_ctc:
        terms["src_ctc"] = ctc_nll_batch(eb.src_logp, src_labels, eb.lengths, BLANK_ID, infeasible)
    if tcfg.use_tgt_ctc:
        terms["tgt_ctc"] = ctc_nll_batch(eb.tgt_logp, targets, eb.lengths, BLANK_ID, infeasible)
    if tcfg.lambda2 > 0:
        y_in, y_out, weight = _decoder_io(targets)
        logp = decoder_forward(params, cfg, eb.h_tgt, eb.key_pad, y_in, train, rng)
        terms["attn"] = attention_xent(logp, y_out, weight, tcfg.label_smoothing)
    weights = {"src_ctc": 1.0, "tgt_ctc": tcfg.lambda1, "attn": tcfg.lambda2}
    total = None
    for name, t in terms.items():
        part = nx.mul(t, weights[name])
        total = part if total is None else nx.add(total, part)
    if total is None:
        raise ValueError("every loss term is disabled")
    return total, {k: float(v.data) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# evaluation helpers used during training
# ---------------------------------------------------------------------------


def greedy_attention_batch(params: Params, cfg: ModelConfig, eb: EncodedBatch,
                           max_len: int) -> list[tuple]:
    """Greedy decoder outputs for a batch (full recomputation per step)."""
    B = eb.h_tgt.shape[0]
    seqs = np.full((B, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    with nx.no_grad():
        for _ in range(max_len):
            logp = decoder_forward(params, cfg, eb.h_tgt, eb.key_pad, seqs).data[:, -1]
            nxt = logp.argmax(axis=-1)
            for i in range(B):
                if not done[i]:
                    if nxt[i] == EOS_ID:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, np.where(done, EOS_ID, nxt)[:, None]], axis=1)
    return [tuple(o) for o in out]


def greedy_ctc_batch(eb: EncodedBatch) -> list[tuple]:
    best = eb.tgt_logp.data.argmax(axis=-1)
    return [collapse(best[i, :eb.lengths[i]], BLANK_ID) for i in range(best.shape[0])]


@dataclass
class ValidStats:
    loss: float
    terms: dict
    ctc_acc: float
    attn_acc: float


def evaluate(params: Params, cfg: ModelConfig, examples: Sequence[Example], tcfg: TrainConfig,
             batch_size: int = 128) -> ValidStats:
    tot, n = 0.0, 0
    agg: dict[str, float] = {}
    ctc_ok = attn_ok = 0
    with nx.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            eb = encode_batch(params, cfg, [e.source for e in chunk])
            loss, terms = multitask_loss(params, cfg, eb, [e.ctc_source_labels() for e in chunk],
                                         [e.target for e in chunk], tcfg, infeasible="skip")
            w = len(chunk)
            tot += float(loss.data) * w
            for k, v in terms.items():
                agg[k] = agg.get(k, 0.0) + v * w
            n += w
            ctc_hyp = greedy_ctc_batch(eb)
            max_len = max(len(e.target) for e in chunk) * 2 + 2
            attn_hyp = greedy_attention_batch(params, cfg, eb, max_len)
            for e, c, a in zip(chunk, ctc_hyp, attn_hyp):
                ctc_ok += c == e.target
                attn_ok += a == e.target
    n = max(n, 1)
    return ValidStats(tot / n, {k: v / n for k, v in agg.items()}, ctc_ok / n, attn_ok / n)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: Params
    best_step: int
    best_valid: ValidStats | None
    history: list = field(default_factory=list)


def _clip(params: Params, max_norm: float) -> float:
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return norm


def _snapshot(params: Params) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def train(params: Params, cfg: ModelConfig, train_set: Sequence[Example],
          valid_set: Sequence[Example], tcfg: TrainConfig, out_dir=None,
          log_path=None) -> TrainResult:
    """Adam + inverse-sqrt schedule; keeps the parameters with the lowest validation loss.

    With ``out_dir`` the best checkpoint is written to ``out_dir/best.ckpt``.
    Each step appends ``{step, lr, loss, <terms>}`` to ``log_path`` (JSON lines).
    """
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params, tcfg.adam_betas, tcfg.adam_eps, tcfg.weight_decay)
    valid_eval = list(valid_set[:tcfg.n_valid_eval] if tcfg.n_valid_eval else valid_set)
    history: list[dict] = []
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    best_loss, best_step, best_stats, best_params = math.inf, 0, None, None
    steps_per_epoch = math.ceil(len(train_set) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    if tcfg.max_steps is not None:
        total_steps = min(total_steps, tcfg.max_steps) if tcfg.epochs else tcfg.max_steps

    def record(rec):
        history.append(rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")

    def validate(step):
        nonlocal best_loss, best_step, best_stats, best_params
        if not valid_eval:
            return
        st = evaluate(params, cfg, valid_eval, tcfg)
        record({"step": step, "valid_loss": st.loss, "valid_terms": st.terms,
                "valid_ctc_acc": st.ctc_acc, "valid_attn_acc": st.attn_acc})
        log.info("step %d valid loss %.4f ctc acc %.3f attn acc %.3f",
                 step, st.loss, st.ctc_acc, st.attn_acc)
        if st.loss < best_loss:
            best_loss, best_step, best_stats = st.loss, step, st
            best_params = _snapshot(params)

    step = 0
    t0 = time.time()
    try:
        while step < total_steps:
            order = rng.permutation(len(train_set))
            for b in range(steps_per_epoch):
                if step >= total_steps:
                    break
                step += 1
                batch = [train_set[i] for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]]
                tape = nx.Tape()
                with nx.use_tape(tape):
                    try:
                        eb = encode_batch(params, cfg, [e.source for e in batch], train=True, rng=rng)
                        loss, terms = multitask_loss(
                            params, cfg, eb, [e.ctc_source_labels() for e in batch],
                            [e.target for e in batch], tcfg, train=True, rng=rng)
                    except nx.NonFiniteError as err:
                        raise TrainingDiverged(f"non-finite value at step {step}: {err}") from err
                    opt.zero_grad()
                    nx.backward(loss, tape)
                if tcfg.clip_norm:
                    _clip(params, tcfg.clip_norm)
                lr = lr_schedule(step, tcfg.peak_lr, tcfg.warmup_steps)
                opt.step(lr)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    raise TrainingDiverged(f"loss became {lv} at step {step}")
                record({"step": step, "lr": lr, "loss": lv, **terms})
                if step % tcfg.eval_every == 0:
                    validate(step)
        if not history or history[-1].get("step") != step or "valid_loss" not in history[-1]:
            validate(step)
    finally:
        if logf:
            logf.close()
    log.info("trained %d steps in %.1fs", step, time.time() - t0)
    if best_params is not None:
        for k, arr in best_params.items():
            params[k].data = arr
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(out_dir) / "best.ckpt", params, cfg,
                        {"best_step": best_step, "train": tcfg.to_dict()})
    return TrainResult(params, best_step, best_stats, history)
