"""Joint CTC/attention beam search, in output-synchronous and input-synchronous form.

Both joint searches rank hypotheses by the same score

    ctc_weight * ctc + (1 - ctc_weight) * attn + length_penalty * |tokens|

and differ only in where expansions come from and when hypotheses end:

* output synchrony proposes the decoder's top-p next tokens at each label
  step, scores the CTC part by the prefix probability over the whole input,
  and ends a hypothesis by appending eos (scored with the full-sequence CTC
  probability);
* input synchrony consumes one encoder frame per step, proposes CTC's top-p
  symbols for that frame, and ends every survivor once the input is used up.

The single-branch searches (``attention_beam_search``, ``ctc_prefix_beam_search``)
are written independently so they can be compared against the joint searches
at degenerate weights.

An attention scorer is any object with ``logprobs(prefix) -> ndarray`` giving
the next-token log-distribution with eos at index 0.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import PosteriorGrid, ctc_logprob
from .data import Example
from .metrics import corpus_bleu, length_ratio, search_error_rate, sequence_accuracy
from .prefix import (NEG_INF, InSyncFrontier, LogAddCounter,
                     insync_advance, outsync_extend_many, outsync_initial)

EOS = 0

MODES = ("attn-only", "ctc-only", "joint-osync", "joint-isync",
         "attn-then-ctc-rescore", "ctc-then-attn-rescore")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "joint-osync"
    beam_size: int = 5
    prebeam: int | None = None  # None -> min(V, ceil(1.5 * beam_size))
    ctc_weight: float = 0.3
    length_penalty: float = 0.0
    blank_penalty: float = 0.0
    max_len_ratio: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.prebeam is not None and self.prebeam < self.beam_size:
            raise ValueError("prebeam must be >= beam_size")
        if self.max_len_ratio <= 0:
            raise ValueError("max_len_ratio must be positive")

    def p(self, V: int) -> int:
        if self.prebeam is not None:
            return min(V, self.prebeam)
        return min(V, math.ceil(1.5 * self.beam_size))

    def max_len(self, T: int) -> int:
        return max(1, math.ceil(self.max_len_ratio * T))

    @property
    def effective_weight(self) -> float:
        """CTC weight of the objective this mode optimises."""
        if self.mode == "attn-only":
            return 0.0
        if self.mode == "ctc-only":
            return 1.0
        return self.ctc_weight

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown decode config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def joint_score(ctc: float, attn: float, n_tokens: int, ctc_weight: float, length_penalty: float) -> float:
    """The shared ranking formula.  A branch with zero weight is left out entirely."""
    s = length_penalty * n_tokens
    if ctc_weight > 0:
        s += ctc_weight * ctc
    if ctc_weight < 1:
        s += (1.0 - ctc_weight) * attn
    return float(s)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    attn_logp: float
    ctc_logp: float  # prefix score while active, full-sequence score once finished
    ctc_state: object
    length_bonus: float
    joint_score: float
    finished: bool = False

    def rank_key(self):
        return (-self.joint_score, len(self.tokens), self.tokens)


def _rank(hyps):
    return sorted(hyps, key=Hypothesis.rank_key)


def _top_ids(row: np.ndarray, k: int) -> list[int]:
    """The ``k`` largest entries, ties to the lower id."""
    order = np.lexsort((np.arange(row.size), -row))
    return [int(i) for i in order[:k]]


@dataclass
class DecodeResult:
    mode: str
    best: Hypothesis
    nbest: list
    steps: int
    logadds: int
    logadds_per_step: list = field(default_factory=list)
    nanos: int = 0

    @property
    def tokens(self) -> tuple:
        return self.best.tokens


# ---------------------------------------------------------------------------
# output synchrony
# ---------------------------------------------------------------------------


def output_step(active: list, grid: PosteriorGrid | None, attn, dc: DecodeConfig, step: int,
                max_len: int, counter: LogAddCounter) -> tuple[list, list]:
    """Expand every active hypothesis; return ``(extended, ended)`` candidates.

    Each hypothesis is extended by the decoder's top-p labels and also ended
    with eos.  At ``step == max_len`` only the eos ending is offered.
    """
    lam, beta = dc.ctc_weight, dc.length_penalty
    extended, ended = [], []
    for h in active:
        row = attn.logprobs(h.tokens)
        a = h.attn_logp + float(row[EOS])
        n = len(h.tokens)
        if lam > 0:
            ctc = h.ctc_state.full_score()
            counter.add(1)
        else:
            ctc = NEG_INF
        ended.append(Hypothesis(h.tokens, a, ctc, h.ctc_state, beta * n,
                                joint_score(ctc, a, n, lam, beta), True))
        if step == max_len:
            continue
        masked = row.copy()
        masked[EOS] = -np.inf
        labels = _top_ids(masked, min(dc.p(row.size), row.size - 1))
        states = {}
        if lam > 0:
            for st in outsync_extend_many(h.ctc_state, labels, grid, counter):
                states[st.prefix[-1]] = st
        for c in labels:
            a = h.attn_logp + float(row[c])
            st = states.get(c)
            ctc = st.pscore if st is not None else NEG_INF
            extended.append(Hypothesis(h.tokens + (c,), a, ctc, st, beta * (n + 1),
                                       joint_score(ctc, a, n + 1, lam, beta)))
    return extended, ended


def joint_osync(grid: PosteriorGrid, attn, dc: DecodeConfig, max_len: int | None = None) -> DecodeResult:
    t0 = time.perf_counter_ns()
    max_len = dc.max_len(grid.T) if max_len is None else max_len
    counter = LogAddCounter()
    root_state = outsync_initial(grid.logp, grid.blank_id) if dc.ctc_weight > 0 else None
    active = [Hypothesis((), 0.0, 0.0, root_state, 0.0, 0.0)]
    finished: list[Hypothesis] = []
    per_step = []
    step = 0
    while active:
        before = counter.n
        extended, ended = output_step(active, grid, attn, dc, step, max_len, counter)
        per_step.append(counter.n - before)
        finished.extend(ended)
        active = _rank(extended)[:dc.beam_size]
        step += 1
        if active and _can_stop(active, finished, dc, max_len - step):
            break
    nbest = _rank(finished)
    return DecodeResult("joint-osync", nbest[0], nbest, step, counter.n, per_step,
                        time.perf_counter_ns() - t0)


def _can_stop(active: list, finished: list, dc: DecodeConfig, remaining: int) -> bool:
    """True when no active hypothesis can still beat the b-th best finished one."""
    if len(finished) < dc.beam_size:
        return False
    worst_kept = _rank(finished)[dc.beam_size - 1].joint_score
    bound = max(h.joint_score for h in active) + max(dc.length_penalty, 0.0) * max(remaining, 0)
    return bound < worst_kept


def attention_beam_search(attn, dc: DecodeConfig, max_len: int) -> DecodeResult:
    """Plain decoder beam search over the full vocabulary (no CTC)."""
    t0 = time.perf_counter_ns()
    beta = dc.length_penalty
    active = [Hypothesis((), 0.0, NEG_INF, None, 0.0, 0.0)]
    finished: list[Hypothesis] = []
    step = 0
    while active:
        cands = []
        for h in active:
            row = attn.logprobs(h.tokens)
            n = len(h.tokens)
            a = h.attn_logp + float(row[EOS])
            finished.append(Hypothesis(h.tokens, a, NEG_INF, None, beta * n, beta * n + a, True))
            if step == max_len:
                continue
            for c in range(1, row.size):
                a = h.attn_logp + float(row[c])
                cands.append(Hypothesis(h.tokens + (c,), a, NEG_INF, None, beta * (n + 1),
                                        beta * (n + 1) + a))
        active = _rank(cands)[:dc.beam_size]
        step += 1
        if active and _can_stop(active, finished, dc, max_len - step):
            break
    nbest = _rank(finished)
    return DecodeResult("attn-only", nbest[0], nbest, step, 0, [0] * step, time.perf_counter_ns() - t0)


# ---------------------------------------------------------------------------
# input synchrony
# ---------------------------------------------------------------------------


def _attn_prefix_logp(attn, cache: dict, prefix: tuple) -> float:
    hit = cache.get(prefix)
    if hit is None:
        hit = _attn_prefix_logp(attn, cache, prefix[:-1]) + float(attn.logprobs(prefix[:-1])[prefix[-1]])
        cache[prefix] = hit
    return hit


def input_step(frontier: InSyncFrontier, grid: PosteriorGrid, t: int, attn, attn_cache: dict,
               dc: DecodeConfig, counter: LogAddCounter):
    """Consume frame ``t`` (1-based) and prune to the beam; returns ``(frontier, ranked hyps)``."""
    lam, beta = dc.ctc_weight, dc.length_penalty
    row = grid.logp[t - 1]
    cands = [c for c in _top_ids(row, dc.p(grid.V)) if c != grid.blank_id]
    nxt = insync_advance(frontier, grid, t, cands, dc.blank_penalty, counter)
    hyps = []
    for prefix, st in nxt.states.items():
        a = _attn_prefix_logp(attn, attn_cache, prefix) if lam < 1 else 0.0
        ctc = st.total
        n = len(prefix)
        hyps.append(Hypothesis(prefix, a, ctc, st, beta * n, joint_score(ctc, a, n, lam, beta)))
    kept = _rank(hyps)[:dc.beam_size]
    return nxt.keep([h.tokens for h in kept]), kept


def joint_isync(grid: PosteriorGrid, attn, dc: DecodeConfig) -> DecodeResult:
    t0 = time.perf_counter_ns()
    lam, beta = dc.ctc_weight, dc.length_penalty
    counter = LogAddCounter()
    frontier = InSyncFrontier.start()
    attn_cache: dict = {(): 0.0}
    per_step = []
    kept: list[Hypothesis] = []
    for t in range(1, grid.T + 1):
        before = counter.n
        frontier, kept = input_step(frontier, grid, t, attn, attn_cache, dc, counter)
        per_step.append(counter.n - before)
    # input exhausted: every survivor ends here; the decoder's eos probability completes its score
    final = []
    for h in kept:
        a = h.attn_logp + float(attn.logprobs(h.tokens)[EOS]) if lam < 1 else 0.0
        n = len(h.tokens)
        final.append(replace(h, attn_logp=a, joint_score=joint_score(h.ctc_logp, a, n, lam, beta),
                             finished=True))
    nbest = _rank(final)
    return DecodeResult("joint-isync", nbest[0], nbest, grid.T, counter.n, per_step,
                        time.perf_counter_ns() - t0)


def ctc_prefix_beam_search(grid: PosteriorGrid, dc: DecodeConfig) -> DecodeResult:
    """Frame-synchronous CTC prefix beam search with no decoder."""
    t0 = time.perf_counter_ns()
    beta = dc.length_penalty
    blank = grid.blank_id
    beam: dict[tuple, list] = {(): [0.0, NEG_INF]}  # prefix -> [log p_blank, log p_nonblank]
    adds = 0
    per_step = []
    ranked: list = [((), 0.0)]
    for t in range(grid.T):
        row = grid.logp[t]
        cands = [c for c in _top_ids(row, dc.p(grid.V)) if c != blank]
        nb: dict[tuple, list] = {}
        n_before = adds
        for prefix, (pb, pnb) in beam.items():
            tot = float(np.logaddexp(pb, pnb))
            slot = nb.setdefault(prefix, [NEG_INF, NEG_INF])
            slot[0] = float(np.logaddexp(slot[0], tot + (float(row[blank]) - dc.blank_penalty)))
            adds += 2
            last = prefix[-1] if prefix else None
            if prefix:
                slot[1] = float(np.logaddexp(slot[1], pnb + float(row[last])))
                adds += 1
            for c in cands:
                ext = nb.setdefault(prefix + (c,), [NEG_INF, NEG_INF])
                ext[1] = float(np.logaddexp(ext[1], (pb if c == last else tot) + float(row[c])))
                adds += 1
        scored = []
        for prefix, (pb, pnb) in nb.items():
            with np.errstate(invalid="ignore"):
                mass = float(np.logaddexp(pb, pnb))
            scored.append((prefix, mass, beta * len(prefix) + 1.0 * mass))
        scored.sort(key=lambda x: (-x[2], len(x[0]), x[0]))
        scored = scored[:dc.beam_size]
        beam = {p: nb[p] for p, _, _ in scored}
        ranked = scored
        per_step.append(adds - n_before)
    nbest = [Hypothesis(p, NEG_INF, m, None, beta * len(p), s, True) for p, m, s in ranked]
    return DecodeResult("ctc-only", nbest[0], nbest, grid.T, adds, per_step, time.perf_counter_ns() - t0)


# ---------------------------------------------------------------------------
# two-pass rescoring
# ---------------------------------------------------------------------------


def attention_sequence_score(attn, y: Sequence[int]) -> float:
    """Decoder log-probability of ``y`` followed by eos."""
    y = tuple(y)
    total = 0.0
    for i in range(len(y) + 1):
        row = attn.logprobs(y[:i])
        total += float(row[y[i]] if i < len(y) else row[EOS])
    return total


def rescore(nbest: Sequence, grid: PosteriorGrid, attn, dc: DecodeConfig) -> list:
    """Re-rank complete sequences by the joint score with full-sequence likelihoods from both branches."""
    if not nbest:
        raise ValueError("nothing to rescore")
    out = []
    lam, beta = dc.ctc_weight, dc.length_penalty
    for item in nbest:
        y = tuple(item.tokens if isinstance(item, Hypothesis) else item)
        ctc = ctc_logprob(grid, y) if lam > 0 else NEG_INF
        a = attention_sequence_score(attn, y) if lam < 1 else NEG_INF
        out.append(Hypothesis(y, a, ctc, None, beta * len(y), joint_score(ctc, a, len(y), lam, beta), True))
    return _rank(out)


def decode(grid: PosteriorGrid, attn, dc: DecodeConfig, max_len: int | None = None) -> DecodeResult:
    """Run the search named by ``dc.mode`` on one input."""
    max_len = dc.max_len(grid.T) if max_len is None else max_len
    m = dc.mode
    if m == "joint-osync":
        return joint_osync(grid, attn, dc, max_len)
    if m == "joint-isync":
        return joint_isync(grid, attn, dc)
    if m == "attn-only":
        return attention_beam_search(attn, dc, max_len)
    if m == "ctc-only":
        return ctc_prefix_beam_search(grid, dc)
    t0 = time.perf_counter_ns()
    first = attention_beam_search(attn, dc, max_len) if m == "attn-then-ctc-rescore" \
        else ctc_prefix_beam_search(grid, dc)
    nbest = rescore(first.nbest, grid, attn, dc)
    return DecodeResult(m, nbest[0], nbest, first.steps, first.logadds, first.logadds_per_step,
                        time.perf_counter_ns() - t0)


# ---------------------------------------------------------------------------
# corpus decoding
# ---------------------------------------------------------------------------

SUMMARY_FIELDS = ["mode", "beam", "prebeam", "ctc_weight", "length_penalty", "blank_penalty", "n",
                  "accuracy", "bleu", "bleu_display", "length_ratio", "length_ratio_display",
                  "search_error_rate", "logadds"]
TIMING_FIELDS = ["mode", "beam", "length_penalty", "blank_penalty", "nanos", "nanos_per_input_token"]


def full_components(grid: PosteriorGrid, attn, y: Sequence[int]) -> tuple[float, float]:
    """(CTC log-likelihood, decoder log-likelihood with eos) of a complete sequence."""
    return ctc_logprob(grid, y), attention_sequence_score(attn, y)


def decode_corpus(params, cfg, examples: Sequence[Example], configs: Sequence[DecodeConfig],
                  out_dir=None, ids: Sequence | None = None):
    """Decode every example under every config.

    Returns ``(summary_rows, timing_rows, records)``.  With ``out_dir``,
    writes ``results.jsonl``, ``summary.csv`` (deterministic) and
    ``timing.csv`` (wall-clock, varies run to run).
    """
    from .model import DecoderScorer, encode

    ids = list(ids) if ids is not None else list(range(len(examples)))
    encoded = [encode(params, cfg, ex.source) for ex in examples]
    scorers = [DecoderScorer(params, cfg, enc.h_tgt) for enc in encoded]
    records, summary, timing = [], [], []
    for dc in configs:
        hyps, nanos, logadds = [], 0, 0
        lam = dc.effective_weight
        for i, (ex, enc, sc) in enumerate(zip(examples, encoded, scorers)):
            try:
                res = decode(enc.tgt_grid, sc, dc)
            except Exception as err:  # surface which example failed
                raise RuntimeError(f"decoding example {ids[i]!r} failed: {err}") from err
            y = res.tokens
            ctc, attn_lp = full_components(enc.tgt_grid, sc, y)
            pen = dc.length_penalty * len(y)
            records.append({
                "id": ids[i], "mode": dc.mode, "beam": dc.beam_size, "length_penalty": dc.length_penalty,
                "tokens": list(y), "attn_logp": attn_lp, "ctc_logp": ctc, "penalty": pen,
                "joint": joint_score(ctc, attn_lp, len(y), lam, dc.length_penalty),
                "steps": res.steps, "logadds": res.logadds, "nanos": res.nanos,
            })
            hyps.append(y)
            nanos += res.nanos
            logadds += res.logadds
        refs = [ex.target for ex in examples]

        def exact(i, seq, _lam=lam):
            c, a = full_components(encoded[i].tgt_grid, scorers[i], seq)
            return joint_score(c, a, len(seq), _lam, 0.0)

        if examples:
            acc = sequence_accuracy(hyps, refs)
            bleu = corpus_bleu(hyps, refs)
            lr = length_ratio(hyps, refs)
            ser = search_error_rate(hyps, refs, exact)
            summary.append({
                "mode": dc.mode, "beam": dc.beam_size, "prebeam": dc.prebeam if dc.prebeam else "",
                "ctc_weight": dc.ctc_weight, "length_penalty": dc.length_penalty,
                "blank_penalty": dc.blank_penalty, "n": len(examples), "accuracy": acc,
                "bleu": bleu, "bleu_display": f"{bleu:.2f}", "length_ratio": lr,
                "length_ratio_display": f"{lr:.3f}", "search_error_rate": ser, "logadds": logadds,
            })
            n_in = sum(len(ex.source) for ex in examples)
            timing.append({"mode": dc.mode, "beam": dc.beam_size, "length_penalty": dc.length_penalty,
                           "blank_penalty": dc.blank_penalty, "nanos": nanos,
                           "nanos_per_input_token": nanos / max(n_in, 1)})
    if out_dir is not None:
        write_outputs(out_dir, summary, timing, records)
    return summary, timing, records


def _write_csv(path: Path, fields_: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields_, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_outputs(out_dir, summary: list, timing: list, records: list) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "results.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    _write_csv(d / "summary.csv", SUMMARY_FIELDS, summary)
    _write_csv(d / "timing.csv", TIMING_FIELDS, timing)
