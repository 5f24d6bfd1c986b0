"""Evaluation quantities: BLEU over token ids, attention monotonicity, length ratio, search errors."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class AttentionMap:
    weights: np.ndarray  # (L, T), rows sum to one

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("attention map must be 2-D")
        object.__setattr__(self, "weights", w)

    @property
    def L(self) -> int:
        return self.weights.shape[0]

    @property
    def T(self) -> int:
        return self.weights.shape[1]

    def is_row_stochastic(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.weights.sum(axis=1) - 1.0) <= tol))


def monotonicity(A, normalized: bool = False) -> float:
    """Fraction of output steps l = 3..L whose attention argmax does not move backwards.

    The sum over ``l = 3..L`` is divided by ``L`` (so a perfectly monotone map
    scores ``(L-2)/L``); ``normalized=True`` divides by ``L - 2`` instead.
    Argmax ties go to the earliest position.
    """
    w = A.weights if isinstance(A, AttentionMap) else np.asarray(A)
    L = w.shape[0]
    if L < 3:
        return 0.0
    am = w.argmax(axis=1)  # numpy returns the first maximum
    hits = int(np.sum(am[2:] >= am[1:-1]))
    return hits / (L - 2 if normalized else L)


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]], max_order: int = 4) -> float:
    """Corpus BLEU on a 0-100 scale with exponential smoothing of zero-match orders."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference lists differ in length")
    if not hyps:
        raise ValueError("empty corpus")
    correct = [0] * max_order
    total = [0] * max_order
    c_len = r_len = 0
    for h, r in zip(hyps, refs):
        h, r = tuple(h), tuple(r)
        c_len += len(h)
        r_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if c_len == 0:
        return 0.0
    log_p = 0.0
    smooth = 1.0
    for n in range(max_order):
        if total[n] == 0:
            return 0.0
        if correct[n] == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total[n])
        else:
            p = correct[n] / total[n]
        log_p += math.log(p) / max_order
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def length_ratio(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    if not refs:
        raise ValueError("empty corpus")
    r = sum(len(x) for x in refs)
    if r == 0:
        raise ValueError("references have zero total length")
    return sum(len(x) for x in hyps) / r


def sequence_accuracy(hyps, refs) -> float:
    if not refs:
        return 0.0
    return sum(tuple(h) == tuple(r) for h, r in zip(hyps, refs)) / len(refs)


def search_error_rate(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]],
                      scorer: Callable[[int, Sequence[int]], float], margin: float = 1e-12) -> float:
    """Fraction of examples whose reference outscores the returned hypothesis.

    ``scorer(i, seq)`` scores ``seq`` for example ``i``; a CTC-infeasible
    sequence should score ``-inf``.
    """
    if not refs:
        return 0.0
    errors = 0
    for i, (h, r) in enumerate(zip(hyps, refs)):
        if scorer(i, r) > scorer(i, h) + margin:
            errors += 1
    return errors / len(refs)


@dataclass
class EvalReport:
    n: int
    accuracy: float
    bleu: float
    length_ratio: float
    search_error_rate: float | None = None
    monotonicity: list = field(default_factory=list)  # per decoder layer
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.search_error_rate is not None and not 0.0 <= self.search_error_rate <= 1.0:
            raise ValueError("search error rate outside [0, 1]")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k not in ("monotonicity", "counters")}
        for i, m in enumerate(self.monotonicity):
            row[f"m_layer{i}"] = m
        row.update(self.counters)
        return row

    def write_csv(self, path) -> None:
        row = self.flat()
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)

    def write_jsonl(self, path) -> None:
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(self.to_dict(), sort_keys=True) + "\n")


def evaluate_hypotheses(hyps, refs, scorer=None, monotonicity_by_layer=None, counters=None) -> EvalReport:
    n = len(refs)
    if n == 0:
        return EvalReport(0, 0.0, 0.0, 0.0, None, [], dict(counters or {}))
    ser = search_error_rate(hyps, refs, scorer) if scorer is not None else None
    r_len = sum(len(r) for r in refs)
    return EvalReport(
        n=n,
        accuracy=sequence_accuracy(hyps, refs),
        bleu=corpus_bleu(hyps, refs),
        length_ratio=length_ratio(hyps, refs) if r_len else 0.0,
        search_error_rate=ser,
        monotonicity=list(monotonicity_by_layer or []),
        counters=dict(counters or {}),
    )
