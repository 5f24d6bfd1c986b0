"""Brute-force references for CTC scoring and joint search.

Nothing here shares dynamic-programming code with the modules it checks:
every quantity comes from enumerating all ``V**T`` alignment paths or all
label sequences up to a length cap.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

NEG_INF = -np.inf


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_T: int = 10
    max_L: int = 5
    max_V: int = 6
    max_nodes: int = 1 << 20

    def check_paths(self, T: int, V: int) -> None:
        if T > self.max_T or V > self.max_V or V ** T > self.max_nodes:
            raise BudgetExceeded(f"enumerating {V}^{T} paths exceeds the budget")


DEFAULT_BUDGET = EnumerationBudget()


def _lse(values: np.ndarray) -> float:
    if values.size == 0:
        return NEG_INF
    m = values.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.exp(values - m).sum()))


def _collapse_literal(z, blank):
    out = []
    prev = None
    for s in z:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


@lru_cache(maxsize=64)
def _paths(T: int, V: int, blank: int):
    """All V**T paths as an int array plus the collapse of each one."""
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    labels = [_collapse_literal(p.tolist(), blank) for p in paths]
    return paths, labels


def path_logps(logp: np.ndarray, blank: int, budget: EnumerationBudget = DEFAULT_BUDGET):
    T, V = logp.shape
    budget.check_paths(T, V)
    paths, labels = _paths(T, V, blank)
    return logp[np.arange(T)[None, :], paths].sum(axis=1), labels, paths


def brute_ctc(grid, y: Sequence[int], budget: EnumerationBudget = DEFAULT_BUDGET) -> float:
    """log of the summed probability of every path whose collapse is ``y``."""
    y = tuple(int(c) for c in y)
    scores, labels, _ = path_logps(grid.logp, grid.blank_id, budget)
    sel = np.array([lab == y for lab in labels])
    return _lse(scores[sel])


def brute_best_path(grid, y: Sequence[int], budget: EnumerationBudget = DEFAULT_BUDGET) -> float:
    """Max path log-probability among paths collapsing to ``y``."""
    y = tuple(int(c) for c in y)
    scores, labels, _ = path_logps(grid.logp, grid.blank_id, budget)
    sel = np.array([lab == y for lab in labels])
    return float(scores[sel].max()) if sel.any() else NEG_INF


def brute_prefix_mass(grid, prefix: Sequence[int], budget: EnumerationBudget = DEFAULT_BUDGET) -> float:
    """log mass of full-length paths whose collapse starts with ``prefix``."""
    prefix = tuple(int(c) for c in prefix)
    n = len(prefix)
    scores, labels, _ = path_logps(grid.logp, grid.blank_id, budget)
    sel = np.array([lab[:n] == prefix for lab in labels])
    return _lse(scores[sel])


def brute_sequence_masses(grid, budget: EnumerationBudget = DEFAULT_BUDGET) -> dict[tuple, float]:
    """Every reachable label sequence with its total CTC log-mass."""
    scores, labels, _ = path_logps(grid.logp, grid.blank_id, budget)
    buckets: dict[tuple, list[float]] = {}
    for s, lab in zip(scores, labels):
        buckets.setdefault(lab, []).append(s)
    return {lab: _lse(np.array(v)) for lab, v in buckets.items()}


def brute_best_path_decode(grid) -> tuple:
    """Row-wise argmax, collapsed; the reference for greedy decoding."""
    best = [int(max(range(grid.V), key=lambda k: grid.logp[t, k])) for t in range(grid.T)]
    return _collapse_literal(best, grid.blank_id)


# ---------------------------------------------------------------------------
# exhaustive joint search
# ---------------------------------------------------------------------------


def attention_sequence_logp(attn, y: Sequence[int], eos_id: int = 0) -> float:
    """Sum of stepwise attention log-probs of ``y`` followed by eos."""
    total = 0.0
    prefix: tuple = ()
    for c in tuple(y) + (eos_id,):
        total += float(attn.logprobs(prefix)[c])
        prefix = prefix + (c,)
    return total


def exhaustive_joint_argmax(grid, attn, ctc_weight: float, length_penalty: float = 0.0,
                            max_len: int | None = None, tokens: Sequence[int] | None = None,
                            eos_id: int = 0, budget: EnumerationBudget = DEFAULT_BUDGET):
    """Global maximiser of ``ctc_weight*logP_ctc + (1-ctc_weight)*logP_attn + penalty*|y|``.

    Every sequence over ``tokens`` up to ``max_len`` is scored; CTC masses
    come from path enumeration.  Returns ``(best_sequence, best_score, table)``
    where ``table`` maps each sequence to its score.
    """
    max_len = grid.T if max_len is None else max_len
    if tokens is None:
        tokens = [k for k in range(grid.V) if k != grid.blank_id]
    tokens = list(tokens)
    if max_len > budget.max_L or len(tokens) + 1 > budget.max_V:
        raise BudgetExceeded("joint search space exceeds the budget")
    masses = brute_sequence_masses(grid, budget) if ctc_weight > 0 else {}
    table: dict[tuple, float] = {}
    for n in range(max_len + 1):
        for y in itertools.product(tokens, repeat=n):
            score = length_penalty * n
            if ctc_weight > 0:
                score += ctc_weight * masses.get(y, NEG_INF)
            if ctc_weight < 1:
                score += (1 - ctc_weight) * attention_sequence_logp(attn, y, eos_id)
            table[y] = score
    best = max(table, key=lambda y: (table[y], -len(y), tuple(-c for c in y)))
    return best, table[best], table


class SyntheticAttention:
    """Deterministic stand-in for a decoder: a seeded random distribution per prefix.

    ``eos_bias`` shifts the eos logit, which lets tests control how eagerly
    hypotheses terminate.
    """

    def __init__(self, vocab_size: int, seed: int = 0, eos_id: int = 0,
                 eos_bias: float = 0.0, scale: float = 2.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.eos_id = eos_id
        self.eos_bias = eos_bias
        self.scale = scale
        self.calls = 0

    def logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        self.calls += 1
        key = [self.seed, len(prefix)] + [int(c) for c in prefix]
        rng = np.random.default_rng(key)
        z = rng.uniform(-self.scale, self.scale, self.vocab_size)
        z[self.eos_id] += self.eos_bias
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))


def random_case(rng: np.random.Generator, max_T: int = 8, max_V: int = 4, max_L: int = 4,
                feasible_only: bool = True):
    """Random (grid, y) pair for oracle comparisons; ``V`` includes the blank."""
    from .ctc import PosteriorGrid, is_feasible

    while True:
        T = int(rng.integers(1, max_T + 1))
        V = int(rng.integers(2, max_V + 1))
        L = int(rng.integers(0, max_L + 1))
        y = tuple(int(c) for c in rng.integers(1, V, size=L))
        if not feasible_only or is_feasible(T, y):
            return PosteriorGrid.random(rng, T, V), y


