"""Incremental CTC prefix scores for the two synchronous beam searches.

Output-synchronous search extends a prefix by one label and rescans all T
frames (``outsync_extend``), giving the exact prefix probability over the full
input.  Input-synchronous search consumes one frame at a time and keeps the
blank / non-blank masses of every live prefix over the frames seen so far
(``insync_advance``).  Both count their log-additions so the cost difference
can be measured rather than asserted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

NEG_INF = -np.inf


class LogAddCounter:
    """Tally of scalar log-additions performed by a search."""

    def __init__(self):
        self.n = 0

    def add(self, k: int) -> None:
        self.n += int(k)

    def __int__(self):
        return self.n

    def __repr__(self):
        return f"LogAddCounter({self.n})"


def _lae(a, b):
    with np.errstate(invalid="ignore"):
        return np.logaddexp(a, b)


# ---------------------------------------------------------------------------
# output synchrony: prefix scoring over the full input
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutSyncPrefixState:
    prefix: tuple
    gamma_n: np.ndarray  # (T,) log-mass collapsing to prefix, last frame non-blank
    gamma_b: np.ndarray  # (T,) same, last frame blank
    pscore: float  # log P(collapse starts with prefix)

    def full_score(self) -> float:
        """log P(collapse == prefix): the score attached when eos is proposed."""
        return float(_lae(self.gamma_n[-1], self.gamma_b[-1]))


def outsync_initial(logp: np.ndarray, blank_id: int = 0) -> OutSyncPrefixState:
    """State for the empty prefix: all mass sits on the all-blank paths."""
    T = logp.shape[0]
    return OutSyncPrefixState((), np.full(T, NEG_INF), np.cumsum(logp[:, blank_id]), 0.0)


def outsync_extend_many(state: OutSyncPrefixState, tokens: Sequence[int], grid,
                        counter: LogAddCounter | None = None) -> list[OutSyncPrefixState]:
    """Extend ``state`` by each non-blank token in ``tokens`` (vectorised over tokens)."""
    logp = grid.logp
    blank = grid.blank_id
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        return []
    if np.any(toks == blank):
        raise ValueError("cannot extend a prefix with the blank symbol")
    T = logp.shape[0]
    K = toks.size
    last = state.prefix[-1] if state.prefix else None
    repeat = toks == last if last is not None else np.zeros(K, dtype=bool)
    emit_c = logp[:, toks]  # (T, K)
    emit_b = logp[:, blank]

    gn = np.full((T, K), NEG_INF)
    gb = np.full((T, K), NEG_INF)
    # mass of the parent prefix just before frame t, usable for a fresh c emission
    if state.prefix:
        phi0 = np.full(K, NEG_INF)
    else:
        phi0 = np.zeros(K)
    gn[0] = phi0 + emit_c[0]
    psi = gn[0].copy()
    adds = 0
    for t in range(1, T):
        pb, pn = state.gamma_b[t - 1], state.gamma_n[t - 1]
        phi = np.where(repeat, pb, _lae(pb, pn))
        gn[t] = _lae(gn[t - 1], phi) + emit_c[t]
        gb[t] = _lae(gb[t - 1], gn[t - 1]) + emit_b[t]
        psi = _lae(psi, phi + emit_c[t])
        adds += 3 * K + int((~repeat).sum())
    if counter is not None:
        counter.add(adds)
    return [
        OutSyncPrefixState(state.prefix + (int(c),), gn[:, k].copy(), gb[:, k].copy(), float(psi[k]))
        for k, c in enumerate(toks)
    ]


def outsync_extend(state: OutSyncPrefixState, c: int, grid, eos_id: int | None = None,
                   counter: LogAddCounter | None = None):
    """Extend by one token.  For ``c == eos_id`` the exact sequence log-likelihood is returned."""
    if eos_id is not None and c == eos_id:
        if counter is not None:
            counter.add(1)
        return state.full_score()
    return outsync_extend_many(state, [c], grid, counter)[0]


# ---------------------------------------------------------------------------
# input synchrony: prefix-beam masses over the input consumed so far
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InSyncPrefixState:
    prefix: tuple
    p_b: float  # log-mass ending in blank at the current frame
    p_nb: float  # log-mass ending in a non-blank

    @property
    def total(self) -> float:
        return float(_lae(self.p_b, self.p_nb))


@dataclass
class InSyncFrontier:
    """The live prefixes after consuming ``t`` frames."""

    t: int
    states: dict = field(default_factory=dict)

    @classmethod
    def start(cls) -> "InSyncFrontier":
        return cls(0, {(): InSyncPrefixState((), 0.0, NEG_INF)})

    def __len__(self):
        return len(self.states)

    def __getitem__(self, prefix):
        return self.states[prefix]

    def __contains__(self, prefix):
        return prefix in self.states

    def keep(self, prefixes: Iterable[tuple]) -> "InSyncFrontier":
        return InSyncFrontier(self.t, {p: self.states[p] for p in prefixes})


class _Acc:
    __slots__ = ("b", "nb")

    def __init__(self):
        self.b = NEG_INF
        self.nb = NEG_INF


def insync_advance(frontier: InSyncFrontier, grid, t: int, candidates: Iterable[int],
                   blank_penalty: float = 0.0,
                   counter: LogAddCounter | None = None) -> InSyncFrontier:
    """Consume frame ``t`` (1-based) of ``grid``.

    Blank and repeat-of-last emissions keep a prefix; each non-blank,
    non-repeat candidate spawns ``prefix + (c,)`` (a repeat right after a blank
    also spawns, from the blank mass only).  Prefixes that coincide are merged
    by log-adding.  ``blank_penalty`` is subtracted from the frame's blank
    log-probability.
    """
    if t != frontier.t + 1:
        raise ValueError(f"frames must be consumed in order: expected {frontier.t + 1}, got {t}")
    if t > grid.T:
        raise ValueError("frame index beyond the grid")
    row = grid.logp[t - 1]
    blank = grid.blank_id
    lp_blank = float(row[blank]) - blank_penalty
    cands = [int(c) for c in candidates if int(c) != blank]
    acc: dict[tuple, _Acc] = {}
    adds = 0

    def slot(p):
        a = acc.get(p)
        if a is None:
            a = acc[p] = _Acc()
        return a

    for prefix, st in frontier.states.items():
        tot = float(_lae(st.p_b, st.p_nb))
        adds += 1
        a = slot(prefix)
        a.b = float(_lae(a.b, tot + lp_blank))
        adds += 1
        if prefix:
            last = prefix[-1]
            a.nb = float(_lae(a.nb, st.p_nb + float(row[last])))
            adds += 1
        else:
            last = None
        for c in cands:
            nxt = prefix + (c,)
            src = st.p_b if c == last else tot
            n = slot(nxt)
            n.nb = float(_lae(n.nb, src + float(row[c])))
            adds += 1
    if counter is not None:
        counter.add(adds)
    return InSyncFrontier(t, {p: InSyncPrefixState(p, a.b, a.nb) for p, a in acc.items()})


def insync_run(grid, candidates: Sequence[int] | None = None, blank_penalty: float = 0.0,
               counter: LogAddCounter | None = None) -> InSyncFrontier:
    """Consume every frame with no pruning (exact masses for every reachable prefix)."""
    if candidates is None:
        candidates = [k for k in range(grid.V) if k != grid.blank_id]
    fr = InSyncFrontier.start()
    for t in range(1, grid.T + 1):
        fr = insync_advance(fr, grid, t, candidates, blank_penalty, counter)
    return fr


def frontier_masses(frontier: InSyncFrontier) -> Mapping[tuple, float]:
    return {p: st.total for p, st in frontier.states.items()}
