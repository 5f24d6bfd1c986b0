"""CTC likelihood, occupancy gradient, greedy decoding and forced alignment.

Everything runs in the log semiring.  Label sequences are plain tuples of
ints; ``blank_id`` is a column of the posterior grid and never appears in a
label sequence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx

NEG_INF = -np.inf

TokenSeq = tuple[int, ...]


class CTCInfeasibleError(ValueError):
    """The grid has too few frames for the label sequence."""


@dataclass(frozen=True)
class PosteriorGrid:
    logp: np.ndarray  # (T, V) per-frame log-distributions
    blank_id: int = 0

    def __post_init__(self):
        lp = np.asarray(self.logp, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] < 1:
            raise ValueError("PosteriorGrid needs a (T, V) array with T >= 1")
        if not 0 <= self.blank_id < lp.shape[1]:
            raise ValueError("blank_id outside the vocabulary")
        object.__setattr__(self, "logp", lp)

    @property
    def T(self) -> int:
        return self.logp.shape[0]

    @property
    def V(self) -> int:
        return self.logp.shape[1]

    def is_normalized(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(nx.logsumexp(self.logp, axis=1)) <= tol))

    @classmethod
    def from_logits(cls, logits, blank_id: int = 0) -> "PosteriorGrid":
        z = np.asarray(logits, dtype=np.float64)
        return cls(z - nx.logsumexp(z, axis=1)[:, None], blank_id)

    @classmethod
    def random(cls, rng: np.random.Generator, T: int, V: int, blank_id: int = 0,
               scale: float = 2.0) -> "PosteriorGrid":
        return cls.from_logits(rng.uniform(-scale, scale, size=(T, V)), blank_id)


@dataclass(frozen=True)
class AlignmentPath:
    z: TokenSeq
    logp: float


def collapse(z: Sequence[int], blank_id: int = 0) -> TokenSeq:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for s in z:
        s = int(s)
        if s != prev and s != blank_id:
            out.append(s)
        prev = s
    return tuple(out)


def min_frames(y: Sequence[int]) -> int:
    """Fewest frames that can emit ``y``: one per label plus a blank between repeats."""
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def is_feasible(T: int, y: Sequence[int]) -> bool:
    return T >= min_frames(y)


def _extended(y: Sequence[int], blank_id: int) -> np.ndarray:
    ext = np.full(2 * len(y) + 1, blank_id, dtype=np.int64)
    ext[1::2] = y
    return ext


def _skip_allowed(ext: np.ndarray, blank_id: int) -> np.ndarray:
    """State s may be entered from s-2 (label differs from the one two back)."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != blank_id) & (ext[2:] != ext[:-2])
    return allow


def _logaddexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def forward_backward(logp: np.ndarray, y: Sequence[int], blank_id: int = 0):
    """Return ``(loglik, log_alpha, log_beta)`` over the 2|y|+1 state lattice.

    ``log_alpha[t, s]`` includes the emission at frame t; ``log_beta[t, s]``
    covers frames t+1..T-1 only, so ``alpha + beta - loglik`` is the state
    occupancy at t.
    """
    T = logp.shape[0]
    ext = _extended(y, blank_id)
    S = len(ext)
    skip = _skip_allowed(ext, blank_id)
    emit = logp[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            s1 = np.full(S, NEG_INF)
            s1[1:] = prev[:-1]
            s2 = np.full(S, NEG_INF)
            s2[2:] = prev[:-2]
            s2[~skip] = NEG_INF
            alpha[t] = _logaddexp3(prev, s1, s2) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)  # s -> s+2 allowed
    skip_from[:S - 2] = skip[2:]
    with np.errstate(invalid="ignore"):
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            n1 = np.full(S, NEG_INF)
            n1[:-1] = nxt[1:]
            n2 = np.full(S, NEG_INF)
            n2[:S - 2] = nxt[2:]
            n2[~skip_from] = NEG_INF
            beta[t] = _logaddexp3(nxt, n1, n2)

    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return float(tail), alpha, beta


def ctc_logprob(grid: PosteriorGrid, y: Sequence[int]) -> float:
    """log P_CTC(y | grid); ``-inf`` when the pair is infeasible."""
    y = tuple(int(c) for c in y)
    if grid.blank_id in y:
        raise ValueError("label sequence contains the blank id")
    if not is_feasible(grid.T, y):
        return NEG_INF
    return forward_backward(grid.logp, y, grid.blank_id)[0]


def occupancy(logp: np.ndarray, y: Sequence[int], blank_id: int = 0):
    """Per-frame, per-symbol posterior occupancy ``gamma`` (T x V) and the log-likelihood."""
    ll, alpha, beta = forward_backward(logp, y, blank_id)
    ext = _extended(y, blank_id)
    post = np.exp(alpha + beta - ll)
    gamma = np.zeros_like(logp)
    np.add.at(gamma.T, ext, post.T)
    return ll, gamma


def ctc_nll(logp: nx.Tensor, y: Sequence[int], blank_id: int = 0,
            infeasible: str = "error") -> nx.Tensor:
    """Negative CTC log-likelihood of a (T, V) log-probability tensor.

    Differentiating w.r.t. each ``logp[t, k]`` independently gives ``-gamma``;
    composed with :func:`numerics.log_softmax` this yields the familiar
    ``softmax - gamma`` logit gradient.
    """
    y = tuple(int(c) for c in y)
    if not is_feasible(logp.shape[0], y):
        msg = f"CTC infeasible: {logp.shape[0]} frames for {len(y)} labels"
        if infeasible == "skip":
            warnings.warn(msg + "; skipped", RuntimeWarning, stacklevel=2)
            return nx.mul(nx.sum(logp), 0.0)
        raise CTCInfeasibleError(msg)
    ll, gamma = occupancy(logp.data, y, blank_id)

    def backward(g):
        nx.accumulate(logp, -g * gamma)
    return nx.custom_op(np.array(-ll), (logp,), backward, "ctc_nll")


def ctc_loss(logits: nx.Tensor, y: Sequence[int], blank_id: int = 0,
             infeasible: str = "error") -> nx.Tensor:
    return ctc_nll(nx.log_softmax(logits), y, blank_id, infeasible)


def batch_occupancy(logp: np.ndarray, labels: Sequence[Sequence[int]], lengths: Sequence[int],
                    blank_id: int = 0):
    """Batched :func:`occupancy` over padded ``(B, T, V)`` log-probs.

    Returns ``(loglik (B,), gamma (B, T, V))``; frames at or beyond
    ``lengths[b]`` get zero occupancy.  Every pair must be feasible.
    """
    B, T, V = logp.shape
    lens = np.asarray(lengths, dtype=np.int64)
    S = 2 * max((len(y) for y in labels), default=0) + 1
    ext = np.full((B, S), blank_id, dtype=np.int64)
    n_states = np.empty(B, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    for b, y in enumerate(labels):
        e = _extended(y, blank_id)
        ext[b, :len(e)] = e
        n_states[b] = len(e)
        skip[b, :len(e)] = _skip_allowed(e, blank_id)
    valid_s = np.arange(S)[None, :] < n_states[:, None]
    rows = np.arange(B)[:, None, None]
    emit = logp[rows, np.arange(T)[None, :, None], ext[:, None, :]]  # (B, T, S)
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, :2] = emit[:, 0, :2]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[:, t - 1]
            s1 = np.full((B, S), NEG_INF)
            s1[:, 1:] = prev[:, :-1]
            s2 = np.full((B, S), NEG_INF)
            s2[:, 2:] = prev[:, :-2]
            s2[~skip] = NEG_INF
            alpha[:, t] = _logaddexp3(prev, s1, s2) + emit[:, t]

    skip_from = np.zeros((B, S), dtype=bool)
    skip_from[:, :S - 2] = skip[:, 2:]
    last = np.zeros((B, S), dtype=bool)
    last[np.arange(B), n_states - 1] = True
    last[np.arange(B), np.maximum(n_states - 2, 0)] = True
    beta = np.full((B, T, S), NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(T - 1, -1, -1):
            if t < T - 1:
                nxt = beta[:, t + 1] + emit[:, t + 1]
                n1 = np.full((B, S), NEG_INF)
                n1[:, :-1] = nxt[:, 1:]
                n2 = np.full((B, S), NEG_INF)
                n2[:, :S - 2] = nxt[:, 2:]
                n2[~skip_from] = NEG_INF
                beta[:, t] = _logaddexp3(nxt, n1, n2)
            ends = lens - 1 == t
            if ends.any():
                beta[ends, t] = np.where(last[ends], 0.0, NEG_INF)

    final = alpha[np.arange(B), lens - 1]  # (B, S)
    ll = np.logaddexp.reduce(np.where(last, final, NEG_INF), axis=1)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - ll[:, None, None])
    post = np.nan_to_num(post, nan=0.0)
    gamma = np.zeros((B, T, V))
    bi = np.broadcast_to(np.arange(B)[:, None, None], (B, T, S))
    ti = np.broadcast_to(np.arange(T)[None, :, None], (B, T, S))
    si = np.broadcast_to(ext[:, None, :], (B, T, S))
    np.add.at(gamma, (bi, ti, si), post)
    return ll, gamma


def ctc_nll_batch(logp: nx.Tensor, labels: Sequence[Sequence[int]], lengths: Sequence[int],
                  blank_id: int = 0, infeasible: str = "error") -> nx.Tensor:
    """Mean over the batch of per-sequence CTC NLL; ``logp`` is (B, T, V) and padded.

    Frames beyond ``lengths[b]`` are ignored (zero gradient).
    """
    B = logp.shape[0]
    keep = []
    for b in range(B):
        if is_feasible(int(lengths[b]), labels[b]):
            keep.append(b)
            continue
        msg = f"CTC infeasible in batch item {b}: {int(lengths[b])} frames for {len(labels[b])} labels"
        if infeasible != "skip":
            raise CTCInfeasibleError(msg)
        warnings.warn(msg + "; skipped", RuntimeWarning, stacklevel=2)
    gamma = np.zeros_like(logp.data)
    total = 0.0
    if keep:
        ll, g = batch_occupancy(logp.data[keep], [tuple(int(c) for c in labels[b]) for b in keep],
                                [int(lengths[b]) for b in keep], blank_id)
        total = -float(ll.sum())
        gamma[keep] = g

    def backward(g):
        nx.accumulate(logp, -g * gamma / B)
    return nx.custom_op(np.array(total / B), (logp,), backward, "ctc_nll_batch")


def greedy_decode(grid: PosteriorGrid) -> TokenSeq:
    return collapse(np.argmax(grid.logp, axis=1), grid.blank_id)


def viterbi_align(grid: PosteriorGrid, y: Sequence[int]) -> AlignmentPath:
    """Best single path collapsing to ``y``.

    Ties prefer a blank predecessor, then the lower token id, so the result
    does not depend on floating-point summation order elsewhere.
    """
    y = tuple(int(c) for c in y)
    if not is_feasible(grid.T, y):
        raise CTCInfeasibleError(f"{grid.T} frames cannot emit {len(y)} labels")
    blank = grid.blank_id
    ext = _extended(y, blank)
    S, T = len(ext), grid.T
    skip = _skip_allowed(ext, blank)
    emit = grid.logp[:, ext]

    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = emit[0, 0]
    if S > 1:
        delta[0, 1] = emit[0, 1]

    def rank(s):
        # preference order among equal scores: blank first, then lower token id
        return (0 if ext[s] == blank else 1, int(ext[s]))

    for t in range(1, T):
        for s in range(S):
            preds = [s]
            if s >= 1:
                preds.append(s - 1)
            if skip[s]:
                preds.append(s - 2)
            best = max(preds, key=lambda q: (delta[t - 1, q], tuple(-v for v in rank(q))))
            delta[t, s] = delta[t - 1, best] + emit[t, s]
            back[t, s] = best

    ends = [S - 1] if S == 1 else [S - 1, S - 2]
    s = max(ends, key=lambda q: (delta[T - 1, q], tuple(-v for v in rank(q))))
    logp = float(delta[T - 1, s])
    path = [0] * T
    for t in range(T - 1, -1, -1):
        path[t] = int(ext[s])
        s = back[t, s]
    return AlignmentPath(tuple(path), logp)
