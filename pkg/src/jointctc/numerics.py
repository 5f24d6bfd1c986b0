"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every op checks its output for NaN/Inf and, when gradients are enabled and an
input requires them, appends a node to the thread's current tape.  The tape
is already in execution (hence topological) order, so ``backward`` simply
walks it in reverse.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these route through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __getitem__(self, idx):
        return slice_tensor(self, idx)


def _not_scalar():
    raise ShapeError("item() needs a single-element tensor")


class Tape:
    """Ordered record of differentiable ops executed while it is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


@contextmanager
def use_tape(tape: Tape):
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(out, op)
    res = Tensor(out)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        res.requires_grad = True
        res._parents = tuple(parents)
        res._backward = backward
        _state.tape.nodes.append(res)
    return res


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str = "custom") -> Tensor:
    """Register an op whose forward was computed elsewhere.

    ``backward(g)`` receives the output gradient and must call
    :func:`accumulate` on each parent that needs it.
    """
    return _make(np.asarray(data, dtype=np.float64), parents, backward, op)


accumulate = _accum


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Same-shape add, or a trailing-dimension bias add (``b.shape == a.shape[-k:]``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            _accum(a, g)
            _accum(b, g)
        return _make(a.data + b.data, (a, b), backward, "add")
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))

        def backward(g):
            _accum(a, g)
            _accum(b, g.sum(axis=lead))
        return _make(a.data + b.data, (a, b), backward, "add")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a python number."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def backward(g):
            _accum(a, g * c)
        return _make(a.data * c, (a,), backward, "mul")
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` (..., m, k) and ``b`` either (k, n) or (..., k, n) with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)
    return _make(x.data * mask, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th ** 2) * du
        _accum(x, g * d)
    return _make(out, (x,), backward, "gelu")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))
    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        _accum(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))
    return _make(out, (x,), backward, "log_softmax")


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray:
    """Max-shifted logsumexp on raw arrays; all -inf slices give -inf."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm: gamma/beta must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# indexing / shape
# ---------------------------------------------------------------------------


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embed_lookup: table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embed_lookup: id out of range")

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, gt)
    return _make(table.data[ids], (table,), backward, "embed_lookup")


def pick(x: Tensor, ids) -> Tensor:
    """Gather along the last axis: ``out[...] = x[..., ids[...]]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} vs {x.shape}")
    idx = np.expand_dims(ids, -1)
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, -1), axis=-1)
        _accum(x, gx)
    return _make(out, (x,), backward, "pick")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError("concat: shapes differ outside the concat axis")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(x, g[tuple(sl)])
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, backward, "concat")


def slice_tensor(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)
    return _make(np.array(out, dtype=np.float64), (x,), backward, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))
    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inv))
    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def repeat(x: Tensor, reps: int, axis: int) -> Tensor:
    """``np.repeat`` along one axis (each element repeated ``reps`` times in place)."""
    ax = axis % x.ndim
    out = np.repeat(x.data, reps, axis=ax)

    def backward(g):
        shp = x.shape[:ax] + (x.shape[ax], reps) + x.shape[ax + 1:]
        _accum(x, g.reshape(shp).sum(axis=ax + 1))
    return _make(out, (x,), backward, "repeat")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))
    return _make(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable bool) is set; they get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)

    def backward(g):
        _accum(x, np.where(mask, 0.0, g))
    return _make(out, (x,), backward, "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accum(x, g * keep)
    return _make(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# backward / checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape if tape is not None else _state.tape
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise RuntimeError("backward called on an empty tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
        # interior nodes are dead after this point
        node._backward = None
        node._parents = ()
        node.grad = None if node is not loss else node.grad
    tape.clear()


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
               tol: float = 1e-5, floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero entries from amplifying rounding noise.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    with use_tape(tape):
        xt = Tensor(x.copy(), requires_grad=True)
        out = f(xt)
        if out.requires_grad:
            backward(out, tape)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(x.copy())).item()
            flat[i] = old - eps
            fm = f(Tensor(x.copy())).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(analytic, numeric, np.abs(analytic - numeric) / denom, tol)
