"""Tape-based reverse-mode differentiation.

A :class:`Tape` records one node per differentiable op in execution order;
:func:`backward` walks the nodes in strict reverse order. Ops live in
:mod:`superscan.functional`; they return plain arrays when no input needs a
gradient, so inference never touches the tape.

Typical use::

    with Tape():
        w = Variable(weights)
        loss = F.sum(F.silu(w))
        grads = backward(loss)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import precision

_TAPES: list["Tape"] = []
_RELAXED = [False]


class Tape:
    """Append-only node list. Cleared after each backward pass."""

    def __init__(self):
        self.nodes: list[tuple[str, tuple, int, Callable]] = []
        self.leaves: dict[int, Variable] = {}
        self._next = 0
        self._consumed = False

    def _new_id(self) -> int:
        self._next += 1
        return self._next

    def record(self, kind: str, inputs: tuple, out_id: int, fn: Callable) -> None:
        self.nodes.append((kind, inputs, out_id, fn))
        self._consumed = False

    def clear(self) -> None:
        self.nodes.clear()
        self.leaves.clear()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_DEFAULT = Tape()


def current_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT


class Variable:
    """A value bound to a tape. Leaves are created directly; op outputs by ops."""

    __array_priority__ = 1000
    __slots__ = ("value", "grad", "requires_grad", "id", "tape")

    def __init__(self, value, requires_grad: bool = True, tape: Tape | None = None):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape or current_tape()
        self.id = self.tape._new_id()
        if requires_grad:
            self.tape.leaves[self.id] = self

    @classmethod
    def _from_op(cls, value, tape: Tape) -> "Variable":
        v = cls.__new__(cls)
        v.value = value
        v.grad = None
        v.requires_grad = True
        v.tape = tape
        v.id = tape._new_id()
        return v

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, id={self.id})"

    # operator sugar; implementations in functional
    def __add__(self, o):
        return _F().add(self, o)

    def __radd__(self, o):
        return _F().add(o, self)

    def __sub__(self, o):
        return _F().sub(self, o)

    def __rsub__(self, o):
        return _F().sub(o, self)

    def __mul__(self, o):
        return _F().mul(self, o)

    def __rmul__(self, o):
        return _F().mul(o, self)

    def __truediv__(self, o):
        return _F().div(self, o)

    def __rtruediv__(self, o):
        return _F().div(o, self)

    def __neg__(self):
        return _F().neg(self)

    def __matmul__(self, o):
        return _F().matmul(self, o)

    def __rmatmul__(self, o):
        return _F().matmul(o, self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return _F().square(self)

    def __getitem__(self, idx):
        return _F().getitem(self, idx)

    def reshape(self, *shape):
        return _F().reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return _F().transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return _F().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _F().mean(self, axis, keepdims)


def _F():
    from . import functional
    return functional


def value(x):
    return x.value if isinstance(x, Variable) else x


def needs_grad(x) -> bool:
    return isinstance(x, Variable) and x.requires_grad


def make(kind: str, out: np.ndarray, inputs: tuple, fn: Callable):
    """Wrap an op result, recording ``fn(g) -> per-input grads`` if needed."""
    tracked = [x for x in inputs if needs_grad(x)]
    if not tracked:
        return out
    tape = tracked[0].tape
    res = Variable._from_op(out, tape)
    ids = tuple(x.id if needs_grad(x) else None for x in inputs)
    tape.record(kind, ids, res.id, fn)
    return res


def backward(loss: Variable) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf of the loss's tape and return them by id."""
    if not isinstance(loss, Variable):
        raise TypeError("loss does not depend on any Variable")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    tape = loss.tape
    if tape._consumed:
        raise RuntimeError("tape already consumed by backward; re-record the forward pass")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for _kind, inputs, out_id, fn in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for pid, pg in zip(inputs, fn(g)):
            if pid is None or pg is None:
                continue
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    result = {}
    for lid, leaf in tape.leaves.items():
        g = grads.get(lid)
        if g is None:
            g = np.zeros_like(leaf.value)
        else:
            g = np.broadcast_to(g, leaf.value.shape).astype(leaf.value.dtype, copy=True)
        leaf.grad = g
        result[lid] = g
    tape.nodes.clear()
    tape._consumed = True
    return result


# -- straight-through ------------------------------------------------------------

@contextlib.contextmanager
def relaxed():
    """Make :func:`straight_through` return its soft input (finite-difference oracle path)."""
    old = _RELAXED[0]
    _RELAXED[0] = True
    try:
        yield
    finally:
        _RELAXED[0] = old


def is_relaxed() -> bool:
    return _RELAXED[0]


def straight_through(forward, soft):
    """Value of ``forward``, gradient of ``soft``."""
    fwd = np.asarray(value(forward))
    sv = value(soft)
    if fwd.shape != sv.shape:
        raise ValueError(f"straight_through: forward {fwd.shape} vs soft {sv.shape}")
    if _RELAXED[0]:
        return soft
    out = fwd.astype(sv.dtype, copy=True)
    return make("straight_through", out, (soft,), lambda g: (g,))


# -- finite-difference certification --------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_index: tuple | None
    n_checked: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _scalar(out) -> float:
    v = np.asarray(value(out))
    if v.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {v.shape}")
    s = float(v.reshape(()))
    if not np.isfinite(s):
        raise FloatingPointError("function returned a non-finite value")
    return s


def grad_check(f: Callable, x, eps: float = 1e-5, coords=None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Runs in float64. ``coords`` restricts the check to a list of flat indices.
    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    with precision(np.float64):
        x = np.array(x, dtype=np.float64)
        with Tape():
            v = Variable(x)
            out = f(v)
            _scalar(out)
            if isinstance(out, Variable):
                analytic = backward(out)[v.id].reshape(-1)
            else:
                analytic = np.zeros(x.size)
        flat = x.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst, where, n = 0.0, None, 0
        for i in idx:
            xp = flat.copy()
            xp[i] += eps
            fp = _scalar(f(xp.reshape(x.shape)))
            xp[i] -= 2 * eps
            fm = _scalar(f(xp.reshape(x.shape)))
            num = (fp - fm) / (2 * eps)
            a = analytic[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            n += 1
            if err > worst or where is None:
                worst, where = err, np.unravel_index(i, x.shape)
        return GradCheckReport(worst, tuple(int(k) for k in where) if where else None, n)
