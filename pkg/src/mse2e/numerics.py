"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when a tape is
open and at least one input requires a gradient, so inference code pays no
bookkeeping cost.  Gradients of intermediate nodes live in a side table during
:func:`backward`; only leaves (tensors created directly with
``requires_grad=True``) keep a ``.grad`` buffer, which accumulates across calls
until :func:`zero_grad` is used.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    receives new records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _active() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result and record it when anything upstream needs grads.

    ``backward(g)`` returns one gradient (or None) per entry of ``inputs``.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, backward))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active()
    if tape is None:
        raise ContractError("no tape is active; run the forward pass inside `with Tape():`")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE, copy=True).reshape(t.shape)
                else:
                    t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    if loss._leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor, axis=None) -> Tensor:
    y = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(y, dtype=DTYPE), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


def _lse(v: np.ndarray, axis=-1, keepdims=False) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_sum_exp(values):
    """log(sum(exp(values))) with max-shift.

    Plain numbers or arrays give a float; a list of scalar tensors or a
    1-D tensor gives a differentiable scalar tensor.  All ``-inf`` input
    returns ``-inf``.
    """
    if isinstance(values, Tensor):
        return logsumexp(values)
    values = list(values) if not isinstance(values, np.ndarray) else values
    if len(values) == 0:
        raise ContractError("log_sum_exp of an empty sequence")
    if isinstance(values, list) and any(isinstance(v, Tensor) for v in values):
        return logsumexp(stack([as_tensor(v) for v in values]))
    return float(_lse(np.asarray(values, dtype=DTYPE).ravel(), axis=0))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0:
        raise ContractError("log_sum_exp of an empty sequence")
    y = _lse(x.data, axis=axis)

    def bw(g):
        yk = np.expand_dims(y, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - yk)
        w = np.nan_to_num(w)
        return (np.expand_dims(g, axis) * w,)

    return _make(np.asarray(y, dtype=DTYPE), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - _lse(x.data, axis=axis, keepdims=True)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


# ---------------------------------------------------------------- linear alg.

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    y = a.data @ b.data

    def bw(g):
        A, B = a.data, b.data
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g * B, g * A

    return _make(y, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias); weight is stored out x in."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def bw(g):
        gx = g @ weight.data
        g2 = g if g.ndim == 2 else g[None, :]
        x2 = x.data if x.data.ndim == 2 else x.data[None, :]
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, inputs, bw)


# -------------------------------------------------------------- restructuring

def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def bw(g):
        out = np.zeros_like(x.data)
        if _fancy(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(np.array(y, dtype=DTYPE), (x,), bw)


def _fancy(index) -> bool:
    if isinstance(index, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in index)
    return isinstance(index, (list, np.ndarray))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    y = np.transpose(x.data, axes)

    def bw(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make(y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(y, tuple(tensors), bw)


# ---------------------------------------------------------------- diagnostics

def numeric_grad(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maximised."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def norm_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a-b|| / max(||a||, ||b||, floor) over the whole array."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                   eps: float = 1e-5) -> dict[str, float]:
    """Norm-wise relative error between tape gradients and central differences.

    ``loss_fn`` builds a scalar loss from the current parameter values; it is
    called once under a tape and twice per parameter entry without one.
    """
    tensors = [t for _, t in params]
    zero_grad(tensors)
    with Tape() as tape:
        loss = loss_fn()
        backward(loss, tape)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}
    out = {}
    for name, t in params:
        fd = numeric_grad(lambda: float(loss_fn().data), t, eps)
        out[name] = norm_relative_error(analytic[name], fd)
    return out


NEG_INF = -math.inf
