"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching a tensor with ``requires_grad`` are recorded in execution
order, which is already a topological order for the reverse sweep.  Outside
a tape, operations just compute values.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor."""
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def record(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of an op; ``backward(g)`` returns one grad per input."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def grad(loss: Tensor, tape: Tape, tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``tensors``; zero for tensors the loss does not reach."""
    for t in tensors:
        t.grad = None
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def _need(t: Tensor, value: np.ndarray, shape) -> np.ndarray | None:
    return _unbroadcast(value, shape) if t.requires_grad else None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return record(a.data + b.data, (a, b),
                  lambda g: (_need(a, g, a.shape), _need(b, g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return record(a.data - b.data, (a, b),
                  lambda g: (_need(a, g, a.shape), _need(b, -g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return record(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return record(a.data * c, (a,), lambda g: (g * c,))


def matvec(M, v) -> Tensor:
    M, v = as_tensor(M), as_tensor(v)
    if M.data.ndim != 2 or v.data.ndim != 1 or M.shape[1] != v.shape[0]:
        raise ValueError(f"matvec shape mismatch: {M.shape} @ {v.shape}")
    return record(M.data @ v.data, (M, v),
                  lambda g: (np.outer(g, v.data) if M.requires_grad else None,
                             M.data.T @ g if v.requires_grad else None))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 1:
        return matvec(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T if a.requires_grad else None,
                             a.data.T @ g if b.requires_grad else None))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Tensor:
    """Basic slicing, or gathering rows with an integer index array."""
    a = as_tensor(a)
    if isinstance(index, np.ndarray) and index.dtype.kind in "iu":
        return gather_rows(a, index)
    value = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return record(value, (a,), backward)


def gather_rows(a, index: np.ndarray, scatter: sp.spmatrix | None = None) -> Tensor:
    """``a[index]`` along the first axis; repeated indices accumulate on the way back.

    ``scatter`` may pass the precomputed (len(a), len(index)) 0/1 matrix used
    by the backward pass.
    """
    a = as_tensor(a)
    index = np.asarray(index)
    n = a.shape[0]

    def backward(g):
        S = scatter
        if S is None:
            S = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
        return (np.asarray(S @ g.reshape(len(index), -1)).reshape((n,) + a.shape[1:]),)

    return record(a.data[index], (a,), backward)


def scatter_rows(base, index: np.ndarray, values) -> Tensor:
    """Copy of ``base`` with rows ``index`` (unique) replaced by ``values``."""
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index)
    out = base.data.copy()
    out[index] = values.data

    def backward(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[index] = 0.0
        return gb, g[index] if values.requires_grad else None

    return record(out, (base, values), backward)


def spmm(M: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a tensor (vector or matrix)."""
    x = as_tensor(x)
    if M.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {M.shape} @ {x.shape}")
    MT = None

    def backward(g):
        nonlocal MT
        if MT is None:
            MT = M.T.tocsr()
        return (np.asarray(MT @ g),)

    return record(np.asarray(M @ x.data), (x,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        out = t * t
        np.subtract(1.0, out, out=out)
        out *= g
        return (out,)

    return record(t, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(value, (a,), backward)


def weighted_sq_residual(A: sp.spmatrix, b: np.ndarray, u, weights: np.ndarray | None = None) -> Tensor:
    """sum_i w_i (-b_i + sum_j a_ij u_j)^2 with A kept sparse."""
    u = as_tensor(u)
    r = A @ u.data - b
    w = np.ones_like(r) if weights is None else weights
    return record(np.array(np.sum(w * r * r)), (u,), lambda g: (A.T @ (2.0 * g * w * r),))


# ---------------------------------------------------------------------------
# checks


def finite_diff_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Largest |analytic - numeric| / (|analytic| + |numeric| + 1e-12) over all entries.

    ``fn`` maps the parameter tensors to a scalar tensor; numeric derivatives
    are central differences with the given step.
    """
    with Tape() as tape:
        loss = fn(params)
    analytic = grad(loss, tape, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(fn(params).data)
            flat[k] = orig - step
            fm = float(fn(params).data)
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            a = ga.reshape(-1)[k]
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst
