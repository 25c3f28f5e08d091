"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`DiffArray`. When any input requires a
gradient (and gradient recording is enabled for the current thread), the
output remembers its inputs and a closure mapping the output gradient to
input gradients. :func:`backward` orders those records topologically and
replays them in reverse.

Only the broadcasting the toy models need is supported: numpy-style
broadcasting in elementwise ops, with gradients summed back to the operand
shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BoundsError, ContractError, NumericError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DiffArray:
    """A dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"DiffArray({self.data!r}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise ContractError("division by a DiffArray is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def parameter(data, name: str = "") -> DiffArray:
    return DiffArray(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _result(data, parents: tuple[DiffArray, ...], backward_fn, op: str) -> DiffArray:
    out = DiffArray(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- tape and backward ---------------------------------------------------------
class Tape:
    """Operations reachable from a root, in topological (forward) order.

    Leaves are not recorded; each recorded node appears exactly once.
    """

    def __init__(self, root: DiffArray):
        self.root = root
        self.nodes: list[DiffArray] = []
        self.leaves: list[DiffArray] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on deep graphs
        stack: list[tuple[DiffArray, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node.is_leaf:
                    self.leaves.append(node)
                else:
                    self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: DiffArray) -> Tape:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate across calls; call ``zero_grad`` in between
    for fresh values.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any array that requires grad")
    tape = Tape(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for leaf in tape.leaves:
        g = pending.pop(id(leaf), None)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return tape


# -- elementwise -----------------------------------------------------------------
def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a, c: float) -> DiffArray:
    a = as_array(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> DiffArray:
    a = as_array(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> DiffArray:
    a = as_array(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip_min(a, floor: float) -> DiffArray:
    """max(a, floor); the gradient is passed only where a >= floor."""
    a = as_array(a)
    keep = a.data >= floor
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * keep,), "clip_min")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> DiffArray:
    # tanh approximation
    a = as_array(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1.0 + t)

    def _bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(y, (a,), _bw, "gelu")


# -- reductions and shape ------------------------------------------------------
def sum_(a, axis=None, keepdims=False) -> DiffArray:
    a = as_array(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(y, (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False) -> DiffArray:
    a = as_array(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> DiffArray:
    a = as_array(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DiffArray:
    a = as_array(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i: int, j: int) -> DiffArray:
    a = as_array(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def concat(arrays: Iterable, axis: int = 0) -> DiffArray:
    arrays = tuple(as_array(x) for x in arrays)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([x.data for x in arrays], axis=axis),
        arrays,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


# -- indexing --------------------------------------------------------------------
def _check_indices(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise BoundsError(f"index out of range for axis of length {n}")


def gather(a, indices, axis: int = -1) -> DiffArray:
    """Select entries along ``axis``; gradients are routed back to the picked positions."""
    a = as_array(a)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    _check_indices(idx, a.shape[ax])
    if ax != 0 and idx.ndim != 1:
        raise ContractError("multi-dimensional indices are only supported on axis 0")
    y = np.take(a.data, idx, axis=ax)

    def _bw(g):
        full = np.zeros_like(a.data)
        if ax == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(y, (a,), _bw, "gather")


def getitem(a, key) -> DiffArray:
    a = as_array(a)
    y = a.data[key]

    basic = all(isinstance(k, (int, np.integer, slice, type(None), type(Ellipsis)))
                for k in (key if isinstance(key, tuple) else (key,)))

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(y, dtype=np.float64), (a,), _bw, "getitem")


def sort_descending_indices(values) -> np.ndarray:
    """Permutation sorting ``values`` descending; ties keep ascending index order.

    Not differentiable: the result is a plain integer array.
    """
    v = values.data if isinstance(values, DiffArray) else np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if np.isnan(v).any():
        raise NumericError("cannot sort NaN values")
    return np.argsort(-v, kind="stable")


@lru_cache(maxsize=None)
def pair_indices(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (m, n) of all pairs m < n, lexicographic order."""
    m, n = np.triu_indices(k, 1)
    m.setflags(write=False)
    n.setflags(write=False)
    return m, n


# -- linear algebra ----------------------------------------------------------------
def matmul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _bw, "matmul")


# -- normalizers --------------------------------------------------------------------
def _check_softmax_args(x: np.ndarray, temperature: float) -> None:
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if x.size == 0:
        raise ContractError("softmax of an empty array")
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")


def softmax(z, temperature: float = 1.0, axis: int = -1) -> DiffArray:
    """Temperature-scaled softmax along ``axis`` with max subtraction."""
    z = as_array(z)
    _check_softmax_args(z.data, temperature)
    s = (z.data - z.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(s)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return _result(y, (z,), _bw, "softmax")


def log_softmax(z, temperature: float = 1.0, axis: int = -1) -> DiffArray:
    z = as_array(z)
    _check_softmax_args(z.data, temperature)
    s = (z.data - z.data.max(axis=axis, keepdims=True)) / temperature
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    y = s - lse

    def _bw(g):
        p = np.exp(y)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _result(y, (z,), _bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis, then apply gain and bias."""
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def _bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), _bw, "layer_norm")


# -- finite differences ----------------------------------------------------------
def finite_diff_gradient(f: Callable[[np.ndarray], float], at, eps: float = 1e-6,
                         coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    ``coords`` restricts the estimate to a subset of flat coordinates; the
    returned array then has one entry per requested coordinate.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    x = np.array(at, dtype=np.float64).reshape(-1)
    idx = range(x.size) if coords is None else coords
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = x[i]
        x[i] = orig + eps
        fp = float(f(x.copy()))
        x[i] = orig - eps
        fm = float(f(x.copy()))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"function is not finite near coordinate {i}")
        out[j] = (fp - fm) / (2 * eps)
    return out


def gradients_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-6) -> tuple[bool, float]:
    """Check |a - n| <= max(rtol * |n|, atol) elementwise; also return the worst ratio."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    budget = np.maximum(rtol * np.abs(n), atol)
    ratio = np.abs(a - n) / budget
    worst = float(ratio.max()) if ratio.size else 0.0
    return worst <= 1.0, worst
