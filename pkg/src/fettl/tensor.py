"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is stored row-major as a numpy float64 array. Operations that
see a gradient-requiring input record their parents and a backward rule on
the output tensor; ``backward`` replays the recorded graph in reverse
topological order, visiting each node exactly once, and accumulates
gradients into the participating leaves.

Design notes:
  * float64 only -- the covariance math downstream needs the precision and
    finite-difference checks would be hopeless in float32;
  * no views or striding, copies everywhere -- keeps backward rules simple;
  * broadcasting follows numpy, gradients are summed back down to the
    parent's shape;
  * conv2d uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, InvalidInputError

Scalar = Union[int, float]

_grad_enabled = True
_tid_counter = itertools.count()


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for autodiff.

    A tensor is immutable after creation except for its ``grad`` buffer.
    Gradients accumulate across repeated backward calls; call ``zero_grad``
    to reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tid = next(_tid_counter)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._parents == ()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        data = a.data + b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(data, (a, b), "add", bw)

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        data = a.data - b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(data, (a, b), "sub", bw)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        data = a.data * b.data

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(data, (a, b), "mul", bw)

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        data = a.data / b.data

        def bw(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._from_op(data, (a, b), "div", bw)

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g):
            return (-g,)

        return Tensor._from_op(-a.data, (a,), "neg", bw)

    def __radd__(self, other):
        return _as_tensor(other) + self

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __rmul__(self, other):
        return _as_tensor(other) * self

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, p: Scalar) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        a = self
        data = a.data ** p

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._from_op(data, (a,), f"pow{p}", bw)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def bw(g):
            return (g * data,)

        return Tensor._from_op(data, (a,), "exp", bw)

    def log(self) -> "Tensor":
        a = self
        data = np.log(a.data)

        def bw(g):
            return (g / a.data,)

        return Tensor._from_op(data, (a,), "log", bw)

    def abs(self) -> "Tensor":
        a = self
        data = np.abs(a.data)

        def bw(g):
            return (g * np.sign(a.data),)

        return Tensor._from_op(data, (a,), "abs", bw)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        data = np.where(mask, a.data, 0.0)

        def bw(g):
            return (g * mask,)

        return Tensor._from_op(data, (a,), "relu", bw)

    def sigmoid(self) -> "Tensor":
        a = self
        data = _stable_sigmoid(a.data)

        def bw(g):
            return (g * data * (1.0 - data),)

        return Tensor._from_op(data, (a,), "sigmoid", bw)

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        a = self
        shape = tuple(shape)
        data = a.data.reshape(shape).copy()

        def bw(g):
            return (g.reshape(a.shape),)

        return Tensor._from_op(data, (a,), "reshape", bw)

    def transpose(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f"transpose expects a 2-d tensor, got shape {self.shape}")
        a = self

        def bw(g):
            return (g.T.copy(),)

        return Tensor._from_op(a.data.T.copy(), (a,), "transpose", bw)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        axis_t = _norm_axis(axis, a.ndim)
        data = a.data.sum(axis=axis_t, keepdims=keepdims)

        def bw(g):
            return (_spread(g, a.shape, axis_t, keepdims),)

        return Tensor._from_op(data, (a,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        axis_t = _norm_axis(axis, a.ndim)
        count = _reduced_count(a.shape, axis_t)
        data = a.data.mean(axis=axis_t, keepdims=keepdims)

        def bw(g):
            return (_spread(g, a.shape, axis_t, keepdims) / count,)

        return Tensor._from_op(data, (a,), "mean", bw)

    # -- linear algebra ---------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient contributions back down to the parent's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduced_count(shape: tuple, axis_t) -> float:
    if axis_t is None:
        return float(np.prod(shape)) if shape else 1.0
    return float(np.prod([shape[a] for a in axis_t]))


def _spread(g: np.ndarray, shape: tuple, axis_t, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis_t is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        kshape = list(shape)
        for a in axis_t:
            kshape[a] = 1
        g = g.reshape(kshape)
    return np.broadcast_to(g, shape).copy()


# -- free-function operations ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes are incompatible: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(data, (a, b), "matmul", bw)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` (C,H,W or N,C,H,W) with an O,C,k,k kernel bank."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InvalidInputError(f"padding must be >= 0, got {padding}")
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be 4-d (O,C,k,k), got shape {kernels.shape}")
    if x.ndim == 3:
        out4 = _conv2d_batched(x.reshape((1,) + x.shape), kernels, stride, padding)
        return out4.reshape(out4.shape[1:])
    if x.ndim == 4:
        return _conv2d_batched(x, kernels, stride, padding)
    raise DimensionError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")


def _conv2d_batched(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c} channels, kernels expect {ci}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data

    out = np.zeros((n, co, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.tensordot(patch, w.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2))
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return Tensor._from_op(out, (x, w), "conv2d", bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the trailing two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"upsample2x needs at least 2 dims, got shape {x.shape}")
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]

    def bw(g):
        return (g.reshape(lead + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return Tensor._from_op(data, (x,), "upsample2x", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(piece.copy() for piece in np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(tensors), "concat", bw)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("stack needs at least one tensor")
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


def reduce(x: Tensor, kind: str) -> Tensor:
    """Reduce a tensor: ``sum``, ``mean``, or per-channel spatial ``channel_mean``."""
    x = _as_tensor(x)
    if x.size == 0:
        raise InvalidInputError("cannot reduce an empty tensor")
    if kind == "sum":
        return x.sum()
    if kind == "mean":
        return x.mean()
    if kind == "channel_mean":
        if x.ndim != 3:
            raise DimensionError(
                f"channel_mean expects a CxHxW tensor, got shape {x.shape}")
        return x.mean(axis=(1, 2))
    raise InvalidInputError(f"unknown reduce kind: {kind!r}")


# -- reverse pass ---------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss.

    Returns ``{leaf tid -> gradient array}`` for every gradient-requiring
    leaf reachable from the loss, and accumulates the same gradients into
    each leaf's ``grad`` buffer. Repeated calls keep accumulating until
    ``zero_grad``.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    topo = _toposort(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    by_id = {id(loss): loss}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
                by_id[pid] = p

    result: dict = {}
    for node in topo:
        if node.requires_grad and node.is_leaf():
            g = grads.get(id(node))
            if g is None:
                continue
            g = np.asarray(g).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node.tid] = g
    return result
