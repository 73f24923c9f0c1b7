"""Dense tensors with reverse-mode differentiation.

Every tensor wraps a numpy array. Operations on tracked tensors record a
closure that pushes the output gradient back to the inputs; ``backward``
walks the recorded graph once in reverse topological order.

Broadcasting follows numpy rules, and gradients are summed back to the
input shapes.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {32: np.float32, 64: np.float64}

_node_ids = itertools.count()
_kink_watch: list[float] | None = None


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class StaleGraphError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap ``data`` as the result of ``op``.

        ``backward(g)`` receives the output gradient and must return one
        gradient array (or None) per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.op = op
        out._consumed = False
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def mT(self):
        return swap_last(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers, so leaves must be
    cleared between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("backward already ran on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    loss._consumed = True


# ----------------------------------------------------------------------
# kink bookkeeping for gradient checks


@contextlib.contextmanager
def watch_kinks():
    """Collect distances of relu inputs and threshold gaps from their kinks.

    Yields a list; after the block, ``min(list)`` is the closest approach of
    any non-differentiable point seen during the forward passes inside it.
    """
    global _kink_watch
    prev = _kink_watch
    _kink_watch = []
    try:
        yield _kink_watch
    finally:
        _kink_watch = prev


def note_kink(distances: np.ndarray) -> None:
    if _kink_watch is not None and distances.size:
        _kink_watch.append(float(np.min(distances)))


# ----------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return Tensor.from_op(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 array; no gradient reaches the mask."""
    keep = np.asarray(keep, dtype=a.dtype)
    if keep.shape != a.shape:
        raise DimensionError(f"mask shape {keep.shape} does not match {a.shape}")
    return Tensor.from_op(a.data * keep, (a,), lambda g: (g * keep,), "mask")


# ----------------------------------------------------------------------
# unary elementwise


def relu(a: Tensor) -> Tensor:
    note_kink(np.abs(a.data))
    pos = a.data > 0
    return Tensor.from_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def tabs(a: Tensor) -> Tensor:
    # exact zeros are nearly always structural (relu output, masked entries)
    note_kink(np.abs(a.data[a.data != 0]))
    sign = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = out == x
    return Tensor.from_op(out, (a,), lambda g: (g * inside,), "clamp")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return Tensor.from_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(kind: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch one of relu, sigmoid, tanh, multiply, add, scale."""
    if kind in _UNARY:
        (x,) = inputs
        return _UNARY[kind](x)
    if kind == "multiply":
        return mul(*inputs)
    if kind == "add":
        return add(*inputs)
    if kind == "scale":
        (x,) = inputs
        return scale(x, factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ----------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    return Tensor.from_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def flip(a: Tensor, axis: int) -> Tensor:
    return Tensor.from_op(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"batch axes of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 2 and ad.shape[:-1] == g.shape[:-1]:
            # weight matrix shared across the batch: fold leading axes
            k, n = bd.shape
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), bw, "matmul")


# ----------------------------------------------------------------------
# fused normalisations


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), bw, "softmax")


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain {gain.shape} / bias {bias.shape} do not match feature size {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xd - mu) * inv
    gd = gain.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor.from_op(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def l1_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Divide by the sum of absolute values along ``axis``; zero slices stay zero."""
    denom = tsum(tabs(a), axis=axis, keepdims=True)
    empty = (denom.data == 0).astype(a.dtype)
    return div(a, add(denom, Tensor(empty)))


# ----------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``x`` is perturbed in place one coordinate at a time, so ``f`` may also
    reach it through a closure. The relative gap for a coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    if not x.requires_grad:
        raise ContractError("grad_check needs a tracked tensor")
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    x.grad = None
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * step)
    a = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
