"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds a node only when one of its inputs requires a
gradient, so forward passes through frozen weights (the EMA teacher, the
reference embedder) leave no trace in any graph.

    >>> w = Parameter(np.array([1.0, 2.0]), name="w")
    >>> loss = (w * w).sum() * 0.5
    >>> backprop(loss, {"w": w})["w"]
    array([1., 2.])
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PARAM_GROUPS = ("encoder", "pixel_decoder", "segment_decoder", "head")


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _vjp=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf belonging to exactly one parameter group."""

    __slots__ = ("name", "group")

    def __init__(self, data, name: str, group: str = "encoder"):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, group={self.group}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {a.shape[axis]}")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, (slice(None),) * (axis % a.ndim) + (idx,), g)
        return (out,)

    return _node(np.take(a.data, idx, axis=axis), (a,), vjp, "take")


def mask_select(a, mask: np.ndarray) -> Tensor:
    """Select trailing positions where ``mask`` is true: (..., *mask.shape) -> (..., n)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    lead = a.ndim - mask.ndim
    if lead < 0 or a.shape[lead:] != mask.shape:
        raise ShapeError(f"mask_select: mask {mask.shape} does not match trailing dims of {a.shape}")

    def vjp(g):
        out = np.zeros(a.shape)
        out[(Ellipsis, mask)] = g
        return (out,)

    return _node(a.data[(Ellipsis, mask)], (a,), vjp, "mask_select")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# reductions

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / n)


# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def l2_normalize(a, axis: int, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm
    return _node(y, (a,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,), "l2_normalize")


# convolutional primitives

def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on ``(B, Cin, H, W)`` inputs."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    cols = kernels.im2col3x3(x.data, stride)
    Ho, Wo = cols.shape[-2:]
    cmat = cols.reshape(B, Cin * 9, Ho * Wo)
    wmat = w.data.reshape(Cout, Cin * 9)
    out = (wmat @ cmat).reshape(B, Cout, Ho, Wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, Cout, 1, 1)
        parents.append(b)

    def vjp(g):
        gm = g.reshape(B, Cout, Ho * Wo)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(B, Cin, 3, 3, Ho, Wo)
            gx = kernels.col2im3x3(gcols, H, W, stride)
        gw = np.matmul(gm, cmat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, tuple(parents), vjp, "conv2d")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour x2 upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def vjp(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return _node(out, (x,), vjp, "upsample2x")


def batch_norm(x, running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               training: bool = True, update_stats: bool = True, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation of ``(B, C, H, W)`` without affine terms.

    In training mode batch statistics are used and, when ``update_stats`` is
    set, the running buffers are updated in place. Inference mode uses the
    running buffers.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (B, C, H, W), got {x.shape}")
    axes = (0, 2, 3)
    if training:
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats and running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.ravel()
            running_var *= 1.0 - momentum
            running_var += momentum * var.ravel() * (n / max(n - 1, 1))

        def vjp(g):
            gm = g.mean(axis=axes, keepdims=True)
            gxm = (g * xhat).mean(axis=axes, keepdims=True)
            return (inv * (g - gm - xhat * gxm),)

        return _node(xhat, (x,), vjp, "batch_norm")
    if running_mean is None:
        raise ValueError("batch_norm: inference mode needs running statistics")
    rm = running_mean.reshape(1, -1, 1, 1)
    inv = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
    return _node((x.data - rm) * inv, (x,), lambda g: (g * inv,), "batch_norm_eval")


# differentiation

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, params: Mapping[str, Tensor]) -> dict:
    """Gradient of a scalar ``loss`` with respect to every tensor in ``params``.

    Parameters unreachable from ``loss`` get zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
    return out


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      epsilon: float = 1e-6, floor: float = 1e-12,
                      names: Iterable[str] | None = None) -> float:
    """Worst coordinate-wise relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    have no side effects (e.g. no running-statistics updates).
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    analytic = backprop(loss_fn(), params)
    worst = 0.0
    for name in (names if names is not None else params):
        p = params[name]
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi, lo = orig + epsilon, orig - epsilon
            flat[i] = hi
            lp = float(loss_fn().data)
            flat[i] = lo
            lm = float(loss_fn().data)
            flat[i] = orig
            # divide by the representable step, not the nominal 2*epsilon
            gn = (lp - lm) / (hi - lo)
            err = abs(gn - ga[i]) / max(abs(gn), abs(ga[i]), floor)
            worst = max(worst, err)
    return worst
