"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a node that remembers its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Reductions always run in index order, so repeated
runs on the same inputs are bitwise identical.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


class NumericError(FloatingPointError):
    """A non-finite value showed up in a forward or backward pass."""


_DEBUG = False
_ACTIVATION_WATCH: list | None = None


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks after every op (slow)."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextmanager
def watch_kinks():
    """Record the sign pattern of every ReLU input evaluated inside the block.

    Used by the gradient checker to discard finite-difference probes that
    straddle a non-differentiable point.
    """
    global _ACTIVATION_WATCH
    prev = _ACTIVATION_WATCH
    _ACTIVATION_WATCH = []
    try:
        yield _ACTIVATION_WATCH
    finally:
        _ACTIVATION_WATCH = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value produced by {name or 'op'}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if _DEBUG and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at {node.name or 'op'}")
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, name: str) -> Tensor:
    parents = tuple(parents)
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data, name=name)
    return Tensor(data, name=name, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _ACTIVATION_WATCH is not None:
        _ACTIVATION_WATCH.append(mask.copy())
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _node(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep strictly inside (0, 1) even where exp saturates
    tiny = np.finfo(z.dtype).tiny
    np.clip(out, tiny, 1.0 - np.finfo(z.dtype).epsneg, out=out)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward, "sigmoid")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def backward(g):
        return (g * x.data.dtype.type(c),)

    return _node(out, (x,), backward, "scale")


# ----------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return _node(out, (x,), backward, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(x.data, a, b)

    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _node(out, (x,), backward, "swapaxes")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        bad = [i for i in range(len(ref)) if i != axis % len(ref) and x.shape[i] != ref[i]]
        if len(x.shape) != len(ref) or bad:
            raise DimensionError(f"concat: shapes {ref} and {x.shape} differ on axes {bad}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, xs, backward, "concat")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 on the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), backward, "upsample2x")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape[-1]} and {b.shape[-2]} differ")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last patches: (N·ho·wo, k·k·C) from padded N×H×W×C input."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of N×C×H×W input with O×C×k×k weights."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be N×C×H×W, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != weight in-channels (axis 1) {cw}")
    if k != k2:
        raise DimensionError(f"conv2d: kernel axes 2,3 differ ({k} vs {k2})")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * pad - k, w + 2 * pad - k
    if hp < 0 or wp < 0 or hp % stride or wp % stride:
        raise DimensionError(
            f"conv2d: spatial axes (2,3) size {h}x{w} incompatible with k={k}, stride={stride}, pad={pad}")
    ho, wo = hp // stride + 1, wp // stride + 1
    # weight columns ordered (ki, kj, c) to match channels-last patches
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    x_nhwc = x.data.transpose(0, 2, 3, 1)
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.data.dtype)
        xp[:, pad:pad + h, pad:pad + w, :] = x_nhwc
    else:
        xp = np.ascontiguousarray(x_nhwc)
    cols = xp.reshape(n * h * w, c) if k == 1 and stride == 1 else _im2col(xp, k, stride, ho, wo)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    out = np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if _needs_grad(x):
            gcols = gm @ wmat
            if k == 1 and stride == 1:
                gxp = gcols.reshape(n, h, w, c)
            else:
                gcols = gcols.reshape(n, ho, wo, k, k, c)
                gxp = np.zeros(xp.shape, dtype=xp.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            if pad:
                gxp = gxp[:, pad:pad + h, pad:pad + w, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    m = xg.shape[2]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return _node(out, (x, gamma, beta), backward, "group_norm")


# ----------------------------------------------------------------------------
# loss


def soft_dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - mean over (n, c) of (2·Σpt + s) / (Σp + Σt + s)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise DimensionError(f"soft_dice_loss: pred {pred.shape} vs target {t.shape}")
    p = pred.data
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("soft_dice_loss: predictions must lie in [0, 1]; apply sigmoid first")
    t = t.astype(p.dtype, copy=False)
    axes = tuple(range(2, p.ndim))
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + smooth
    d = (2.0 * inter + smooth) / denom
    count = d.size
    out = np.asarray(1.0 - d.mean(), dtype=p.dtype)

    def backward(g):
        # dd/dp = (2t·denom - (2·inter + s)) / denom²
        shape = d.shape + (1,) * len(axes)
        num = 2.0 * inter + smooth
        gp = (2.0 * t * denom.reshape(shape) - num.reshape(shape)) / (denom.reshape(shape) ** 2)
        return (-g * gp / count,)

    return _node(out, (pred,), backward, "soft_dice_loss")
