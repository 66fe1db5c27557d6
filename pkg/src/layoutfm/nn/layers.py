"""Parameterised building blocks: convolution, group norm, attention, residual blocks."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor


class Module:
    """Container that owns named parameters and child modules, in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, mod: "Module") -> "Module":
        self._children[name] = mod
        return mod

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int | None = None, bias: bool = True):
        super().__init__()
        if k % 2 != 1:
            raise ConfigError(f"conv kernel size must be odd, got {k}")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = self.add_param("weight", kaiming(rng, (cout, cin, k, k)))
        self.bias = self.add_param("bias", np.zeros(cout, np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 4):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.gamma = self.add_param("gamma", np.ones(channels, np.float32))
        self.beta = self.add_param("beta", np.zeros(channels, np.float32))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.gamma, self.beta)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Sigmoid(Module):
    def forward(self, x):
        return T.sigmoid(x)


class Upsample(Module):
    """Nearest ×2 followed by a 3×3 conv."""

    def __init__(self, cin: int, cout: int, rng):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, 3, rng))

    def forward(self, x):
        return self.conv(T.upsample2x(x))


class Downsample(Module):
    """Stride-2 3×3 conv."""

    def __init__(self, cin: int, cout: int, rng):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, 3, rng, stride=2, pad=1))

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise T.DimensionError(f"downsample needs even spatial size, got {h}x{w}")
        return T.conv2d(_pad_top_left(x), self.conv.weight, self.conv.bias, stride=2, pad=0)


def _pad_top_left(x: Tensor) -> Tensor:
    """One zero row/col on the top-left so a stride-2 3×3 conv yields exactly h/2."""
    out = np.pad(x.data, ((0, 0), (0, 0), (1, 0), (1, 0)))

    def backward(g):
        return (g[:, :, 1:, 1:],)

    return T._node(out, (x,), backward, "pad")


class SelfAttention(Module):
    """Multi-head scaled dot-product attention over spatial positions, residual."""

    def __init__(self, channels: int, heads: int, rng, zero_out: bool = False):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f"attention heads {heads} must divide channels {channels}")
        self.channels, self.heads = channels, heads
        self.q = self.add_child("q", Conv2d(channels, channels, 1, rng))
        self.k = self.add_child("k", Conv2d(channels, channels, 1, rng))
        self.v = self.add_child("v", Conv2d(channels, channels, 1, rng))
        self.out = self.add_child("out", Conv2d(channels, channels, 1, rng))
        # scale the query/key init down so initial attention is near-uniform
        for m in (self.q, self.k):
            m.weight.data *= np.float32(0.5)
        if zero_out:
            self.out.weight.data[...] = 0
        self.last_weights: np.ndarray | None = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.channels:
            raise T.DimensionError(f"attention expects {self.channels} channels, got {c}")
        hd, d = self.heads, c // self.heads
        seq = h * w
        q = T.reshape(self.q(x), (n, hd, d, seq))
        k = T.reshape(self.k(x), (n, hd, d, seq))
        v = T.reshape(self.v(x), (n, hd, d, seq))
        scores = T.scale(T.matmul(T.swapaxes(q, 2, 3), k), 1.0 / math.sqrt(d))  # n,hd,seq,seq
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        mixed = T.matmul(v, T.swapaxes(attn, 2, 3))  # n,hd,d,seq
        y = self.out(T.reshape(mixed, (n, c, h, w)))
        return T.add(x, y)


class ResidualBlock(Module):
    """skip(x) + conv(relu(gn(conv(relu(gn(x))))))."""

    def __init__(self, cin: int, cout: int, rng, groups: int = 4):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.norm1 = self.add_child("norm1", GroupNorm(cin, groups))
        self.conv1 = self.add_child("conv1", Conv2d(cin, cout, 3, rng))
        self.norm2 = self.add_child("norm2", GroupNorm(cout, groups))
        self.conv2 = self.add_child("conv2", Conv2d(cout, cout, 3, rng))
        self.skip = self.add_child("skip", Conv2d(cin, cout, 1, rng)) if cin != cout else None

    def inner(self, x):
        h = self.conv1(T.relu(self.norm1(x)))
        return self.conv2(T.relu(self.norm2(h)))

    def forward(self, x):
        s = self.skip(x) if self.skip is not None else x
        return T.add(s, self.inner(x))


# --------------------------------------------------------------------------
# declarative layer specs


@dataclass(frozen=True)
class ConvSpec:
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    pad: int | None = None


@dataclass(frozen=True)
class GroupNormSpec:
    channels: int
    groups: int = 4


@dataclass(frozen=True)
class ReLUSpec:
    pass


@dataclass(frozen=True)
class SigmoidSpec:
    pass


@dataclass(frozen=True)
class UpsampleSpec:
    cin: int
    cout: int


@dataclass(frozen=True)
class DownsampleSpec:
    cin: int
    cout: int


@dataclass(frozen=True)
class SelfAttentionSpec:
    channels: int
    heads: int = 1


@dataclass(frozen=True)
class ResidualSpec:
    cin: int
    cout: int
    groups: int = 4


LayerSpec = Union[ConvSpec, GroupNormSpec, ReLUSpec, SigmoidSpec, UpsampleSpec,
                  DownsampleSpec, SelfAttentionSpec, ResidualSpec]


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    if isinstance(spec, ConvSpec):
        return Conv2d(spec.cin, spec.cout, spec.k, rng, stride=spec.stride, pad=spec.pad)
    if isinstance(spec, GroupNormSpec):
        return GroupNorm(spec.channels, spec.groups)
    if isinstance(spec, ReLUSpec):
        return ReLU()
    if isinstance(spec, SigmoidSpec):
        return Sigmoid()
    if isinstance(spec, UpsampleSpec):
        return Upsample(spec.cin, spec.cout, rng)
    if isinstance(spec, DownsampleSpec):
        return Downsample(spec.cin, spec.cout, rng)
    if isinstance(spec, SelfAttentionSpec):
        return SelfAttention(spec.channels, spec.heads, rng)
    if isinstance(spec, ResidualSpec):
        return ResidualBlock(spec.cin, spec.cout, rng, spec.groups)
    raise ConfigError(f"unknown layer spec {spec!r}")


class Sequential(Module):
    def __init__(self, specs: list[LayerSpec], rng):
        super().__init__()
        self.layers = [self.add_child(str(i), build_layer(s, rng)) for i, s in enumerate(specs)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
