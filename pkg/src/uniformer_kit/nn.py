"""Layer primitives on top of :mod:`uniformer_kit.autodiff`.

Activations use the ``(N, C, T, H, W)`` layout; images have ``T == 1``.
Convolutions are cross-correlations with symmetric zero padding. Both norms
use the population (biased) variance. Weights and biases are drawn from
``U(-sqrt(1/fan_in), sqrt(1/fan_in))``; norm affines start at ``(1, 0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .rng import SplitMix64

Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) == 2:
        return (1,) + v
    if len(v) != 3:
        raise ValueError(f"expected 1, 2 or 3 values, got {v}")
    return v


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training: bool = True
    _buffer_names: Tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def fan_in_uniform(rng: SplitMix64, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)


def ones_param(n: int, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Triple = (1, 1, 1)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.in_channels, self.out_channels, self.groups) < 1:
            raise ValueError(f"channel counts and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")
        if min(self.kernel + self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding: {self}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_size(self, size: Sequence[int]) -> Triple:
        out = tuple((n + 2 * p - k) // s + 1
                    for n, p, k, s in zip(_triple(size), self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ValueError(f"input extent {tuple(size)} too small for {self}")
        return out

    @classmethod
    def same_depthwise(cls, channels: int, kernel) -> "ConvSpec":
        kernel = _triple(kernel)
        if any(k % 2 == 0 for k in kernel):
            raise ValueError(f"'same' padding needs odd kernels, got {kernel}")
        return cls(channels, channels, kernel, 1, tuple(k // 2 for k in kernel), channels)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped 3D cross-correlation on ``(N, C, T, H, W)`` input."""
    if x.ndim != 5:
        raise ValueError(f"conv expects (N, C, T, H, W) input, got {x.shape}")
    n, c = x.shape[:2]
    if c != spec.in_channels:
        raise ValueError(f"conv input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv weight shape {weight.shape} != {spec.weight_shape}")
    g = spec.groups
    ci, co = spec.in_channels // g, spec.out_channels // g
    (kt, kh, kw), (st, sh, sw), (pt, ph, pw) = spec.kernel, spec.stride, spec.padding
    to, ho, wo = spec.output_size(x.shape[2:])

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    xg = xp.reshape((n, g, ci) + xp.shape[2:])
    wg = weight.data.reshape((g, co, ci, kt, kh, kw))
    offsets = list(product(range(kt), range(kh), range(kw)))
    dw_path = ci == 1 and co == 1

    def window(a, b, c_):
        return (slice(None),) * 3 + (slice(a, a + st * (to - 1) + 1, st),
                                     slice(b, b + sh * (ho - 1) + 1, sh),
                                     slice(c_, c_ + sw * (wo - 1) + 1, sw))

    y = np.zeros((n, g, co, to, ho, wo), dtype=x.dtype)
    for a, b, c_ in offsets:
        xs = xg[window(a, b, c_)]
        if dw_path:
            y += xs * wg[:, :, 0, a, b, c_][None, ..., None, None, None]
        else:
            y += np.einsum("ngitjk,goi->ngotjk", xs, wg[:, :, :, a, b, c_], optimize=True)
    y = y.reshape((n, spec.out_channels, to, ho, wo))
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1, 1)

    def back(gy):
        gyg = gy.reshape((n, g, co, to, ho, wo))
        gxp = np.zeros_like(xg)
        gw = np.zeros_like(wg)
        for a, b, c_ in offsets:
            sl = window(a, b, c_)
            xs = xg[sl]
            wk = wg[:, :, :, a, b, c_]
            if dw_path:
                gw[:, :, 0, a, b, c_] = np.sum(gyg * xs, axis=(0, 3, 4, 5))
                gxp[sl] += gyg * wk[:, :, 0][None, ..., None, None, None]
            else:
                gw[:, :, :, a, b, c_] = np.einsum("ngotjk,ngitjk->goi", gyg, xs, optimize=True)
                gxp[sl] += np.einsum("ngotjk,goi->ngitjk", gyg, wk, optimize=True)
        gxp = gxp.reshape(xp.shape)
        gx = gxp[:, :, pt:pt + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(gy.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(y, parents, back)


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng: SplitMix64, bias: bool = True, dtype=DEFAULT_DTYPE):
        self.spec = spec
        fan_in = spec.weight_shape[1] * int(np.prod(spec.kernel))
        self.weight = fan_in_uniform(rng, spec.weight_shape, fan_in, dtype)
        self.bias = fan_in_uniform(rng, (spec.out_channels,), fan_in, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)


# ---------------------------------------------------------------------------
# linear and norms


class Linear(Module):
    """``y = x @ W + b`` over the last axis; ``W`` is stored ``(in, out)``."""

    def __init__(self, in_features: int, out_features: int, rng: SplitMix64, bias: bool = True,
                 dtype=DEFAULT_DTYPE, zero_bias: bool = False):
        self.in_features, self.out_features = in_features, out_features
        self.weight = fan_in_uniform(rng, (in_features, out_features), in_features, dtype)
        if not bias:
            self.bias = None
        elif zero_bias:
            self.bias = zeros_param((out_features,), dtype)
        else:
            self.bias = fan_in_uniform(rng, (out_features,), in_features, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"linear expects {self.in_features} features, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


@dataclass(frozen=True)
class NormSpec:
    kind: str
    num_features: int
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in ("batch", "layer"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    xhat = xc / (var + eps).sqrt()
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


class LayerNorm(Module):
    """Per-token normalisation over the channel axis (last axis by default)."""

    def __init__(self, num_features: int, eps: float = 1e-5, axis: int = -1, dtype=DEFAULT_DTYPE):
        self.spec = NormSpec("layer", num_features, eps)
        self.axis = axis
        self.weight = ones_param(num_features, dtype)
        self.bias = zeros_param((num_features,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[self.axis] != self.spec.num_features:
            raise ValueError(f"layer norm expects {self.spec.num_features} features, got {x.shape}")
        return layer_norm(x, self.weight, self.bias, self.spec.eps, self.axis)


class BatchNorm(Module):
    """Batch norm over ``(N, T, H, W)`` per channel of an ``(N, C, T, H, W)`` input.

    Before any training step the running statistics are ``(0, 1)``, so eval mode
    is the affine map alone.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        self.spec = NormSpec("batch", num_features, eps, momentum)
        self.weight = ones_param(num_features, dtype)
        self.bias = zeros_param((num_features,), dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        c = self.spec.num_features
        if x.ndim != 5 or x.shape[1] != c:
            raise ValueError(f"batch norm expects (N, {c}, T, H, W), got {x.shape}")
        shape = (1, c, 1, 1, 1)
        axes = (0, 2, 3, 4)
        if self.training:
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            m = self.spec.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = xc / (var + self.spec.eps).sqrt()
        else:
            mean = Tensor(self.running_mean.reshape(shape), dtype=x.dtype)
            inv = Tensor((1.0 / np.sqrt(self.running_var + self.spec.eps)).reshape(shape), dtype=x.dtype)
            xhat = (x - mean) * inv
        return xhat * self.weight.reshape(shape) + self.bias.reshape(shape)


# ---------------------------------------------------------------------------
# stochastic depth


def drop_path(x: Tensor, rate: float, training: bool, rng: Optional[SplitMix64]) -> Tensor:
    """Zero whole samples of a residual branch with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop-path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode drop-path needs a generator")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep.reshape((-1,) + (1,) * (x.ndim - 1)), dtype=x.dtype)


def to_tokens(x: Tensor) -> Tensor:
    """``(N, C, T, H, W)`` -> ``(N, T*H*W, C)``."""
    n, c = x.shape[:2]
    return x.reshape(n, c, -1).transpose(0, 2, 1)


def from_tokens(x: Tensor, thw: Sequence[int]) -> Tensor:
    """``(N, T*H*W, C)`` -> ``(N, C, T, H, W)``."""
    n, _, c = x.shape
    return x.transpose(0, 2, 1).reshape((n, c) + tuple(thw))
