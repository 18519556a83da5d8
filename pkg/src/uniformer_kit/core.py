"""UniFormer block: dynamic position embedding, relation aggregators and FFN.

A block maps ``(N, C, T, H, W)`` to the same shape::

    X = DPE(X_in) + X_in
    Y = drop_path(MHRA(Norm(X))) + X
    Z = drop_path(FFN(Norm(Y))) + Y

Local blocks use batch norm on the 5D layout and a PWConv-DWConv-PWConv
aggregator whose depthwise kernel is the per-head learnable affinity.
Global and window blocks flatten to ``(N, L, C)`` tokens, use layer norm and
softmax attention (optionally restricted to ``wh x ww`` windows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, concat, matmul, pad
from .nn import (
    BatchNorm,
    Conv,
    ConvSpec,
    LayerNorm,
    Linear,
    Module,
    _triple,
    conv3d,
    drop_path,
    fan_in_uniform,
    from_tokens,
    to_tokens,
)
from .rng import SplitMix64


class BlockType(str, Enum):
    LOCAL = "L"
    GLOBAL = "G"
    WINDOW = "W"
    HOURGLASS = "H"

    @classmethod
    def parse(cls, value) -> "BlockType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown block type {value!r} (expected L, G, W or H)") from None


@dataclass(frozen=True)
class BlockConfig:
    block_type: BlockType
    channels: int
    head_dim: int = 64
    local_kernel: Tuple[int, int, int] = (1, 5, 5)
    dpe_kernel: Tuple[int, int, int] = (1, 3, 3)
    ffn_ratio: int = 4
    window: Optional[Tuple[int, int]] = None
    drop_path_rate: float = 0.0
    qk_scale: bool = True
    # channels per local affinity kernel; 1 gives one head per channel
    local_head_dim: int = 1
    local_inner_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_type", BlockType.parse(self.block_type))
        object.__setattr__(self, "local_kernel", _triple(self.local_kernel))
        object.__setattr__(self, "dpe_kernel", _triple(self.dpe_kernel))
        if self.window is not None:
            object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        self.validate()

    def validate(self) -> None:
        c = self.channels
        if c < 1 or self.head_dim < 1 or self.ffn_ratio < 1:
            raise ValueError(f"channels, head_dim and ffn_ratio must be positive: {self}")
        if self.block_type is BlockType.LOCAL:
            if c % self.local_head_dim:
                raise ValueError(f"local_head_dim {self.local_head_dim} does not divide channels {c}")
        elif c % self.head_dim:
            raise ValueError(f"head_dim {self.head_dim} does not divide channels {c}")
        for k in self.local_kernel + self.dpe_kernel:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernels must be odd and positive: {self.local_kernel}, {self.dpe_kernel}")
        if (self.window is not None) != (self.block_type is BlockType.WINDOW):
            raise ValueError("window is set iff block_type is Window")
        if self.window is not None and (len(self.window) != 2 or min(self.window) < 1):
            raise ValueError(f"window must be two positive ints, got {self.window}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")

    @property
    def heads(self) -> int:
        if self.block_type is BlockType.LOCAL:
            return self.channels // self.local_head_dim
        return self.channels // self.head_dim

    def with_type(self, block_type, window=None) -> "BlockConfig":
        return replace(self, block_type=BlockType.parse(block_type), window=window)


# ---------------------------------------------------------------------------
# dynamic position embedding


class DPE(Module):
    """Residual depthwise conv with zero padding: ``x + DWConv(x)``."""

    def __init__(self, channels: int, kernel, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        self.conv = Conv(ConvSpec.same_depthwise(channels, kernel), rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(x)


# ---------------------------------------------------------------------------
# local relation aggregator


class LocalMHRA(Module):
    """PWConv -> BN -> per-head depthwise affinity conv -> BN -> PWConv.

    ``affinity`` holds one ``t x h x w`` kernel per head; head ``n`` covers
    channels ``[n * local_head_dim, (n + 1) * local_head_dim)`` and shares
    its kernel across them. The depthwise stage has no bias (a BN follows).
    With ``local_inner_norm`` off the two inner BNs are omitted.
    """

    def __init__(self, cfg: BlockConfig, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        c = cfg.channels
        self.cfg = cfg
        self.value = Conv(ConvSpec(c, c), rng, dtype=dtype)
        self.spec = ConvSpec.same_depthwise(c, cfg.local_kernel)
        fan_in = int(np.prod(cfg.local_kernel))
        self.affinity = fan_in_uniform(rng, (cfg.heads,) + cfg.local_kernel, fan_in, dtype)
        self.proj = Conv(ConvSpec(c, c), rng, dtype=dtype)
        if cfg.local_inner_norm:
            self.norm_v = BatchNorm(c, dtype=dtype)
            self.norm_a = BatchNorm(c, dtype=dtype)
        self._head_of_channel = np.arange(c) // cfg.local_head_dim

    def depthwise_weight(self) -> Tensor:
        w = self.affinity
        if self.cfg.local_head_dim != 1:
            w = w.take(self._head_of_channel, axis=0)
        return w.reshape(self.spec.weight_shape)

    def aggregate(self, v: Tensor) -> Tensor:
        """Apply the local affinity to contextual tokens ``v`` (5D layout)."""
        for k, n in zip(self.cfg.local_kernel, v.shape[2:]):
            if k > 2 * (n + 2 * (k // 2)):
                raise ValueError(f"local kernel {self.cfg.local_kernel} exceeds input extent {v.shape[2:]}")
        return conv3d(v, self.depthwise_weight(), None, self.spec)

    def forward(self, x: Tensor) -> Tensor:
        v = self.value(x)
        if self.cfg.local_inner_norm:
            return self.proj(self.norm_a(self.aggregate(self.norm_v(v))))
        return self.proj(self.aggregate(v))


# ---------------------------------------------------------------------------
# global and window relation aggregators


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, l, c = x.shape
    return x.reshape(n, l, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    n, h, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, l, h * d)


class GlobalMHRA(Module):
    """Multi-head softmax attention over all tokens.

    With ``qk_scale`` the logits are ``q k^T / sqrt(head_dim)``; without it
    they are the raw dot products.
    """

    def __init__(self, cfg: BlockConfig, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        c = cfg.channels
        self.heads = c // cfg.head_dim
        self.scale = 1.0 / math.sqrt(cfg.head_dim) if cfg.qk_scale else 1.0
        self.q = Linear(c, c, rng, dtype=dtype)
        self.k = Linear(c, c, rng, dtype=dtype)
        self.v = Linear(c, c, rng, dtype=dtype)
        self.proj = Linear(c, c, rng, dtype=dtype)
        self.last_attention: Optional[np.ndarray] = None

    def attend(self, q: Tensor, k: Tensor, v: Tensor, return_logits: bool = False):
        """Head-split ``(N, heads, L, d)`` inputs -> merged ``(N, L, C)`` context."""
        logits = matmul(q, k.swapaxes(-1, -2)) * self.scale
        attn = logits.softmax(-1)
        self.last_attention = attn.data
        out = merge_heads(matmul(attn, v))
        return (out, logits) if return_logits else out

    def forward(self, x: Tensor, extra: Optional[Tensor] = None):
        """Attend over tokens ``x`` of shape ``(N, L, C)``.

        ``extra`` tokens ``(N, E, C)`` are prepended to the sequence; when given,
        the result is ``(visual_out, extra_out)``.
        """
        if x.shape[1] == 0:
            raise ValueError("global MHRA needs at least one token")
        seq = x if extra is None else concat([extra, x], axis=1)
        h = self.heads
        out = self.proj(self.attend(split_heads(self.q(seq), h), split_heads(self.k(seq), h),
                                    split_heads(self.v(seq), h)))
        if extra is None:
            return out
        e = extra.shape[1]
        return out[:, e:], out[:, :e]


def window_partition(x: Tensor, thw: Sequence[int], window: Tuple[int, int]):
    """Pad an ``(N, L, C)`` token grid and split it into ``T x wh x ww`` windows.

    Returns ``(windows, layout)`` where ``windows`` is ``(N * nH * nW, T*wh*ww, C)``
    and ``layout`` carries what :func:`window_reverse` needs.
    """
    n, _, c = x.shape
    t, h, w = thw
    wh, ww = min(window[0], h), min(window[1], w)
    hp, wp = -(-h // wh) * wh, -(-w // ww) * ww
    g = x.reshape(n, t, h, w, c)
    if (hp, wp) != (h, w):
        g = pad(g, ((0, 0), (0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    nh, nw = hp // wh, wp // ww
    g = g.reshape(n, t, nh, wh, nw, ww, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return g.reshape(n * nh * nw, t * wh * ww, c), (n, t, h, w, c, wh, ww, nh, nw)


def window_reverse(windows: Tensor, layout) -> Tensor:
    n, t, h, w, c, wh, ww, nh, nw = layout
    g = windows.reshape(n, nh, nw, t, wh, ww, c).transpose(0, 3, 1, 4, 2, 5, 6)
    g = g.reshape(n, t, nh * wh, nw * ww, c)
    if (nh * wh, nw * ww) != (h, w):
        g = g[:, :, :h, :w, :]
    return g.reshape(n, t * h * w, c)


class WindowMHRA(GlobalMHRA):
    """Global MHRA applied independently inside each spatial window.

    Windows partition ``H x W`` only and span every frame. The grid is
    zero-padded up to window multiples and cropped back afterwards; a window
    larger than the grid is clamped to the full extent.
    """

    def __init__(self, cfg: BlockConfig, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        super().__init__(cfg, rng, dtype)
        self.window = cfg.window

    def forward(self, x: Tensor, thw: Sequence[int]) -> Tensor:
        windows, layout = window_partition(x, thw, self.window)
        return window_reverse(super().forward(windows), layout)


class FFN(Module):
    """Per-token ``Linear(C, rC) -> GELU -> Linear(rC, C)``."""

    def __init__(self, channels: int, ratio: int, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        self.fc1 = Linear(channels, ratio * channels, rng, dtype=dtype)
        self.fc2 = Linear(ratio * channels, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


# ---------------------------------------------------------------------------
# block


class UniFormerBlock(Module):
    """Local, global or window UniFormer block on ``(N, C, T, H, W)`` input."""

    def __init__(self, cfg: BlockConfig, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        if cfg.block_type is BlockType.HOURGLASS:
            raise ValueError("hourglass blocks are built by uniformer_kit.hourglass.HourglassBlock")
        self.cfg = cfg
        c = cfg.channels
        self.dpe = DPE(c, cfg.dpe_kernel, rng, dtype)
        if cfg.block_type is BlockType.LOCAL:
            self.norm1 = BatchNorm(c, dtype=dtype)
            self.mhra = LocalMHRA(cfg, rng, dtype)
            self.norm2 = BatchNorm(c, dtype=dtype)
        else:
            self.norm1 = LayerNorm(c, dtype=dtype)
            mhra_cls = WindowMHRA if cfg.block_type is BlockType.WINDOW else GlobalMHRA
            self.mhra = mhra_cls(cfg, rng, dtype)
            self.norm2 = LayerNorm(c, dtype=dtype)
        self.ffn = FFN(c, cfg.ffn_ratio, rng, dtype)

    def forward(self, x: Tensor, rng: Optional[SplitMix64] = None) -> Tensor:
        cfg = self.cfg
        rate = cfg.drop_path_rate
        x = self.dpe(x)
        thw = x.shape[2:]
        if cfg.block_type is BlockType.LOCAL:
            y = x + drop_path(self.mhra(self.norm1(x)), rate, self.training, rng)
            branch = from_tokens(self.ffn(to_tokens(self.norm2(y))), thw)
            return y + drop_path(branch, rate, self.training, rng)
        t = to_tokens(x)
        if cfg.block_type is BlockType.WINDOW:
            attn = self.mhra(self.norm1(t), thw)
        else:
            attn = self.mhra(self.norm1(t))
        t = t + drop_path(attn, rate, self.training, rng)
        t = t + drop_path(self.ffn(self.norm2(t)), rate, self.training, rng)
        return from_tokens(t, thw)
