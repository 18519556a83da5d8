"""Hourglass block: score-token token shrinking and replication recovery.

Per block, on ``(N, C, T, H, W)`` input plus a score token ``(N, 1, C)``:

1. DPE on the full grid.
2. Importance ``A_j``: softmax of the score token's query against every
   visual token's key, averaged over heads. With a previous block's vector
   in the same stage, ``A = (A + A_prev) / 2``.
3. Shrink: keep the ``floor(r * L)`` highest-importance tokens (ties go to the
   lower index) and fuse the rest into one token weighted by their share of
   importance.
4. Global MHRA over ``score + reduced`` tokens and FFN, both residual.
5. Recover: kept positions take their processed tokens, every fused position
   takes a copy of the processed representative.

Keys of the visual tokens are projected once for the importance and reused
for the kept tokens inside attention (layer norm is per token, so they are
the same numbers). Token selection itself carries no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, concat, gather_rows
from .core import DPE, FFN, BlockConfig, BlockType, GlobalMHRA, split_heads
from .nn import LayerNorm, Module, drop_path, from_tokens, to_tokens
from .rng import SplitMix64


def kept_count(length: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"shrink ratio must lie in (0, 1], got {ratio}")
    return min(length, max(1, math.floor(ratio * length + 1e-9)))


def reduced_count(length: int, ratio: float) -> int:
    """Visual tokens left after shrinking: kept plus one fused token, or all."""
    k = kept_count(length, ratio)
    return length if k >= length else k + 1


@dataclass
class ShrinkPlan:
    """Outcome of token selection for a batch (one row per sample)."""

    importance: np.ndarray
    kept: np.ndarray
    discarded: np.ndarray
    fused_weights: np.ndarray
    original_len: int
    thw: Tuple[int, int, int] = (1, 1, 1)

    @property
    def identity(self) -> bool:
        return self.discarded.shape[1] == 0

    @property
    def reduced_len(self) -> int:
        return self.original_len if self.identity else self.kept.shape[1] + 1

    def recover_index(self) -> np.ndarray:
        """For every original position, the row of the reduced sequence it reads."""
        n, k = self.kept.shape
        idx = np.full((n, self.original_len), k, dtype=np.int64)
        idx[np.arange(n)[:, None], self.kept] = np.arange(k)
        return idx

    @classmethod
    def identity_plan(cls, importance: np.ndarray, thw=(1, 1, 1)) -> "ShrinkPlan":
        n, length = importance.shape
        kept = np.tile(np.arange(length), (n, 1))
        empty = np.zeros((n, 0), dtype=np.int64)
        return cls(importance, kept, empty, np.zeros((n, 0)), length, tuple(thw))


@dataclass
class ScoreToken:
    """Score token state threaded through the hourglass blocks of one forward."""

    s: Tensor
    prev_importance: Optional[Tensor] = None


def importance_from_logits(logits: Tensor, prev: Optional[Tensor] = None) -> Tensor:
    """Head-averaged softmax of score-token logits ``(N, heads, L)`` -> ``(N, L)``."""
    if logits.shape[-1] == 0:
        raise ValueError("importance needs at least one visual token")
    a = logits.softmax(-1).mean(axis=1)
    if prev is not None:
        if prev.shape != a.shape:
            raise ValueError(f"previous importance {prev.shape} does not match {a.shape}")
        a = (a + prev) * 0.5
    return a


def compute_importance(tokens: Tensor, score: Tensor, norm: LayerNorm, mhra: GlobalMHRA,
                       prev: Optional[Tensor] = None) -> Tensor:
    """Importance of each of the ``L`` tokens in ``(N, L, C)`` for score ``(N, 1, C)``."""
    h = mhra.heads
    q = split_heads(mhra.q(norm(score)), h)
    k = split_heads(mhra.k(norm(tokens)), h)
    logits = (q @ k.swapaxes(-1, -2)) * mhra.scale
    return importance_from_logits(logits[:, :, 0, :], prev)


def select_tokens(importance: np.ndarray, ratio: float) -> np.ndarray:
    """Sorted indices of the top ``floor(ratio * L)`` entries per row (stable ties)."""
    n, length = importance.shape
    k = kept_count(length, ratio)
    order = np.argsort(-importance, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


def shrink_tokens(x: Tensor, importance: Tensor, ratio: float, thw=(1, 1, 1),
                  kept: Optional[np.ndarray] = None) -> Tuple[Tensor, ShrinkPlan]:
    """Reduce ``(N, L, C)`` tokens to kept tokens plus one fused representative.

    ``kept`` freezes the selection (used for finite-difference checks).
    """
    n, length, _ = x.shape
    if importance.shape != (n, length):
        raise ValueError(f"importance {importance.shape} does not match tokens {x.shape}")
    if kept is None:
        kept = select_tokens(importance.data, ratio)
    kept = np.asarray(kept, dtype=np.int64)
    if kept.ndim == 1:
        kept = np.tile(kept, (n, 1))
    if kept.shape[1] >= length:
        return x, ShrinkPlan.identity_plan(importance.data, thw)
    mask = np.ones((n, length), dtype=bool)
    mask[np.arange(n)[:, None], kept] = False
    discarded = np.nonzero(mask)[1].reshape(n, -1)

    a_disc = gather_rows(importance, discarded)
    w = a_disc / a_disc.sum(axis=1, keepdims=True)
    rep = (gather_rows(x, discarded) * w.reshape(n, -1, 1)).sum(axis=1, keepdims=True)
    x_s = concat([gather_rows(x, kept), rep], axis=1)
    plan = ShrinkPlan(importance.data, kept, discarded, w.data, length, tuple(thw))
    return x_s, plan


def recover_tokens(y: Tensor, plan: ShrinkPlan) -> Tensor:
    """Expand reduced ``(N, M, C)`` tokens back to ``(N, L, C)``."""
    if y.shape[1] != plan.reduced_len:
        raise ValueError(f"plan expects {plan.reduced_len} reduced tokens, got {y.shape[1]}")
    if plan.identity:
        return y
    return gather_rows(y, plan.recover_index())


class HourglassBlock(Module):
    """Global block that runs MHRA and FFN on a shrunken token set."""

    def __init__(self, cfg: BlockConfig, rng: SplitMix64, shrink_ratio: float = 0.5,
                 shrink: bool = True, dtype=DEFAULT_DTYPE):
        if cfg.block_type is not BlockType.HOURGLASS:
            raise ValueError("HourglassBlock needs block_type H")
        kept_count(1, shrink_ratio)
        self.cfg = cfg
        self.shrink_ratio = shrink_ratio
        self.shrink = shrink
        c = cfg.channels
        self.dpe = DPE(c, cfg.dpe_kernel, rng, dtype)
        self.norm1 = LayerNorm(c, dtype=dtype)
        self.mhra = GlobalMHRA(cfg, rng, dtype)
        self.norm2 = LayerNorm(c, dtype=dtype)
        self.ffn = FFN(c, cfg.ffn_ratio, rng, dtype)
        self.last_plan: Optional[ShrinkPlan] = None

    def forward(self, x: Tensor, score: Tensor, prev: Optional[Tensor] = None,
                rng: Optional[SplitMix64] = None, kept: Optional[np.ndarray] = None):
        """Returns ``(x_out, score_out, importance)``."""
        m, h, rate = self.mhra, self.mhra.heads, self.cfg.drop_path_rate
        x = self.dpe(x)
        thw = x.shape[2:]
        t = to_tokens(x)
        length = t.shape[1]
        tn, sn = self.norm1(t), self.norm1(score)
        k_vis = m.k(tn)
        q_s, k_s, v_s = m.q(sn), m.k(sn), m.v(sn)
        shrinking = self.shrink and (kept is not None or kept_count(length, self.shrink_ratio) < length)

        if shrinking:
            logits = (split_heads(q_s, h) @ split_heads(k_vis, h).swapaxes(-1, -2)) * m.scale
            a = importance_from_logits(logits[:, :, 0, :], prev)
            x_s, plan = shrink_tokens(t, a, self.shrink_ratio, thw, kept)
        else:
            x_s, plan = t, None

        if plan is None or plan.identity:
            q = concat([q_s, m.q(tn)], axis=1)
            k = concat([k_s, k_vis], axis=1)
            v = concat([v_s, m.v(tn)], axis=1)
            out, logits = m.attend(split_heads(q, h), split_heads(k, h), split_heads(v, h), return_logits=True)
            if plan is None:
                a = importance_from_logits(logits[:, :, 0, 1:], prev)
                plan = ShrinkPlan.identity_plan(a.data, thw)
        else:
            rep_n = self.norm1(x_s[:, -1:])
            xn_s = concat([gather_rows(tn, plan.kept), rep_n], axis=1)
            q = concat([q_s, m.q(xn_s)], axis=1)
            k = concat([k_s, gather_rows(k_vis, plan.kept), m.k(rep_n)], axis=1)
            v = concat([v_s, m.v(xn_s)], axis=1)
            out = m.attend(split_heads(q, h), split_heads(k, h), split_heads(v, h))

        seq = concat([score, x_s], axis=1)
        seq = seq + drop_path(m.proj(out), rate, self.training, rng)
        seq = seq + drop_path(self.ffn(self.norm2(seq)), rate, self.training, rng)
        self.last_plan = plan
        y = recover_tokens(seq[:, 1:], plan)
        return from_tokens(y, thw), seq[:, :1], a
