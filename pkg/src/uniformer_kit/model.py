"""Full four-stage backbones built from :class:`~uniformer_kit.config.ModelConfig`."""

from __future__ import annotations

from dataclasses import replace
from typing import Dict, Optional

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .config import ModelConfig
from .core import BlockType, UniFormerBlock
from .hourglass import HourglassBlock
from .nn import BatchNorm, Conv, LayerNorm, Linear, Module, fan_in_uniform
from .rng import SplitMix64


class Stem(Module):
    """Downsampling conv(s) followed by layer norm over channels.

    The patch stem is one strided conv. The conv stem of the lightweight
    models is ``conv3x3/2 -> BN -> GELU -> conv3x3/2``.
    """

    def __init__(self, specs, rng: SplitMix64, dtype=DEFAULT_DTYPE):
        self.conv = Conv(specs[0], rng, dtype=dtype)
        if len(specs) > 1:
            self.mid_norm = BatchNorm(specs[0].out_channels, dtype=dtype)
            self.conv2 = Conv(specs[1], rng, dtype=dtype)
        self.norm = LayerNorm(specs[-1].out_channels, axis=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if hasattr(self, "conv2"):
            x = self.conv2(self.mid_norm(x).gelu())
        return self.norm(x)


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)


class UniFormer(Module):
    """Stems, four stages of blocks, final BN, average pool and linear head.

    Hourglass stages carry a learnable score token; its state is projected
    when the channel width changes between hourglass stages, and with
    ``aux_head`` it feeds a second classifier.
    """

    def __init__(self, config: ModelConfig, rng: Optional[SplitMix64] = None, seed: int = 0,
                 dtype=DEFAULT_DTYPE):
        config.validate()
        rng = SplitMix64(seed) if rng is None else rng
        self.config = config
        self.dtype = dtype
        stems, stages, projs = [], [], []
        score_width = None
        first_hourglass = True
        for si, sc in enumerate(config.stages):
            stems.append(Stem(config.stem_specs(si), rng, dtype))
            types = sc.block_types()
            if BlockType.HOURGLASS in types:
                if score_width is None:
                    self.score = fan_in_uniform(rng, (1, 1, sc.channels), sc.channels, dtype)
                elif score_width != sc.channels:
                    projs.append(Linear(score_width, sc.channels, rng, dtype=dtype))
                score_width = sc.channels
            blocks = []
            for bi, btype in enumerate(types):
                bcfg = config.block_config(si, bi)
                if btype is BlockType.HOURGLASS:
                    shrink = config.shrink_first or not first_hourglass
                    first_hourglass = False
                    blocks.append(HourglassBlock(bcfg, rng, config.shrink_ratio, shrink, dtype))
                else:
                    blocks.append(UniFormerBlock(bcfg, rng, dtype))
            stages.append(Stage(blocks))
        self.stems = stems
        self.stages = stages
        if projs:
            self.score_proj = projs
        c4 = config.stages[-1].channels
        self.norm = BatchNorm(c4, dtype=dtype)
        self.head = Linear(c4, config.num_classes, rng, dtype=dtype, zero_bias=True)
        if config.aux_head:
            self.aux_norm = LayerNorm(score_width, dtype=dtype)
            self.aux_head = Linear(score_width, config.num_classes, rng, dtype=dtype, zero_bias=True)

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x.reshape(x.shape[0], x.shape[1], 1, x.shape[2], x.shape[3])
        c = self.config.input_spec[0]
        if x.ndim != 5 or x.shape[1] != c:
            raise ValueError(f"model expects (N, {c}, T, H, W) input, got {x.shape}")
        self.config.resolutions(x.shape[2:])
        return x

    def forward_features(self, x, rng: Optional[SplitMix64] = None):
        """Final-stage feature map ``(N, C4, T, H, W)`` and the score token (or None)."""
        x = self._check_input(x)
        score, proj = None, 0
        for stem, stage in zip(self.stems, self.stages):
            x = stem(x)
            prev = None
            for blk in stage.blocks:
                if isinstance(blk, HourglassBlock):
                    c = blk.cfg.channels
                    if score is None:
                        score = Tensor(np.zeros((x.shape[0], 1, c)), dtype=x.dtype) + self.score
                    elif score.shape[-1] != c:
                        score = self.score_proj[proj](score)
                        proj += 1
                    x, score, a = blk(x, score, prev, rng)
                    prev = a if self.config.running_mean else None
                else:
                    x = blk(x, rng)
        return x, score

    def forward(self, x, rng: Optional[SplitMix64] = None, return_aux: bool = False):
        """Class logits ``(N, num_classes)``; with ``return_aux`` also the score-token logits."""
        feats, score = self.forward_features(x, rng)
        logits = self.head(self.norm(feats).mean(axis=(2, 3, 4)))
        if not return_aux:
            return logits
        aux = None
        if self.config.aux_head and score is not None:
            aux = self.aux_head(self.aux_norm(score[:, 0]))
        return logits, aux


def build_model(config: ModelConfig, rng: Optional[SplitMix64] = None, seed: int = 0,
                dtype=DEFAULT_DTYPE) -> UniFormer:
    """Deterministic construction: the same config and seed give identical parameters."""
    return UniFormer(config, rng=rng, seed=seed, dtype=dtype)


DEFAULT_TEMPORAL_KERNELS = {"dpe": 3, "local": 5, "stem": 3}


def inflate_2d_to_3d(model2d: UniFormer, temporal_kernels: Optional[Dict[str, int]] = None,
                     frames: int = 16) -> UniFormer:
    """Video model whose conv weights are the image weights replicated along time and divided by ``kt``.

    ``temporal_kernels`` maps ``dpe``, ``local`` and ``stem`` to temporal kernel
    sizes. Every other parameter and all buffers are copied unchanged.
    """
    cfg = model2d.config
    if cfg.video:
        raise ValueError("inflation needs an image model as its source")
    tk = dict(DEFAULT_TEMPORAL_KERNELS)
    tk.update(temporal_kernels or {})
    unknown = set(tk) - set(DEFAULT_TEMPORAL_KERNELS)
    if unknown:
        raise ValueError(f"unknown inflation sites: {sorted(unknown)}")
    c, _, h, w = cfg.input_spec
    cfg3 = replace(cfg, video=True, input_spec=(c, frames, h, w), stem_kernel_t=tk["stem"],
                   local_kernel=(tk["local"],) + tuple(cfg.local_kernel[1:]),
                   dpe_kernel=(tk["dpe"],) + tuple(cfg.dpe_kernel[1:]))
    model3d = UniFormer(cfg3, seed=0, dtype=model2d.dtype)
    copy_inflated(model2d, model3d)
    return model3d


def inflate_weight(w: np.ndarray, target_shape) -> np.ndarray:
    """Replicate a singleton temporal axis ``kt`` times and divide by ``kt``."""
    if w.shape == tuple(target_shape):
        return w.copy()
    diff = [i for i, (a, b) in enumerate(zip(w.shape, target_shape)) if a != b]
    if len(w.shape) != len(target_shape) or len(diff) != 1 or w.shape[diff[0]] != 1:
        raise ValueError(f"cannot inflate weight {w.shape} to {tuple(target_shape)}")
    kt = target_shape[diff[0]]
    return np.repeat(w, kt, axis=diff[0]) / np.asarray(kt, dtype=w.dtype)


def copy_inflated(src: UniFormer, dst: UniFormer) -> None:
    sp, dp = dict(src.named_parameters()), dict(dst.named_parameters())
    if sp.keys() != dp.keys():
        missing = sorted(set(sp) ^ set(dp))
        raise ValueError(f"mismatched architectures; differing parameters: {missing[:5]}")
    for name, p in dp.items():
        try:
            p.data = inflate_weight(sp[name].data, p.shape).astype(p.dtype)
        except ValueError as err:
            raise ValueError(f"mismatched architectures at {name}: {err}") from None
    sb, db = dict(src.named_buffers()), dict(dst.named_buffers())
    for name, buf in db.items():
        buf[...] = sb[name]


__all__ = ["Stage", "Stem", "UniFormer", "build_model", "copy_inflated", "inflate_2d_to_3d", "inflate_weight"]
