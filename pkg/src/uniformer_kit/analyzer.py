"""Closed-form parameter and MAC accounting, without building any tensors.

Counting convention: one multiply-accumulate is reported as one FLOP.
Softmax, normalisation, GELU, residual additions and pooling cost nothing.
All counts are per sample and kept as Python integers.

Row paths mirror the parameter paths of :class:`~uniformer_kit.model.UniFormer`
so per-row parameter counts can be compared against a built model.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig
from .core import BlockType
from .hourglass import kept_count
from .nn import ConvSpec

CONVENTION = "1 MAC = 1 FLOP; softmax/norm/activation/pooling = 0 MACs; per sample"


@dataclass(frozen=True)
class CostRow:
    path: str
    params: int
    macs: int
    kind: str = "op"
    stage: Optional[int] = None
    block_type: Optional[str] = None


@dataclass
class CostReport:
    """Per-operator costs; every roll-up is an exact integer sum of rows."""

    rows: List[CostRow]
    input_spec: Tuple[int, int, int, int]
    convention: str = CONVENTION
    head_layout: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def stage_macs(self, stage: int) -> int:
        """MACs of stage ``stage`` (1-based) including its downsampling stem."""
        return sum(r.macs for r in self.rows if r.stage == stage)

    def stage_params(self, stage: int) -> int:
        return sum(r.params for r in self.rows if r.stage == stage)

    def matmul_macs(self, stage: Optional[int] = None, block_type: Optional[str] = None) -> int:
        """Attention matmul (QK^T and AV) MACs, optionally filtered."""
        return sum(r.macs for r in self.rows if r.kind == "matmul"
                   and (stage is None or r.stage == stage)
                   and (block_type is None or r.block_type == block_type))

    def by_prefix(self, prefix: str) -> Tuple[int, int]:
        sel = [r for r in self.rows if r.path == prefix or r.path.startswith(prefix + ".")]
        return sum(r.params for r in sel), sum(r.macs for r in sel)

    def block_rollup(self) -> Dict[str, Tuple[int, int]]:
        """``(params, macs)`` per block (``stages.i.blocks.j``) and per top-level module."""
        out: Dict[str, List[int]] = {}
        for r in self.rows:
            parts = r.path.split(".")
            key = ".".join(parts[:4]) if parts[0] == "stages" else ".".join(parts[:2] if parts[0] in ("stems", "score_proj") else parts[:1])
            acc = out.setdefault(key, [0, 0])
            acc[0] += r.params
            acc[1] += r.macs
        return {k: (v[0], v[1]) for k, v in out.items()}

    def summary_rows(self, per_stage: bool = False) -> List[Tuple[str, int, int]]:
        if not per_stage:
            return [(r.path, r.params, r.macs) for r in self.rows]
        out = [(f"stage{s}", self.stage_params(s), self.stage_macs(s)) for s in range(1, 5)]
        rest = [r for r in self.rows if r.stage is None]
        out.append(("head", sum(r.params for r in rest), sum(r.macs for r in rest)))
        return out

    def to_text(self, per_stage: bool = False) -> str:
        c, t, h, w = self.input_spec
        total = self.total_macs
        lines = [f"# input {c}x{t}x{h}x{w}; {self.convention}",
                 f"# heads per stage: {list(self.head_layout)}"]
        body = self.summary_rows(per_stage)
        width = max(len("path"), *(len(p) for p, _, _ in body))
        lines.append(f"{'path':<{width}}  {'params':>12}  {'macs':>16}  {'pct_total':>9}")
        for p, n, m in body:
            lines.append(f"{p:<{width}}  {n:>12,d}  {m:>16,d}  {_pct(m, total):>9}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12,d}  {total:>16,d}  {'100.00':>9}")
        lines.append(f"# params {self.total_params / 1e6:.2f}M, FLOPs {total / 1e9:.3f}G")
        return "\n".join(lines)

    def to_csv(self, per_stage: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "params", "macs", "pct_total"])
        total = self.total_macs
        for p, n, m in self.summary_rows(per_stage):
            writer.writerow([p, n, m, _pct(m, total)])
        return buf.getvalue()


def _pct(m: int, total: int) -> str:
    return f"{100.0 * m / total:.2f}" if total else "0.00"


# ---------------------------------------------------------------------------
# primitive costs


def _vol(thw: Sequence[int]) -> int:
    return int(np.prod(thw, dtype=np.int64))


def conv_params(spec: ConvSpec, bias: bool = True) -> int:
    return _vol(spec.weight_shape) + (spec.out_channels if bias else 0)


def conv_macs(spec: ConvSpec, out_thw: Sequence[int]) -> int:
    return _vol(spec.kernel) * (spec.in_channels // spec.groups) * spec.out_channels * _vol(out_thw)


def linear_params(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def linear_macs(tokens: int, c_in: int, c_out: int) -> int:
    return tokens * c_in * c_out


class _Walker:
    def __init__(self):
        self.rows: List[CostRow] = []
        self.stage: Optional[int] = None
        self.block_type: Optional[str] = None

    def add(self, path, params, macs, kind="op"):
        self.rows.append(CostRow(path, int(params), int(macs), kind, self.stage, self.block_type))

    def conv(self, path, spec, out_thw):
        self.add(path, conv_params(spec), conv_macs(spec, out_thw), "conv")

    def linear(self, path, c_in, c_out, tokens):
        self.add(path, linear_params(c_in, c_out), linear_macs(tokens, c_in, c_out), "linear")

    def norm(self, path, c):
        self.add(path, 2 * c, 0, "norm")


def _stem(w: _Walker, prefix: str, specs: Sequence[ConvSpec], thw_in):
    thw = specs[0].output_size(thw_in)
    w.conv(f"{prefix}.conv", specs[0], thw)
    if len(specs) > 1:
        w.norm(f"{prefix}.mid_norm", specs[0].out_channels)
        thw = specs[1].output_size(thw)
        w.conv(f"{prefix}.conv2", specs[1], thw)
    w.norm(f"{prefix}.norm", specs[-1].out_channels)
    return thw


def _ffn(w: _Walker, prefix: str, c: int, ratio: int, tokens: int):
    w.linear(f"{prefix}.fc1", c, ratio * c, tokens)
    w.linear(f"{prefix}.fc2", ratio * c, c, tokens)


def _block(w: _Walker, prefix: str, cfg, thw, *, shrink: bool, ratio: float):
    c = cfg.channels
    length = _vol(thw)
    w.conv(f"{prefix}.dpe.conv", ConvSpec.same_depthwise(c, cfg.dpe_kernel), thw)
    m = f"{prefix}.mhra"
    bt = cfg.block_type
    if bt is BlockType.LOCAL:
        w.norm(f"{prefix}.norm1", c)
        w.conv(f"{m}.value", ConvSpec(c, c), thw)
        if cfg.local_inner_norm:
            w.norm(f"{m}.norm_v", c)
        kvol = _vol(cfg.local_kernel)
        w.add(f"{m}.affinity", cfg.heads * kvol, kvol * c * length, "conv")
        if cfg.local_inner_norm:
            w.norm(f"{m}.norm_a", c)
        w.conv(f"{m}.proj", ConvSpec(c, c), thw)
        w.norm(f"{prefix}.norm2", c)
        _ffn(w, f"{prefix}.ffn", c, cfg.ffn_ratio, length)
        return
    w.norm(f"{prefix}.norm1", c)
    if bt is BlockType.GLOBAL:
        for name in ("q", "k", "v"):
            w.linear(f"{m}.{name}", c, c, length)
        w.add(f"{m}.attn", 0, 2 * length * length * c, "matmul")
        w.linear(f"{m}.proj", c, c, length)
        tokens = length
    elif bt is BlockType.WINDOW:
        t, h, wd = thw
        wh, ww = min(cfg.window[0], h), min(cfg.window[1], wd)
        nh, nw = -(-h // wh), -(-wd // ww)
        padded = t * nh * wh * nw * ww
        per_win = t * wh * ww
        for name in ("q", "k", "v"):
            w.linear(f"{m}.{name}", c, c, padded)
        w.add(f"{m}.attn", 0, nh * nw * 2 * per_win * per_win * c, "matmul")
        w.linear(f"{m}.proj", c, c, padded)
        tokens = length
    else:
        k = kept_count(length, ratio)
        if shrink and k < length:
            seq = k + 2  # score + kept + fused representative
            w.add(f"{m}.q", linear_params(c, c), linear_macs(seq, c, c), "linear")
            w.add(f"{m}.k", linear_params(c, c), linear_macs(length + 2, c, c), "linear")
            w.add(f"{m}.importance", 0, length * c, "matmul")
            w.add(f"{m}.fuse", 0, (length - k) * c, "op")
            w.linear(f"{m}.v", c, c, seq)
        else:
            seq = length + 1
            for name in ("q", "k", "v"):
                w.linear(f"{m}.{name}", c, c, seq)
        w.add(f"{m}.attn", 0, 2 * seq * seq * c, "matmul")
        w.linear(f"{m}.proj", c, c, seq)
        tokens = seq
    w.norm(f"{prefix}.norm2", c)
    _ffn(w, f"{prefix}.ffn", c, cfg.ffn_ratio, tokens)


def count_macs(config: ModelConfig, input_spec: Optional[Sequence[int]] = None) -> CostReport:
    """Per-operator parameter and MAC rows for one sample of shape ``input_spec``."""
    spec = tuple(int(v) for v in (input_spec if input_spec is not None else config.input_spec))
    if len(spec) != 4:
        raise ValueError(f"input must be (C, T, H, W), got {spec}")
    if spec[0] != config.input_spec[0]:
        raise ValueError(f"model expects {config.input_spec[0]} input channels, got {spec[0]}")
    config.resolutions(spec[1:])
    w = _Walker()
    thw = spec[1:]
    score_width = None
    first_hourglass = True
    projs = 0
    heads = []
    for si, sc in enumerate(config.stages):
        w.stage, w.block_type = si + 1, None
        thw = _stem(w, f"stems.{si}", config.stem_specs(si), thw)
        types = sc.block_types()
        heads.append(sc.channels // config.head_dim if set(types) - {BlockType.LOCAL} else sc.channels)
        if BlockType.HOURGLASS in types:
            if score_width is None:
                w.add("score", sc.channels, 0, "param")
            elif score_width != sc.channels:
                w.linear(f"score_proj.{projs}", score_width, sc.channels, 1)
                projs += 1
            score_width = sc.channels
        for bi, bt in enumerate(types):
            w.block_type = bt.value
            shrink = True
            if bt is BlockType.HOURGLASS:
                shrink = config.shrink_first or not first_hourglass
                first_hourglass = False
            _block(w, f"stages.{si}.blocks.{bi}", config.block_config(si, bi), thw,
                   shrink=shrink, ratio=config.shrink_ratio)
    w.stage, w.block_type = None, None
    c4 = config.stages[-1].channels
    w.norm("norm", c4)
    w.linear("head", c4, config.num_classes, 1)
    if config.aux_head:
        w.norm("aux_norm", score_width)
        w.linear("aux_head", score_width, config.num_classes, 1)
    return CostReport(w.rows, spec, CONVENTION, tuple(heads))


def count_params(config: ModelConfig) -> int:
    """Learnable element count of the model ``config`` builds (input independent)."""
    return count_macs(config).total_params


def resolution_sweep(config: ModelConfig, resolutions: Iterable) -> List[CostReport]:
    """``count_macs`` at each resolution; an int means a square ``R x R`` input."""
    c, t, _, _ = config.input_spec
    out = []
    for r in resolutions:
        h, w = (r, r) if isinstance(r, (int, np.integer)) else tuple(r)
        out.append(count_macs(config, (c, t, int(h), int(w))))
    return out


def sweep_table(reports: Sequence[CostReport]) -> List[Dict[str, int]]:
    """Resolution-sweep rows: totals, per-stage MACs and stage-wise attention matmul MACs."""
    rows = []
    for rep in reports:
        row = {"height": rep.input_spec[2], "width": rep.input_spec[3],
               "total_macs": rep.total_macs, "params": rep.total_params}
        for s in range(1, 5):
            row[f"stage{s}_macs"] = rep.stage_macs(s)
            row[f"stage{s}_matmul_macs"] = rep.matmul_macs(stage=s)
        rows.append(row)
    return rows


def sweep_csv(reports: Sequence[CostReport]) -> str:
    rows = sweep_table(reports)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


__all__ = ["CONVENTION", "CostReport", "CostRow", "conv_macs", "conv_params", "count_macs",
           "count_params", "linear_macs", "linear_params", "resolution_sweep", "sweep_csv", "sweep_table"]
