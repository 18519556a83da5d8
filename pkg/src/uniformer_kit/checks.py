"""Finite-difference and structural-equivalence suites shared by the CLI and tests."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .autodiff import Tensor, concat, gather_rows, gradcheck, matmul, no_grad, pad
from .config import ModelConfig, StageConfig
from .core import BlockConfig, GlobalMHRA, LocalMHRA, UniFormerBlock, WindowMHRA
from .hourglass import HourglassBlock, recover_tokens, shrink_tokens
from .model import build_model, inflate_2d_to_3d, inflate_weight
from .nn import BatchNorm, Conv, ConvSpec, LayerNorm, Linear, conv3d, drop_path
from .rng import SplitMix64

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    value: float
    passed: bool
    detail: str = ""


def _t(rng: SplitMix64, shape, positive: bool = False) -> Tensor:
    a = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(shape)
    return Tensor(np.ascontiguousarray(a, dtype=F64), requires_grad=True)


def _params(module) -> List[Tensor]:
    return [p for _, p in module.named_parameters()]


# ---------------------------------------------------------------------------
# gradient suite


def gradient_cases(seed: int = 0):
    """``(name, fn, inputs)`` triples covering every differentiable op and block."""
    r = SplitMix64(seed)
    a, b = _t(r, (3, 4)), _t(r, (3, 4))
    pos = _t(r, (3, 4), positive=True)
    m1, m2 = _t(r, (2, 3, 4)), _t(r, (2, 4, 5))
    idx = np.array([[2, 0, 2], [1, 3, 0]])
    g = _t(r, (2, 4, 3))
    cases = [
        ("add", lambda x, y: x + y, [a, b]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul", lambda x, y: x * y, [a, b]),
        ("div", lambda x, y: x / y, [a, pos]),
        ("neg_pow", lambda x: (-x) ** 3, [a]),
        ("exp", lambda x: x.exp(), [a]),
        ("log", lambda x: x.log(), [pos]),
        ("sqrt", lambda x: x.sqrt(), [pos]),
        ("tanh", lambda x: x.tanh(), [a]),
        ("gelu", lambda x: x.gelu(), [a]),
        ("sum_axis", lambda x: x.sum(axis=1, keepdims=True), [a]),
        ("mean", lambda x: x.mean(axis=0), [a]),
        ("reshape_transpose", lambda x: x.reshape(2, 6).transpose(1, 0), [a]),
        ("getitem", lambda x: x[1:, ::2], [a]),
        ("take", lambda x: x.take(np.array([0, 2, 2]), axis=1), [a]),
        ("matmul_batched", lambda x, y: matmul(x, y), [m1, m2]),
        ("softmax", lambda x: x.softmax(-1), [a]),
        ("log_softmax", lambda x: x.log_softmax(0), [a]),
        ("concat", lambda x, y: concat([x, y], axis=0), [a, b]),
        ("pad", lambda x: pad(x, ((1, 0), (0, 2))), [a]),
        ("gather_rows", lambda x: gather_rows(x, idx), [g]),
    ]
    x5 = _t(r, (2, 4, 3, 5, 5))
    dense = Conv(ConvSpec(4, 6, (3, 3, 3), (1, 2, 2), (1, 1, 1)), r, dtype=F64)
    grouped = Conv(ConvSpec(4, 4, (1, 3, 3), padding=(0, 1, 1), groups=2), r, dtype=F64)
    dw = Conv(ConvSpec.same_depthwise(4, (3, 3, 3)), r, dtype=F64)
    cases += [
        ("conv3d_dense_strided", lambda x, *p: dense(x), [x5] + _params(dense)),
        ("conv3d_grouped", lambda x, *p: grouped(x), [x5] + _params(grouped)),
        ("conv3d_depthwise", lambda x, *p: dw(x), [x5] + _params(dw)),
    ]
    tok = _t(r, (2, 6, 8))
    ln, lin = LayerNorm(8, dtype=F64), Linear(8, 5, r, dtype=F64)
    bn = BatchNorm(4, dtype=F64)
    ln.weight.data[...] = r.uniform(0.5, 1.5, 8)
    bn.weight.data[...] = r.uniform(0.5, 1.5, 4)
    cases += [
        ("layer_norm", lambda x, *p: ln(x), [tok] + _params(ln)),
        ("batch_norm_train", lambda x, *p: bn(x), [x5] + _params(bn)),
        ("linear", lambda x, *p: lin(x), [tok] + _params(lin)),
        ("drop_path_fixed_mask", lambda x: drop_path(x, 0.5, True, SplitMix64(seed + 1)), [tok]),
    ]

    x = _t(r, (2, 8, 1, 4, 4))
    for btype in ("L", "G", "W"):
        cfg = BlockConfig(btype, 8, head_dim=4, window=(2, 2) if btype == "W" else None)
        blk = UniFormerBlock(cfg, r, dtype=F64)
        cases.append((f"block_{btype}", lambda x, *p, blk=blk: blk(x), [x] + _params(blk)))
    hcfg = BlockConfig("H", 8, head_dim=4)
    hb = HourglassBlock(hcfg, r, 0.5, True, dtype=F64)
    score = _t(r, (2, 1, 8))
    with no_grad():
        hb(x, score)
    kept = hb.last_plan.kept.copy()

    def hourglass_fn(x, s, *p):
        y, s2, _ = hb(x, s, kept=kept)
        return concat([y.reshape(2, -1), s2.reshape(2, -1)], axis=1)

    cases.append(("hourglass_frozen_selection", hourglass_fn, [x, score] + _params(hb)))
    return cases


def run_gradient_suite(seed: int = 0, tol: float = 1e-4, max_elements: int = 48) -> List[CheckResult]:
    out = []
    for name, fn, inputs in gradient_cases(seed):
        err = gradcheck(fn, inputs, eps=1e-5, max_elements=max_elements, seed=seed)
        out.append(CheckResult(f"grad/{name}", err, err < tol, f"max rel err {err:.2e}"))
    return out


# ---------------------------------------------------------------------------
# equivalence suite


def local_affinity_gather(v: np.ndarray, affinity: np.ndarray, head_of_channel: np.ndarray) -> np.ndarray:
    """Literal neighbourhood sum: ``out_i = sum_{j in window(i)} a[head](j - i) * v_j``.

    Walks every output position and its in-bounds neighbours explicitly; no
    padding and no convolution routine involved.
    """
    n, c, t, h, w = v.shape
    kt, kh, kw = affinity.shape[1:]
    rt, rh, rw = kt // 2, kh // 2, kw // 2
    out = np.zeros_like(v)
    a = affinity[head_of_channel]  # (C, kt, kh, kw)
    for it in range(t):
        for ih in range(h):
            for iw in range(w):
                acc = np.zeros((n, c), dtype=v.dtype)
                for jt in range(max(0, it - rt), min(t, it + rt + 1)):
                    for jh in range(max(0, ih - rh), min(h, ih + rh + 1)):
                        for jw in range(max(0, iw - rw), min(w, iw + rw + 1)):
                            coef = a[:, jt - it + rt, jh - ih + rh, jw - iw + rw]
                            acc += coef[None, :] * v[:, :, jt, jh, jw]
                out[:, :, it, ih, iw] = acc
    return out


def check_local_gather(kernels: Sequence[int] = (1, 3, 5, 7, 9), seed: int = 0) -> List[CheckResult]:
    r = SplitMix64(seed)
    out = []
    for k in kernels:
        for head_dim in (1, 2):
            cfg = BlockConfig("L", 4, local_kernel=(1, k, k), local_head_dim=head_dim)
            mhra = LocalMHRA(cfg, r, dtype=F64)
            v = r.normal((2, 4, 1, 9, 9))
            conv_path = mhra.aggregate(Tensor(v, dtype=F64)).data
            lit = local_affinity_gather(v, mhra.affinity.data, np.arange(4) // head_dim)
            err = float(np.max(np.abs(conv_path - lit)))
            out.append(CheckResult(f"equiv/local_gather_k{k}_hd{head_dim}", err, err <= 1e-10,
                                   f"max abs diff {err:.1e}"))
    cfg = BlockConfig("L", 3, local_kernel=(3, 3, 3))
    mhra = LocalMHRA(cfg, r, dtype=F64)
    v = r.normal((1, 3, 4, 5, 5))
    err = float(np.max(np.abs(mhra.aggregate(Tensor(v, dtype=F64)).data
                              - local_affinity_gather(v, mhra.affinity.data, np.arange(3)))))
    out.append(CheckResult("equiv/local_gather_3d", err, err <= 1e-10, f"max abs diff {err:.1e}"))
    return out


def check_window_equals_global(seed: int = 0) -> List[CheckResult]:
    out = []
    for thw, window in (((1, 4, 6), (4, 6)), ((1, 5, 7), (8, 9)), ((2, 3, 3), (3, 3))):
        cfg = BlockConfig("W", 8, head_dim=4, window=window)
        x = SplitMix64(seed).normal((2, int(np.prod(thw)), 8))
        wm = WindowMHRA(cfg, SplitMix64(seed + 1), dtype=F64)
        gm = GlobalMHRA(cfg.with_type("G"), SplitMix64(seed + 1), dtype=F64)
        same = np.array_equal(wm(Tensor(x, dtype=F64), thw).data, gm(Tensor(x, dtype=F64)).data)
        out.append(CheckResult(f"equiv/window_full_extent_{thw}", float(not same), same, "bit-identical" if same else "differs"))
    return out


def check_shrink_identity(seed: int = 0) -> List[CheckResult]:
    r = SplitMix64(seed)
    x = Tensor(r.normal((3, 10, 6)), dtype=F64)
    imp = Tensor(r.random((3, 10)), dtype=F64)
    xs, plan = shrink_tokens(x, imp, 1.0)
    y = recover_tokens(xs, plan)
    same = np.array_equal(y.data, x.data)
    return [CheckResult("equiv/shrink_ratio_1_identity", float(not same), same, "identity" if same else "differs")]


def check_inflation_interior(seed: int = 0, kt: int = 3, frames: int = 6) -> List[CheckResult]:
    r = SplitMix64(seed)
    spec2 = ConvSpec.same_depthwise(4, (1, 3, 3))
    conv2 = Conv(spec2, r, dtype=F64)
    spec3 = ConvSpec.same_depthwise(4, (kt, 3, 3))
    w3 = Tensor(inflate_weight(conv2.weight.data, spec3.weight_shape), dtype=F64)
    frame = r.normal((2, 4, 1, 7, 7))
    clip = np.repeat(frame, frames, axis=2)
    y2 = conv2(Tensor(frame, dtype=F64)).data
    y3 = conv3d(Tensor(clip, dtype=F64), w3, conv2.bias, spec3).data
    half = kt // 2
    interior = y3[:, :, half:frames - half]
    err = float(np.max(np.abs(interior - y2)))
    out = [CheckResult(f"equiv/inflated_dwconv_interior_kt{kt}", err, err <= 1e-6, f"max abs diff {err:.1e}")]

    tiny = ModelConfig(stages=tuple(StageConfig(d, c, t) for d, c, t in zip([1, 1, 1, 1], [8, 16, 32, 64], "LLGG")),
                       head_dim=8, input_spec=(3, 1, 32, 32), num_classes=2)
    m2 = build_model(tiny, seed=seed, dtype=F64)
    m3 = inflate_2d_to_3d(m2, frames=4)
    ok = True
    for (name, p2), (_, p3) in zip(m2.named_parameters(), m3.named_parameters()):
        if p2.shape == p3.shape:
            ok &= np.array_equal(p2.data, p3.data)
        else:
            axis = next(i for i, (a, b) in enumerate(zip(p2.shape, p3.shape)) if a != b)
            ok &= bool(np.allclose(p3.data.sum(axis=axis, keepdims=True), p2.data, atol=1e-12))
    out.append(CheckResult("equiv/inflated_model_weights", float(not ok), ok, "slices sum to source weights"))
    return out


def run_equivalence_suite(seed: int = 0) -> List[CheckResult]:
    return (check_local_gather(seed=seed) + check_window_equals_global(seed) + check_shrink_identity(seed)
            + check_inflation_interior(seed))


def timed(fn: Callable, *args, **kwargs):
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0


__all__ = ["CheckResult", "check_inflation_interior", "check_local_gather", "check_shrink_identity",
           "check_window_equals_global", "gradient_cases", "local_affinity_gather", "run_equivalence_suite",
           "run_gradient_suite", "timed"]
