import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_oracle, gelu_tanh
from uniformer_kit.autodiff import Tensor, no_grad
from uniformer_kit.core import (DPE, FFN, BlockConfig, BlockType, GlobalMHRA, LocalMHRA, UniFormerBlock,
                                WindowMHRA, window_partition, window_reverse)
from uniformer_kit.nn import conv3d
from uniformer_kit.rng import SplitMix64

F64 = np.float64


def t64(a):
    return Tensor(np.asarray(a, dtype=F64))


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def gather_oracle(v, kernels, head_of_channel):
    """Sum over every grid position j whose offset from i lies inside the kernel box."""
    n, c, t, h, w = v.shape
    kt, kh, kw = kernels.shape[1:]
    pos = [(a, b, d) for a in range(t) for b in range(h) for d in range(w)]
    out = np.zeros_like(v)
    for i in pos:
        for j in pos:
            off = tuple(jj - ii for ii, jj in zip(i, j))
            if all(abs(o) <= k // 2 for o, k in zip(off, (kt, kh, kw))):
                coef = kernels[head_of_channel][:, off[0] + kt // 2, off[1] + kh // 2, off[2] + kw // 2]
                out[:, :, i[0], i[1], i[2]] += coef[None] * v[:, :, j[0], j[1], j[2]]
    return out


# -- config ------------------------------------------------------------------

def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig("G", 48, head_dim=64)
    with pytest.raises(ValueError):
        BlockConfig("L", 8, local_kernel=(1, 4, 4))
    with pytest.raises(ValueError):
        BlockConfig("G", 8, head_dim=4, window=(2, 2))
    with pytest.raises(ValueError):
        BlockConfig("W", 8, head_dim=4)
    with pytest.raises(ValueError):
        BlockConfig("X", 8)
    assert BlockConfig("g", 320).heads == 5
    assert BlockConfig("L", 64).heads == 64


# -- DPE -----------------------------------------------------------------------

def test_dpe_zero_weights_is_identity():
    dpe = DPE(4, (1, 3, 3), SplitMix64(0), dtype=F64)
    zero_params(dpe)
    x = SplitMix64(1).normal((2, 4, 1, 5, 5))
    assert np.array_equal(dpe(t64(x)).data, x)


def test_dpe_constant_input_interior_and_border():
    dpe = DPE(2, (1, 3, 3), SplitMix64(0), dtype=F64)
    dpe.conv.bias.data[...] = 0.0
    c = 1.5
    out = dpe(t64(np.full((1, 2, 1, 5, 5), c))).data
    wsum = dpe.conv.weight.data.reshape(2, -1).sum(axis=1)
    assert np.allclose(out[0, :, 0, 2, 2], c * (1 + wsum))
    corner = dpe.conv.weight.data[:, 0, 0, 1:, 1:].reshape(2, -1).sum(axis=1)
    assert np.allclose(out[0, :, 0, 0, 0], c * (1 + corner))


def test_dpe_residual_decomposition():
    dpe = DPE(3, (3, 3, 3), SplitMix64(2), dtype=F64)
    x = t64(SplitMix64(3).normal((1, 3, 3, 4, 4)))
    assert np.allclose(dpe(x).data - x.data, dpe.conv(x).data, atol=1e-14)


def test_dpe_rejects_even_kernel():
    with pytest.raises(ValueError):
        DPE(3, (1, 2, 2), SplitMix64(0))


# -- local MHRA ----------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 5, 7, 9])
def test_local_conv_path_matches_literal_gather(k):
    r = SplitMix64(k)
    mhra = LocalMHRA(BlockConfig("L", 8, local_kernel=(1, k, k)), r, dtype=F64)
    v = r.normal((1, 8, 1, 6, 6))
    lit = gather_oracle(v, mhra.affinity.data, np.arange(8))
    assert np.max(np.abs(mhra.aggregate(t64(v)).data - lit)) < 1e-10


def test_local_broadcast_heads_match_literal_gather():
    r = SplitMix64(4)
    mhra = LocalMHRA(BlockConfig("L", 8, local_kernel=(3, 3, 3), local_head_dim=4), r, dtype=F64)
    assert mhra.affinity.shape == (2, 3, 3, 3)
    v = r.normal((2, 8, 3, 4, 4))
    lit = gather_oracle(v, mhra.affinity.data, np.arange(8) // 4)
    assert np.max(np.abs(mhra.aggregate(t64(v)).data - lit)) < 1e-10


@pytest.mark.parametrize("training", [True, False])
def test_local_zero_affinity_leaves_projection_bias(training):
    mhra = LocalMHRA(BlockConfig("L", 4), SplitMix64(0), dtype=F64).train(training)
    mhra.affinity.data[...] = 0.0
    out = mhra(t64(SplitMix64(1).normal((2, 4, 1, 5, 5)))).data
    assert np.allclose(out, mhra.proj.bias.data.reshape(1, 4, 1, 1, 1), atol=1e-12)


def test_local_unit_kernel_is_two_pointwise_convs():
    cfg = BlockConfig("L", 4, local_kernel=(1, 1, 1), local_inner_norm=False)
    mhra = LocalMHRA(cfg, SplitMix64(0), dtype=F64)
    mhra.affinity.data[...] = 1.0
    x = t64(SplitMix64(1).normal((1, 4, 1, 3, 3)))
    assert np.allclose(mhra(x).data, mhra.proj(mhra.value(x)).data, atol=1e-13)


# -- global and window MHRA ---------------------------------------------------

def _attn_params(m):
    return (m.q.weight.data, m.q.bias.data, m.k.weight.data, m.k.bias.data, m.v.weight.data, m.v.bias.data,
            m.proj.weight.data, m.proj.bias.data)


@pytest.mark.parametrize("qk_scale", [True, False])
def test_global_matches_loop_oracle(qk_scale):
    m = GlobalMHRA(BlockConfig("G", 8, head_dim=4, qk_scale=qk_scale), SplitMix64(0), dtype=F64)
    x = SplitMix64(1).normal((2, 5, 8))
    out = m(t64(x)).data
    scale = 0.5 if qk_scale else 1.0
    for n in range(2):
        ref = attention_oracle(x[n], *_attn_params(m), heads=2, scale=scale)
        assert np.allclose(out[n], ref, atol=1e-12)


def test_global_single_token():
    m = GlobalMHRA(BlockConfig("G", 8, head_dim=4), SplitMix64(0), dtype=F64)
    x = t64(SplitMix64(1).normal((1, 1, 8)))
    out = m(x).data
    assert np.all(m.last_attention == 1.0)
    assert np.allclose(out, m.proj(m.v(x)).data, atol=1e-14)


def test_global_two_identical_tokens():
    m = GlobalMHRA(BlockConfig("G", 8, head_dim=4), SplitMix64(0), dtype=F64)
    tok = SplitMix64(1).normal((1, 1, 8))
    out = m(t64(np.concatenate([tok, tok], axis=1))).data
    assert np.allclose(m.last_attention, 0.5)
    assert np.array_equal(out[0, 0], out[0, 1])


def test_global_rejects_empty():
    m = GlobalMHRA(BlockConfig("G", 8, head_dim=4), SplitMix64(0))
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 0, 8))))


@given(st.integers(1, 7), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_global_block_permutation_equivariance(length, seed):
    cfg = BlockConfig("G", 8, head_dim=4)
    m = GlobalMHRA(cfg, SplitMix64(seed), dtype=F64)
    from uniformer_kit.nn import LayerNorm
    ln = LayerNorm(8, dtype=F64)
    r = SplitMix64(seed + 1)
    x = r.normal((1, length, 8))
    perm = r.permutation(length)
    out = m(ln(t64(x))).data
    assert np.allclose(m(ln(t64(x[:, perm]))).data, out[:, perm], atol=1e-12)
    assert np.allclose(m.last_attention.sum(-1), 1.0, atol=1e-6)


def test_window_one_by_one_attends_to_self():
    m = WindowMHRA(BlockConfig("W", 8, head_dim=4, window=(1, 1)), SplitMix64(0), dtype=F64)
    x = t64(SplitMix64(1).normal((1, 12, 8)))
    out = m(x, (1, 3, 4)).data
    assert np.all(m.last_attention == 1.0)
    assert np.allclose(out, m.proj(m.v(x)).data, atol=1e-14)


def test_window_matches_per_crop_global():
    cfg = BlockConfig("W", 8, head_dim=4, window=(2, 2))
    wm = WindowMHRA(cfg, SplitMix64(0), dtype=F64)
    gm = GlobalMHRA(cfg.with_type("G"), SplitMix64(0), dtype=F64)
    x = SplitMix64(1).normal((2, 1, 4, 4, 8))
    out = wm(t64(x.reshape(2, 16, 8)), (1, 4, 4)).data.reshape(2, 1, 4, 4, 8)
    for a in (0, 2):
        for b in (0, 2):
            crop = x[:, :, a:a + 2, b:b + 2].reshape(2, 4, 8)
            ref = gm(t64(crop)).data.reshape(2, 1, 2, 2, 8)
            assert np.allclose(out[:, :, a:a + 2, b:b + 2], ref, atol=1e-13)


@pytest.mark.parametrize("thw,window", [((1, 4, 6), (4, 6)), ((1, 3, 5), (7, 9)), ((2, 2, 3), (2, 3))])
def test_window_full_extent_is_bit_identical_to_global(thw, window):
    cfg = BlockConfig("W", 8, head_dim=4, window=window)
    wm = WindowMHRA(cfg, SplitMix64(5), dtype=F64)
    gm = GlobalMHRA(cfg.with_type("G"), SplitMix64(5), dtype=F64)
    x = SplitMix64(6).normal((2, int(np.prod(thw)), 8))
    assert np.array_equal(wm(t64(x), thw).data, gm(t64(x)).data)


@given(st.integers(1, 2), st.integers(1, 7), st.integers(1, 7), st.integers(1, 4), st.integers(1, 4))
def test_window_partition_roundtrip(t, h, w, wh, ww):
    x = t64(np.arange(2 * t * h * w * 3, dtype=F64).reshape(2, t * h * w, 3))
    windows, layout = window_partition(x, (t, h, w), (wh, ww))
    eh, ew = min(wh, h), min(ww, w)
    assert windows.shape == (2 * -(-h // eh) * -(-w // ew), t * eh * ew, 3)
    assert np.array_equal(window_reverse(windows, layout).data, x.data)


# -- FFN and blocks ------------------------------------------------------------

def test_ffn_single_token_oracle_and_zero_output():
    ffn = FFN(4, 4, SplitMix64(0), dtype=F64)
    x = SplitMix64(1).normal((1, 1, 4))
    hidden = x[0, 0] @ ffn.fc1.weight.data + ffn.fc1.bias.data
    ref = np.array([gelu_tanh(v) for v in hidden]) @ ffn.fc2.weight.data + ffn.fc2.bias.data
    assert np.allclose(ffn(t64(x)).data[0, 0], ref, atol=1e-13)
    ffn.fc2.weight.data[...] = 0.0
    ffn.fc2.bias.data[...] = 0.0
    assert np.array_equal(ffn(t64(x)).data, np.zeros((1, 1, 4)))


@pytest.mark.parametrize("btype", ["L", "G", "W"])
def test_zeroed_block_is_identity(btype):
    cfg = BlockConfig(btype, 8, head_dim=4, window=(2, 2) if btype == "W" else None)
    blk = UniFormerBlock(cfg, SplitMix64(0), dtype=F64)
    zero_params(blk)
    x = SplitMix64(1).normal((2, 8, 1, 4, 4))
    assert np.array_equal(blk(t64(x)).data, x)


@pytest.mark.parametrize("btype", ["L", "G", "W"])
def test_block_eval_is_deterministic_and_shape_preserving(btype):
    cfg = BlockConfig(btype, 8, head_dim=4, window=(3, 3) if btype == "W" else None, local_kernel=(3, 3, 3),
                      dpe_kernel=(3, 3, 3))
    blk = UniFormerBlock(cfg, SplitMix64(0), dtype=F64).eval()
    x = t64(SplitMix64(1).normal((2, 8, 3, 5, 4)))
    with no_grad():
        a, b = blk(x).data, blk(x).data
    assert a.shape == x.shape
    assert np.array_equal(a, b)


def test_block_norm_kinds():
    from uniformer_kit.nn import BatchNorm, LayerNorm
    assert isinstance(UniFormerBlock(BlockConfig("L", 8), SplitMix64(0)).norm1, BatchNorm)
    assert isinstance(UniFormerBlock(BlockConfig("G", 8, head_dim=4), SplitMix64(0)).norm1, LayerNorm)
    with pytest.raises(ValueError):
        UniFormerBlock(BlockConfig("H", 8, head_dim=4), SplitMix64(0))


def test_training_drop_path_needs_rng_and_is_seeded():
    cfg = BlockConfig("G", 8, head_dim=4, drop_path_rate=0.5)
    blk = UniFormerBlock(cfg, SplitMix64(0), dtype=F64)
    x = t64(SplitMix64(1).normal((6, 8, 1, 2, 2)))
    with pytest.raises(ValueError):
        blk(x)
    assert np.array_equal(blk(x, SplitMix64(3)).data, blk(x, SplitMix64(3)).data)
    blk.eval()
    assert np.array_equal(blk(x).data, blk(x, SplitMix64(9)).data)


def test_scaled_logit_constant():
    assert GlobalMHRA(BlockConfig("G", 128, head_dim=64), SplitMix64(0)).scale == pytest.approx(1 / math.sqrt(64))
    assert GlobalMHRA(BlockConfig("G", 128, head_dim=64, qk_scale=False), SplitMix64(0)).scale == 1.0


def test_depthwise_2d_equals_3d_with_unit_temporal_kernel():
    r = SplitMix64(0)
    from uniformer_kit.nn import ConvSpec
    spec = ConvSpec.same_depthwise(3, (1, 3, 3))
    w, b = t64(r.normal(spec.weight_shape)), t64(r.normal(3))
    x = r.normal((1, 3, 1, 5, 5))
    y = conv3d(t64(x), w, b, spec).data
    for c in range(3):
        ref = np.zeros((5, 5))
        xp = np.pad(x[0, c, 0], 1)
        for i in range(5):
            for j in range(5):
                ref[i, j] = np.sum(xp[i:i + 3, j:j + 3] * w.data[c, 0, 0]) + b.data[c]
        assert np.allclose(y[0, c, 0], ref, atol=1e-12)


def test_block_type_parse():
    assert BlockType.parse("h") is BlockType.HOURGLASS
