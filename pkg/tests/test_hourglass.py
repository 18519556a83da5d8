import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uniformer_kit.analyzer import count_macs
from uniformer_kit.autodiff import Tensor, no_grad
from uniformer_kit.config import ModelConfig, StageConfig
from uniformer_kit.core import BlockConfig, GlobalMHRA
from uniformer_kit.hourglass import (HourglassBlock, ShrinkPlan, compute_importance, importance_from_logits,
                                     kept_count, recover_tokens, reduced_count, select_tokens, shrink_tokens)
from uniformer_kit.nn import LayerNorm
from uniformer_kit.rng import SplitMix64

F64 = np.float64


def t64(a):
    return Tensor(np.asarray(a, dtype=F64))


def test_hand_example_keeps_top_half_and_fuses_rest():
    x = SplitMix64(0).normal((1, 4, 3))
    xs, plan = shrink_tokens(t64(x), t64([[0.4, 0.3, 0.2, 0.1]]), 0.5)
    assert plan.kept.tolist() == [[0, 1]]
    assert plan.discarded.tolist() == [[2, 3]]
    assert xs.shape == (1, 3, 3)
    assert np.allclose(xs.data[0, 2], 2 / 3 * x[0, 2] + 1 / 3 * x[0, 3], atol=1e-15)
    assert np.array_equal(xs.data[0, :2], x[0, :2])


def test_ties_keep_lowest_indices_with_uniform_fusion():
    x = SplitMix64(1).normal((1, 6, 2))
    xs, plan = shrink_tokens(t64(x), t64(np.full((1, 6), 1 / 6)), 0.5)
    assert plan.kept.tolist() == [[0, 1, 2]]
    assert np.allclose(plan.fused_weights, 1 / 3)


def test_ratio_one_is_identity():
    x = t64(SplitMix64(2).normal((2, 5, 4)))
    xs, plan = shrink_tokens(x, t64(SplitMix64(3).random((2, 5))), 1.0)
    assert xs is x and plan.identity and plan.reduced_len == 5
    assert recover_tokens(xs, plan) is xs


def test_at_least_one_token_kept_and_ratio_validated():
    assert kept_count(3, 0.1) == 1
    assert reduced_count(3, 0.1) == 2
    assert reduced_count(196, 0.5) == 99
    with pytest.raises(ValueError):
        kept_count(4, 0.0)
    with pytest.raises(ValueError):
        kept_count(4, 1.5)


def test_recover_replicates_representative():
    x = SplitMix64(4).normal((2, 7, 3))
    imp = SplitMix64(5).random((2, 7))
    imp /= imp.sum(axis=1, keepdims=True)
    xs, plan = shrink_tokens(t64(x), t64(imp), 0.4)
    y = recover_tokens(xs, plan).data
    for n in range(2):
        for j in plan.kept[n]:
            assert np.array_equal(y[n, j], x[n, j])
        for j in plan.discarded[n]:
            assert np.array_equal(y[n, j], xs.data[n, -1])


def test_recover_rejects_length_mismatch():
    _, plan = shrink_tokens(t64(np.zeros((1, 4, 2))), t64([[0.4, 0.3, 0.2, 0.1]]), 0.5)
    with pytest.raises(ValueError):
        recover_tokens(t64(np.zeros((1, 4, 2))), plan)


@given(st.integers(1, 40), st.floats(0.05, 1.0), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_plan_partitions_tokens(length, ratio, seed):
    r = SplitMix64(seed)
    imp = r.random((2, length)) + 1e-3
    imp /= imp.sum(axis=1, keepdims=True)
    x = t64(r.normal((2, length, 3)))
    xs, plan = shrink_tokens(x, t64(imp), ratio)
    k = kept_count(length, ratio)
    assert xs.shape[1] == reduced_count(length, ratio)
    for n in range(2):
        both = np.concatenate([plan.kept[n], plan.discarded[n]])
        assert sorted(both.tolist()) == list(range(length))
        assert np.all(np.diff(plan.kept[n]) > 0)
        if not plan.identity:
            assert plan.kept.shape[1] == k
            assert plan.fused_weights[n].sum() == pytest.approx(1.0, abs=1e-6)
            assert imp[n, plan.kept[n]].min() >= imp[n, plan.discarded[n]].max()
    y = recover_tokens(xs, plan)
    assert y.shape == x.shape


def test_select_tokens_stable_order():
    assert select_tokens(np.array([[0.1, 0.3, 0.3, 0.3]]), 0.5).tolist() == [[1, 2]]


def _importance_setup(x, seed=0):
    cfg = BlockConfig("H", 8, head_dim=4)
    return LayerNorm(8, dtype=F64), GlobalMHRA(cfg, SplitMix64(seed), dtype=F64)


def test_importance_identical_tokens_is_uniform():
    ln, m = _importance_setup(None)
    tok = SplitMix64(1).normal((1, 1, 8))
    a = compute_importance(t64(np.repeat(tok, 5, axis=1)), t64(SplitMix64(2).normal((1, 1, 8))), ln, m)
    assert np.allclose(a.data, 0.2, atol=1e-15)


@given(st.integers(1, 12), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_importance_sums_to_one_and_is_fixed_point(length, seed):
    ln, m = _importance_setup(None, seed)
    r = SplitMix64(seed + 1)
    x, s = t64(r.normal((2, length, 8))), t64(r.normal((2, 1, 8)))
    a = compute_importance(x, s, ln, m)
    assert np.allclose(a.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(compute_importance(x, s, ln, m, prev=a).data, a.data, atol=1e-15)


def test_importance_shift_invariance():
    r = SplitMix64(3)
    logits = r.normal((2, 4, 9))
    a = importance_from_logits(t64(logits)).data
    b = importance_from_logits(t64(logits + 7.5)).data
    assert np.allclose(a, b, atol=1e-14)
    with pytest.raises(ValueError):
        importance_from_logits(t64(np.zeros((1, 2, 0))))


def test_running_mean_averages():
    logits = SplitMix64(4).normal((1, 2, 3))
    prev = t64([[0.2, 0.3, 0.5]])
    a = importance_from_logits(t64(logits)).data
    assert np.allclose(importance_from_logits(t64(logits), prev).data, (a + prev.data) / 2)


def _hblock(shrink=True, ratio=0.5, seed=0):
    return HourglassBlock(BlockConfig("H", 8, head_dim=4), SplitMix64(seed), ratio, shrink, dtype=F64)


def test_block_shapes_and_plan():
    hb = _hblock()
    x = t64(SplitMix64(1).normal((2, 8, 1, 4, 4)))
    s = t64(SplitMix64(2).normal((2, 1, 8)))
    y, s2, a = hb(x, s)
    assert y.shape == x.shape and s2.shape == s.shape and a.shape == (2, 16)
    assert hb.last_plan.kept.shape == (2, 8)
    assert np.allclose(a.data.sum(axis=1), 1.0)


def test_block_importance_matches_full_attention_row():
    """Importance from the reused keys equals the score row of full joint attention."""
    hb = _hblock(shrink=False)
    x = t64(SplitMix64(1).normal((2, 8, 1, 3, 3)))
    s = t64(SplitMix64(2).normal((2, 1, 8)))
    _, _, a_full = hb(x, s)
    hb.shrink = True
    _, _, a_shrink = hb(x, s)
    assert np.allclose(a_full.data, a_shrink.data, atol=1e-13)


def test_ratio_one_block_equals_unshrunk_block():
    x = t64(SplitMix64(1).normal((2, 8, 1, 3, 3)))
    s = t64(SplitMix64(2).normal((2, 1, 8)))
    y1, s1, _ = _hblock(shrink=True, ratio=1.0)(x, s)
    y2, s2, _ = _hblock(shrink=False)(x, s)
    assert np.allclose(y1.data, y2.data, atol=1e-13) and np.allclose(s1.data, s2.data, atol=1e-13)


def test_shrunk_block_matches_explicit_composition():
    """DPE, shrink, joint attention + FFN over [score; reduced], recover."""
    hb = _hblock(seed=3)
    x = t64(SplitMix64(1).normal((1, 8, 1, 4, 4)))
    s = t64(SplitMix64(2).normal((1, 1, 8)))
    with no_grad():
        y, s_out, a = hb(x, s)
        d = hb.dpe(x)
        tok = d.data.reshape(1, 8, 16).transpose(0, 2, 1)
        xs, plan = shrink_tokens(t64(tok), a, 0.5)
        seq = t64(np.concatenate([s.data, xs.data], axis=1))
        seq = seq + hb.mhra(hb.norm1(seq))
        seq = seq + hb.ffn(hb.norm2(seq))
        rec = recover_tokens(t64(seq.data[:, 1:]), plan).data
    assert np.allclose(y.data.reshape(1, 8, 16).transpose(0, 2, 1), rec, atol=1e-12)
    assert np.allclose(s_out.data, seq.data[:, :1], atol=1e-12)


def test_ratio_one_cost_is_global_block_plus_one_token():
    def cfg(t, ratio):
        return ModelConfig(stages=(StageConfig(1, 16, "L"), StageConfig(1, 32, "L"), StageConfig(1, 64, t),
                                   StageConfig(1, 128, "L")), head_dim=16, input_spec=(3, 1, 64, 64),
                           shrink_ratio=ratio, shrink_first=True, aux_head=False)

    def block_macs(rep):
        return sum(r.macs for r in rep.rows if r.path.startswith("stages.2.blocks.0"))

    h = block_macs(count_macs(cfg("H", 1.0)))
    g = block_macs(count_macs(cfg("G", 1.0)))
    length, c = 16, 64
    extra = 4 * c * c + 2 * ((length + 1) ** 2 - length ** 2) * c + 2 * 4 * c * c
    assert h - g == extra


def test_ffn_cost_drops_to_reduced_fraction():
    def cfg(t):
        return ModelConfig(stages=(StageConfig(1, 16, "L"), StageConfig(1, 32, "L"), StageConfig(1, 64, t),
                                   StageConfig(1, 128, "L")), head_dim=16, input_spec=(3, 1, 224, 224),
                           shrink_first=True, aux_head=False)

    def ffn(c):
        return sum(r.macs for r in count_macs(c).rows if r.path.startswith("stages.2.blocks.0.ffn"))

    # 196 tokens: 98 kept, one fused representative, one score token
    assert ffn(cfg("H")) * 196 == ffn(cfg("G")) * 100


def test_identity_plan_helpers():
    plan = ShrinkPlan.identity_plan(np.full((1, 3), 1 / 3))
    assert plan.identity and plan.recover_index().tolist() == [[0, 1, 2]]
