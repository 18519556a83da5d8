import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import gelu_tanh, naive_matmul, softmax_row
from uniformer_kit.autodiff import Tensor, backward, concat, gather_rows, gradcheck, matmul, no_grad, pad, tensor
from uniformer_kit.checks import gradient_cases
from uniformer_kit.rng import SplitMix64

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_add_example():
    assert np.array_equal((tensor([1.0, 2.0]) + tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        tensor([1.0, 2.0]) + tensor([1.0, 2.0, 3.0])


def test_scalar_operands():
    x = t64([1.0, -2.0])
    assert np.allclose((2 * x - 1).data, [1.0, -5.0])
    assert np.allclose((1 / t64([2.0, 4.0])).data, [0.5, 0.25])


def test_gelu_values():
    assert tensor([0.0]).gelu().data[0] == 0.0
    assert tensor([2.0], dtype=np.float64).gelu().data[0] == pytest.approx(1.9546, abs=1e-3)
    xs = np.linspace(-4, 4, 17)
    assert np.allclose(t64(xs).gelu().data, [gelu_tanh(v) for v in xs], atol=1e-14)


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(t64(np.eye(2)), t64(m)).data, m)
    assert matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_against_triple_loop():
    r = SplitMix64(0)
    a, b = r.normal((5, 7)), r.normal((7, 3))
    assert np.max(np.abs(matmul(t64(a), t64(b)).data - naive_matmul(a, b))) < 1e-12


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_matmul_oracle_property(n, k, m, seed):
    r = SplitMix64(seed)
    a, b = r.normal((n, k)), r.normal((k, m))
    assert np.max(np.abs(matmul(t64(a), t64(b)).data - naive_matmul(a, b))) < 1e-12


def test_matmul_batch_broadcast_and_errors():
    r = SplitMix64(1)
    a, b = t64(r.normal((4, 2, 3))), t64(r.normal((1, 3, 5)))
    out = matmul(a, b)
    assert out.shape == (4, 2, 5)
    with pytest.raises(ValueError, match="inner"):
        matmul(a, t64(r.normal((4, 2, 5))))
    with pytest.raises(ValueError, match="batch"):
        matmul(a, t64(r.normal((3, 3, 5))))
    with pytest.raises(ValueError, match="rank"):
        matmul(t64([1.0, 2.0]), t64([[1.0], [2.0]]))


def test_softmax_examples():
    assert np.allclose(tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])
    assert np.allclose(tensor([1000.0, 1000.0]).softmax().data, [0.5, 0.5])
    assert np.allclose(t64([0.0, math.log(3.0)]).softmax().data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = t64(x, grad=False).softmax(-1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    for row, ref in zip(p, x):
        assert np.allclose(row, softmax_row(list(ref)), atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    assert np.allclose(t64(x).softmax().data, t64(x + c).softmax().data, atol=1e-12)


def test_backward_sum_and_square():
    x = t64([[1.0, -2.0], [3.0, 0.5]])
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 2)))
    y = t64([1.0, -2.0, 3.0])
    (y * y).sum().backward()
    assert np.array_equal(y.grad, 2 * y.data)


def test_shared_subexpression_accumulates():
    x = t64([3.0])
    (x + x).sum().backward()
    assert x.grad.tolist() == [2.0]


def test_repeated_backward_accumulates_until_zeroed():
    x = t64([1.0, 2.0])
    for _ in range(3):
        (x * 2.0).sum().backward()
    assert x.grad.tolist() == [6.0, 6.0]
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar_root():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = t64([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_diamond_graph_gradient():
    x = t64([0.7])
    a = x.exp()
    y = a * a + a.tanh()
    y.sum().backward()
    e = math.exp(0.7)
    assert x.grad[0] == pytest.approx(2 * e * e + (1 - math.tanh(e) ** 2) * e, rel=1e-12)


def test_pad_concat_gather_values():
    x = t64(np.arange(6.0).reshape(2, 3))
    assert pad(x, ((0, 1), (1, 0))).data.tolist() == [[0, 0, 1, 2], [0, 3, 4, 5], [0, 0, 0, 0]]
    assert concat([x, x], axis=1).shape == (2, 6)
    g = gather_rows(t64(np.arange(12.0).reshape(2, 3, 2)), np.array([[2, 2], [0, 1]]))
    assert g.data.tolist() == [[[4, 5], [4, 5]], [[6, 7], [8, 9]]]


CASE_NAMES = [name for name, _, _ in gradient_cases(0)]

# The local block's value-norm scale feeds a per-channel depthwise conv and then a
# train-mode BN, which cancels it except through the BN epsilon. Its true gradient
# is ~1e-6, below what an h=1e-5 central difference resolves to 1e-4 relative on
# this draw (rounding noise ~1.6e-10). The two tests after this one check that
# direction independently.
FD_UNRESOLVED = {("block_L", 1): "value-norm scale gradient is O(bn eps); h=1e-5 rounding noise gives 1.1e-4"}


def _fd_param(name, seed):
    reason = FD_UNRESOLVED.get((name, seed))
    marks = [pytest.mark.xfail(strict=True, reason=reason)] if reason else []
    return pytest.param(name, seed, id=f"{name}-{seed}", marks=marks)


@pytest.mark.parametrize("name,seed", [_fd_param(n, s) for n in CASE_NAMES for s in range(5)])
def test_finite_differences(name, seed):
    cases = {n: (fn, inputs) for n, fn, inputs in gradient_cases(seed)}
    fn, inputs = cases[name]
    assert gradcheck(fn, inputs, eps=1e-5, max_elements=32, seed=seed) < 1e-4


def _local_block_value_norm_grad(seed, bn_eps=None):
    fn, inputs = {n: (f, i) for n, f, i in gradient_cases(seed)}["block_L"]
    blk = fn.__kwdefaults__["blk"]
    if bn_eps is not None:
        from dataclasses import replace
        blk.mhra.norm_a.spec = replace(blk.mhra.norm_a.spec, eps=bn_eps)
    scale = blk.mhra.norm_v.weight
    proj = SplitMix64(99).uniform(-1.0, 1.0, fn(*inputs).shape)
    for t in inputs:
        t.zero_grad()
    backward((fn(*inputs) * Tensor(proj)).sum())

    def f():
        with no_grad():
            return float(np.sum(fn(*inputs).data * proj))
    return scale, scale.grad.copy(), inputs[11].grad.copy(), f


@pytest.mark.parametrize("seed", range(5))
def test_value_norm_scale_gradient_at_resolvable_step(seed):
    scale, grad, _, f = _local_block_value_norm_grad(seed)
    h = 1e-3
    num = np.zeros_like(grad)
    for i in range(grad.size):
        orig = scale.data[i]
        scale.data[i] = orig + h
        fp = f()
        scale.data[i] = orig - h
        fm = f()
        scale.data[i] = orig
        num[i] = (fp - fm) / (2 * h)
    assert np.max(np.abs(grad - num) / np.maximum(np.abs(grad), np.abs(num))) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_value_norm_scale_gradient_vanishes_without_bn_eps(seed):
    _, grad, other, _ = _local_block_value_norm_grad(seed, bn_eps=0.0)
    assert np.max(np.abs(grad)) < 1e-12
    assert np.max(np.abs(other)) > 0.1


def test_gradcheck_detects_a_wrong_backward():
    x = t64([0.3, -1.2])

    def bad(x):
        return Tensor._make(x.data ** 2, (x,), lambda g: (g * 3 * x.data,))

    assert gradcheck(bad, [x]) > 0.1


def test_gradcheck_requires_contiguous_inputs():
    x = Tensor(np.asfortranarray(np.ones((3, 2))), requires_grad=True, dtype=np.float64)
    if x.data.flags.c_contiguous:
        pytest.skip("constructor already copies to C order")
    with pytest.raises(ValueError):
        gradcheck(lambda x: x * 2.0, [x])
