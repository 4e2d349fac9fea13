import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vtn import autodiff as ad
from vtn.autodiff import MaskSource, Tensor, ShapeError, gradcheck, parameter


def _builder(op, *shapes, positive=False, ints=None):
    def build(seed):
        rng = np.random.default_rng(seed)
        params = []
        for s in shapes:
            data = rng.uniform(0.2, 1.5, s) if positive else rng.normal(size=s)
            params.append(parameter(data))
        weights = None

        def loss():
            nonlocal weights
            out = op(*params)
            if weights is None:
                weights = np.random.default_rng(seed + 99).normal(size=out.shape)
            return ad.sum_(ad.mul(out, Tensor(weights)))
        return params, loss
    return build


def _away_from_zero(shape, rng):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, 0.5 * np.sign(x) + 0.1, x)


PRIMITIVES = {
    "add": _builder(ad.add, (3, 4), (3, 4)),
    "add_broadcast": _builder(ad.add, (2, 3, 4), (4,)),
    "mul": _builder(ad.mul, (3, 4), (3, 4)),
    "mul_broadcast": _builder(ad.mul, (2, 3, 4), (3, 4)),
    "scale": _builder(lambda x: ad.scale(x, -2.5), (5,)),
    "sigmoid": _builder(ad.sigmoid, (3, 4)),
    "tanh": _builder(ad.tanh, (3, 4)),
    "softplus": _builder(ad.softplus, (3, 4)),
    "sum_axis": _builder(lambda x: ad.sum_(x, axis=1), (2, 3, 4)),
    "mean": _builder(lambda x: ad.mean(x, axis=-1), (2, 3, 4)),
    "matmul_2d": _builder(ad.matmul, (3, 4), (4, 5)),
    "matmul_shared": _builder(ad.matmul, (2, 3, 4), (4, 5)),
    "matmul_batched": _builder(ad.matmul, (2, 2, 3, 4), (2, 2, 4, 3)),
    "softmax": _builder(ad.softmax, (2, 3, 5)),
    "softmax_masked": _builder(lambda x: ad.softmax(x, np.tril(np.ones((4, 4), bool))), (2, 4, 4)),
    "layernorm": _builder(ad.layernorm, (3, 6), (6,), (6,)),
    "layernorm_plain": _builder(ad.layernorm, (2, 3, 6)),
    "conv1d": _builder(ad.conv1d, (2, 7, 3), (5, 3, 4)),
    "embed": _builder(lambda t: ad.embed(np.array([[0, 2, 2], [4, 1, 0]]), t), (5, 3)),
    "concat": _builder(lambda a, b: ad.concat([a, b], axis=1), (2, 3, 4), (2, 2, 4)),
    "slice": _builder(lambda x: ad.slice_(x, (slice(None), slice(1, 3))), (2, 4, 3)),
    "reshape": _builder(lambda x: ad.reshape(x, (4, 6)), (2, 3, 4)),
    "transpose": _builder(lambda x: ad.transpose(x, (0, 2, 1, 3)), (2, 3, 4, 2)),
    "dropout": _builder(lambda x: ad.dropout(x, MaskSource(3).keep_mask((4, 5), 0.5, 1)), (4, 5)),
}


def _kinked(op):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = parameter(_away_from_zero((4, 5), rng))
        w = rng.normal(size=(4, 5))
        return [x], lambda: ad.sum_(ad.mul(op(x), Tensor(w)))
    return build


PRIMITIVES["relu"] = _kinked(ad.relu)
PRIMITIVES["abs"] = _kinked(ad.abs_)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(3):
        assert gradcheck(PRIMITIVES[name], seed) < 1e-5, name


def test_shared_subexpression_accumulates():
    x = parameter(np.array([1.5, -2.0]))
    y = x * x
    ad.backward(ad.sum_(y + y * x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2)


def test_leaf_grads_accumulate_across_backward_calls():
    x = parameter(np.array([2.0]))
    ad.backward(ad.sum_(x * 3.0))
    ad.backward(ad.sum_(x * 3.0))
    assert x.grad[0] == 6.0


def test_backward_rejects_non_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)


def test_broadcast_only_by_leading_axes():
    a = parameter(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        ad.matmul(a, Tensor(np.ones((2, 3))))


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with ad.no_grad():
        y = ad.sum_(x * 2.0)
    assert not y.requires_grad
    ad.backward(y)
    assert x.grad is None


def test_strict_mode_rejects_nan():
    x = Tensor(np.array([1.0, np.nan]))
    with ad.strict_mode():
        with pytest.raises(FloatingPointError):
            ad.relu(x)
    ad.relu(x)  # tolerated outside strict mode


def test_softmax_masked_entries_exactly_zero():
    rng = np.random.default_rng(0)
    mask = np.tril(np.ones((5, 5), bool))
    y = ad.softmax(Tensor(rng.normal(size=(3, 5, 5)) * 50), mask).data
    assert np.all(y[:, ~mask] == 0.0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2))
    w = rng.normal(size=(3, 2, 4))
    ref = np.zeros((6, 4))
    xp = np.pad(x, ((1, 1), (0, 0)))
    for t in range(6):
        for k in range(3):
            ref[t] += xp[t + k] @ w[k]
    np.testing.assert_allclose(ad.conv1d(Tensor(x), Tensor(w)).data, ref, atol=1e-12)


def test_layernorm_output_statistics():
    x = np.random.default_rng(2).normal(3.0, 4.0, size=(5, 16))
    y = ad.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-5)


def test_mask_source_is_counter_based():
    a = MaskSource(5, stream=2).keep_mask((3, 4), 0.5, 7)
    b = MaskSource(5, stream=2).keep_mask((3, 4), 0.5, 7)
    c = MaskSource(5, stream=3).keep_mask((3, 4), 0.5, 7)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert MaskSource(5).keep_mask((2,), 0.0) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_sum_of_product_gradient_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(n, m)))
    b = rng.normal(size=(n, m))
    ad.backward(ad.sum_(ad.mul(a, Tensor(b))))
    assert np.array_equal(a.grad, b)
