import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doda import diffmath as dm
from doda.errors import GraphError, NonFiniteError, ShapeError
from doda.layers import GroupNorm, Linear


def test_every_registered_op_passes_gradcheck():
    results = dm.run_gradcheck_suite(seed=0)
    assert set(results) == set(dm.OPS)
    failed = {k: r.max_rel_error for k, r in results.items() if not r.passed}
    assert not failed


def test_gradcheck_catches_a_wrong_backward_rule(monkeypatch):
    """A sign error in one rule must make exactly that op fail."""
    original = dm.OPS["silu"].backward

    def negated(ctx, grad):
        return tuple(-g for g in original(ctx, grad))

    monkeypatch.setattr(dm.OPS["silu"], "backward", staticmethod(negated))
    results = dm.run_gradcheck_suite(seed=0)
    assert not results["silu"].passed
    assert results["sigmoid"].passed


def test_unregistered_case_is_reported_failed(monkeypatch):
    class Twice(dm.Function):
        kind = "twice"

        @staticmethod
        def forward(ctx, x):
            return 2 * x

        @staticmethod
        def backward(ctx, grad):
            return (2 * grad,)

    monkeypatch.setitem(dm.OPS, "twice", Twice)
    results = dm.run_gradcheck_suite(seed=0)
    assert not results["twice"].passed


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_matmul_gradient_matches_closed_form(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((3, 4)), r.standard_normal((4, 2))
    ta, tb = dm.Tensor(a, requires_grad=True), dm.Tensor(b, requires_grad=True)
    dm.backward(dm.reduce_sum(dm.matmul(ta, tb)))
    np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 2)))


def test_gradients_accumulate_over_shared_inputs():
    x = dm.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    dm.backward(dm.reduce_sum(dm.add(dm.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_needs_scalar_loss():
    x = dm.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        dm.backward(dm.scale(x, 2.0))


def test_unreached_parameters_get_zero_gradient():
    used = dm.Parameter(np.ones(2))
    unused = dm.Parameter(np.ones(3))
    dm.backward(dm.reduce_sum(used), params=[used, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        dm.add(dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((3, 2))))


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        dm.log(dm.Tensor(np.array([0.0, 1.0])))


def test_no_grad_records_nothing():
    x = dm.Tensor(np.ones(2), requires_grad=True)
    with dm.no_grad():
        y = dm.mul(x, x)
    assert not y.requires_grad
    assert y.inputs == ()


def test_default_dtype_is_restored():
    before = dm.DEFAULT_DTYPE
    with dm.default_dtype(np.float32):
        assert dm.Parameter(np.zeros(2)).dtype == np.float32
    assert dm.DEFAULT_DTYPE is before


def test_checkpoint_round_trip(tmp_path, rng):
    layer = Linear(4, 3, rng)
    path = tmp_path / "linear.ckpt"
    dm.save_parameters(path, layer, meta={"note": "x"})
    state, meta = dm.load_parameters(path, with_meta=True)
    assert meta == {"note": "x"}
    assert set(state) == {"weight", "bias"}
    np.testing.assert_allclose(state["weight"], layer.weight.data, rtol=1e-6)


def test_strict_load_reports_missing(rng):
    layer = Linear(2, 2, rng)
    with pytest.raises(KeyError):
        layer.load_state_dict({"weight": np.zeros((2, 2))})
    assert layer.load_state_dict({"weight": np.zeros((2, 2))}, strict=False) == ["bias"]


def test_load_rejects_wrong_shape(rng):
    layer = Linear(2, 2, rng)
    with pytest.raises(ShapeError):
        layer.load_state_dict({"weight": np.zeros((3, 2)), "bias": np.zeros(2)})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
def test_softmax_rows_sum_to_one(seed, shift):
    x = np.random.default_rng(seed).standard_normal((5, 7)) * 20 + shift
    with dm.no_grad():
        p = dm.softmax(dm.Tensor(x)).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
    with dm.no_grad():
        np.testing.assert_allclose(dm.softmax(dm.Tensor(x + 3.0)).data, p, rtol=1e-9)


def test_group_norm_normalises_each_group(rng):
    x = rng.standard_normal((2, 8, 5, 5)) * 3.0 + 2.0
    norm = GroupNorm(8, groups=4)
    with dm.no_grad():
        y = norm(dm.Tensor(x)).data
    grouped = y.reshape(2, 4, -1)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, rtol=1e-5)
    assert GroupNorm(6, groups=4).groups == 3
