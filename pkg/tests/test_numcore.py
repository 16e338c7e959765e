import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from linedp import numcore as nc


def _grad_of(loss_fn, *params):
    for p in params:
        p.zero_grad()
    nc.backward(loss_fn())
    return [p.grad.copy() for p in params]


class TestForwardValues:
    def test_relu(self):
        out = nc.relu(nc.constant([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.value, [[0.0, 2.0]])

    def test_sigmoid_midpoint(self):
        assert nc.sigmoid(nc.constant([[0.0]])).value.item() == 0.5

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = nc.sigmoid(nc.constant([[-800.0, 800.0]])).value
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.0, 1.0]])

    def test_matmul(self):
        out = nc.matmul(nc.constant([[1.0, 2.0]]), nc.constant([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.value, [[11.0]])

    def test_sum_pool(self):
        out = nc.sum_pool_1d(nc.constant([[1, 2, 3, 4, 5, 6]]), 3)
        np.testing.assert_array_equal(out.value, [[6.0, 15.0]])

    def test_sum_pool_stride_one_is_identity(self):
        v = np.random.default_rng(0).normal(size=(1, 7))
        np.testing.assert_array_equal(nc.sum_pool_1d(nc.constant(v), 1).value, v)

    def test_sum_pool_output_length(self):
        assert nc.sum_pool_1d(nc.constant(np.ones((1, 768))), 3).shape == (1, 256)

    def test_sum_pool_rejects_indivisible_length(self):
        with pytest.raises(nc.ConfigError):
            nc.sum_pool_1d(nc.constant(np.ones((1, 7))), 3)

    def test_diag_and_masked_zero(self):
        s = nc.constant(np.arange(9.0).reshape(3, 3))
        np.testing.assert_array_equal(nc.diag(s).value, [[0.0, 4.0, 8.0]])
        z = nc.masked_zero(s, rows=[1], cols=[1]).value
        assert np.all(z[1] == 0) and np.all(z[:, 1] == 0)
        assert z[2, 2] == 8.0

    def test_layer_norm_rows(self):
        x = np.random.default_rng(1).normal(size=(4, 6))
        out = nc.layer_norm_rows(nc.constant(x)).value
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-3)

    def test_dropout_is_identity_outside_training(self):
        x = np.ones((5, 5))
        out = nc.dropout(nc.constant(x), 0.2, None, train=False)
        np.testing.assert_array_equal(out.value, x)

    def test_dropout_rescales_survivors(self):
        out = nc.dropout(nc.constant(np.ones((200, 50))), 0.2, np.random.default_rng(0), True).value
        assert set(np.unique(out)) <= {0.0, 1.25}
        assert abs((out == 0).mean() - 0.2) < 0.01


class TestShapeErrors:
    def test_matmul_mismatch_names_op_and_shapes(self):
        with pytest.raises(nc.DimensionError, match=r"matmul.*\(1, 2\).*\(3, 1\)"):
            nc.matmul(nc.constant(np.ones((1, 2))), nc.constant(np.ones((3, 1))))

    def test_add_mismatch(self):
        with pytest.raises(nc.DimensionError, match="add"):
            nc.add(nc.constant(np.ones((2, 2))), nc.constant(np.ones((1, 2))))


class TestWeightedBce:
    def test_half_probability(self):
        loss = nc.weighted_bce(nc.constant([[0.5]]), 1.0, 1.0)
        assert loss.value.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_positive_weight(self):
        loss = nc.weighted_bce(nc.constant([[0.5]]), 1.0, 3.0)
        assert loss.value.item() == pytest.approx(3 * math.log(2), abs=1e-12)
        assert loss.value.item() == pytest.approx(2.0794, abs=1e-4)

    def test_weight_does_not_touch_negative_term(self):
        a = nc.weighted_bce(nc.constant([[0.3]]), 0.0, 1.0).value.item()
        b = nc.weighted_bce(nc.constant([[0.3]]), 0.0, 9.0).value.item()
        assert a == b == pytest.approx(-math.log(0.7))

    def test_perfect_prediction_tends_to_zero(self):
        assert nc.weighted_bce(nc.constant([[1.0 - 1e-12]]), 1.0).value.item() < 1e-6

    def test_clamp_keeps_loss_finite(self):
        loss = nc.weighted_bce(nc.constant([[0.0]]), 1.0).value.item()
        assert loss == pytest.approx(-math.log(nc.BCE_EPS))


class TestBackward:
    def test_linear_function_gradient_is_exact(self):
        rng = np.random.default_rng(2)
        W = nc.parameter(rng.normal(size=(3, 4)))
        x = nc.constant(rng.normal(size=(4, 1)))
        err = nc.gradient_check(lambda: nc.sum(nc.matmul(W, x)), [W])
        assert err < 1e-9

    def test_relu_of_positive_product(self):
        rng = np.random.default_rng(3)
        W = nc.parameter(rng.uniform(0.1, 1.0, size=(3, 4)))
        x = nc.constant(rng.uniform(0.1, 1.0, size=(4, 2)))
        err = nc.gradient_check(lambda: nc.sum(nc.relu(nc.matmul(W, x))), [W])
        assert err < 1e-6

    def test_relu_derivative_at_zero_is_zero(self):
        x = nc.parameter(np.array([[0.0, 1.0]]))
        (g,) = _grad_of(lambda: nc.sum(nc.relu(x)), x)
        np.testing.assert_array_equal(g, [[0.0, 1.0]])

    def test_shared_node_accumulates(self):
        x = nc.parameter(np.array([[3.0]]))
        (g,) = _grad_of(lambda: nc.mul(x, x), x)
        assert g.item() == 6.0

    def test_take_rows_repeated_index(self):
        table = nc.parameter(np.zeros((4, 2)))
        (g,) = _grad_of(lambda: nc.sum(nc.take_rows(table, [1, 1, 3])), table)
        np.testing.assert_array_equal(g, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_grads_outside_bce_clamp_are_zero(self):
        p = nc.parameter(np.array([[0.0]]))
        (g,) = _grad_of(lambda: nc.weighted_bce(p, 1.0), p)
        assert g.item() == 0.0

    def test_no_grad_records_nothing(self):
        W = nc.parameter(np.ones((2, 2)))
        with nc.no_grad():
            out = nc.matmul(W, W)
        assert out.parents == () and not out.requires_grad

    def test_checked_mode_names_the_op(self):
        x = nc.constant([[np.inf]])
        with nc.checked(), np.errstate(invalid="ignore"), pytest.raises(nc.NonFiniteError, match="mul"):
            nc.mul(x, nc.constant([[0.0]]))

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        r1 = nc.tanh(nc.matmul(nc.constant(a), nc.constant(b))).value
        r2 = nc.tanh(nc.matmul(nc.constant(a), nc.constant(b))).value
        assert r1.tobytes() == r2.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_matmul_gradient_property(a, b):
    A, B = nc.parameter(a.copy()), nc.parameter(b.copy())
    W = np.arange(6.0).reshape(3, 2)
    err = nc.gradient_check(lambda: nc.sum(nc.mul(nc.matmul(A, B), nc.constant(W))), [A, B])
    assert err < 1e-7


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-4, 4)))
def test_sigmoid_tanh_gradient_property(a):
    X = nc.parameter(a.copy())
    err = nc.gradient_check(lambda: nc.sum(nc.mul(nc.sigmoid(X), nc.tanh(X))), [X])
    assert err < 1e-7


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = nc.parameter(np.array([[1.0, -2.0]]))
        opt = nc.Adam([p], lr=0.001)
        opt.step([np.zeros((1, 2))])
        np.testing.assert_array_equal(p.value, [[1.0, -2.0]])
        np.testing.assert_array_equal(opt.m[0], 0.0)

    def test_zero_gradient_decays_moments(self):
        p = nc.parameter(np.zeros((1, 2)))
        opt = nc.Adam([p], lr=0.001)
        opt.step([np.ones((1, 2))])
        m1, v1 = opt.m[0].copy(), opt.v[0].copy()
        opt.step([np.zeros((1, 2))])
        np.testing.assert_allclose(opt.m[0], 0.9 * m1)
        np.testing.assert_allclose(opt.v[0], 0.999 * v1)

    def test_first_step_hand_value(self):
        p = nc.parameter(np.zeros((2, 2)))
        opt = nc.Adam([p], lr=0.001)
        opt.step([np.ones((2, 2))])
        # bias-corrected m_hat = 1, v_hat = 1
        np.testing.assert_allclose(p.value, -0.001 / (1 + 1e-8), rtol=0, atol=1e-15)

    def test_two_identical_steps_have_equal_size(self):
        p = nc.parameter(np.zeros((1, 1)))
        opt = nc.Adam([p], lr=0.001)
        opt.step([np.ones((1, 1))])
        u1 = p.value.item()
        opt.step([np.ones((1, 1))])
        u2 = p.value.item() - u1
        assert abs(abs(u2) - abs(u1)) < 1e-6

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(5)
        grads = rng.normal(size=(6, 3, 2))
        p = nc.parameter(np.zeros((3, 2)))
        opt = nc.Adam([p], lr=0.01)
        theta, m, v = np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2))
        for t, g in enumerate(grads, start=1):
            opt.step([g])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.value, theta, rtol=1e-12)
        assert opt.step_count == 6

    def test_uses_accumulated_grads_by_default(self):
        p = nc.parameter(np.array([[2.0]]))
        opt = nc.Adam([p], lr=0.1)
        nc.backward(nc.mul(p, p))
        opt.step()
        assert p.value.item() < 2.0


class TestGradientSuite:
    def test_every_case_passes(self):
        from linedp.verify import run_gradient_suite

        results = run_gradient_suite(seed=3)
        assert len(results) > 25
        for name, err in results:
            assert err < 1e-4, name
