import math

import numpy as np
import pytest

from dmrl import numerics
from dmrl.numerics import (
    AdamState,
    EPS_DIST,
    adam_step,
    dcor,
    dcor_gradient,
    dcov2,
    double_center,
    finite_difference_check,
    leaky_relu,
    leaky_relu_grad,
    log_sigmoid,
    pairwise_distance_matrix,
    sigmoid,
    softmax,
    softplus,
    softplus_grad,
    tanh_grad,
    xavier_init,
)


def brute_force_dcor(x, y):
    """Scalar-loop distance correlation, independent of the vectorized path."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]

    def dist_matrix(m):
        d = [[0.0] * n for _ in range(n)]
        for j in range(n):
            for k in range(n):
                s = sum((m[j][c] - m[k][c]) ** 2 for c in range(m.shape[1]))
                d[j][k] = math.sqrt(s + EPS_DIST)
        return d

    def center(d):
        row = [sum(d[j]) / n for j in range(n)]
        col = [sum(d[j][k] for j in range(n)) / n for k in range(n)]
        grand = sum(row) / n
        return [[d[j][k] - row[j] - col[k] + grand for k in range(n)] for j in range(n)]

    a = center(dist_matrix(x))
    b = center(dist_matrix(y))

    def cov2(p, q):
        total = sum(p[j][k] * q[j][k] for j in range(n) for k in range(n))
        return max(0.0, total / (n * n))

    den = math.sqrt(math.sqrt(cov2(a, a)) * math.sqrt(cov2(b, b)))
    if den < numerics.EPS_DEN:
        return 0.0
    return math.sqrt(cov2(a, b)) / den


class TestPairwiseDistance:
    def test_two_1d_points(self):
        d = pairwise_distance_matrix([[0.0], [3.0]])
        sqrt_eps = math.sqrt(EPS_DIST)
        assert d[0, 0] == pytest.approx(sqrt_eps)
        assert d[1, 1] == pytest.approx(sqrt_eps)
        assert d[0, 1] == pytest.approx(math.sqrt(9.0 + EPS_DIST))
        assert d[0, 1] == d[1, 0]

    def test_identical_rows(self):
        d = pairwise_distance_matrix([[1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(d, math.sqrt(EPS_DIST))

    def test_3_4_5_triangle(self):
        d = pairwise_distance_matrix([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
        assert d[0, 1] == pytest.approx(5.0, abs=1e-9)
        assert d[1, 2] == pytest.approx(5.0, abs=1e-9)
        assert d[0, 2] == pytest.approx(math.sqrt(EPS_DIST))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            pairwise_distance_matrix([[0.0], [np.nan]])

    def test_rejects_single_row(self):
        with pytest.raises(ValueError):
            pairwise_distance_matrix([[1.0, 2.0]])


class TestDoubleCenter:
    def test_zeros(self):
        assert np.allclose(double_center(np.zeros((3, 3))), 0.0)

    def test_hand_example(self):
        out = double_center([[0.0, 2.0], [2.0, 0.0]])
        assert np.allclose(out, [[-1.0, 1.0], [1.0, -1.0]])

    def test_row_and_column_sums_vanish(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            n = rng.integers(2, 9)
            m = rng.normal(size=(n, n))
            m = m + m.T
            out = double_center(m)
            scale = max(1.0, np.abs(m).max())
            assert np.all(np.abs(out.sum(axis=0)) < 1e-9 * scale)
            assert np.all(np.abs(out.sum(axis=1)) < 1e-9 * scale)


class TestDcov2:
    def test_zero(self):
        z = np.zeros((2, 2))
        assert dcov2(z, z) == 0.0

    def test_hand_example(self):
        a = np.array([[-1.0, 1.0], [1.0, -1.0]])
        assert dcov2(a, a) == pytest.approx(1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = double_center(pairwise_distance_matrix(rng.normal(size=(5, 2))))
        b = double_center(pairwise_distance_matrix(rng.normal(size=(5, 3))))
        assert dcov2(a, b) == dcov2(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dcov2(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDcor:
    def test_self_dependence(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(20, 4))
        assert dcor(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_constant_sample_is_zero(self):
        x = np.ones((6, 3))
        y = np.random.default_rng(1).normal(size=(6, 3))
        assert dcor(x, y) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            x = rng.normal(size=(7, 3))
            y = rng.normal(size=(7, 2))
            assert dcor(x, y) == pytest.approx(brute_force_dcor(x, y), abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=(6, 2))
            y = rng.normal(size=(6, 2))
            v = dcor(x, y)
            assert 0.0 <= v <= 1.0 + 1e-9
            assert v == pytest.approx(dcor(y, x), abs=1e-12)

    def test_sample_count_mismatch(self):
        with pytest.raises(ValueError):
            dcor(np.zeros((3, 2)), np.zeros((4, 2)))


class TestDcorGradient:
    def test_constant_input_zero_gradient(self):
        x = np.ones((5, 2))
        y = np.random.default_rng(3).normal(size=(5, 2))
        value, gx, gy = dcor_gradient(x, y)
        assert value == 0.0
        assert np.all(gx == 0.0)
        assert np.all(gy == 0.0)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(6, 3))
        y = rng.normal(size=(6, 3))
        _, gx, gy = dcor_gradient(x, y)
        err_x = finite_difference_check(lambda p: dcor(p, y), gx, x)
        err_y = finite_difference_check(lambda p: dcor(x, p), gy, y)
        assert err_x < 1e-4
        assert err_y < 1e-4

    def test_gradient_finite_under_column_permutation(self):
        rng = np.random.default_rng(23)
        for seed in range(5):
            x = np.random.default_rng(seed).normal(size=(8, 4))
            y = x[:, rng.permutation(4)]
            value, gx, gy = dcor_gradient(x, y)
            assert np.isfinite(value)
            assert np.all(np.isfinite(gx))
            assert np.all(np.isfinite(gy))


class TestActivations:
    def test_softplus_at_zero(self):
        assert float(softplus(0.0)) == pytest.approx(math.log(2.0))

    def test_softplus_overflow_safe(self):
        assert float(softplus(1000.0)) == pytest.approx(1000.0)
        assert float(softplus(-1000.0)) == 0.0

    def test_tanh_and_leaky_relu(self):
        assert float(np.tanh(0.0)) == 0.0
        assert float(leaky_relu(-1.0)) == pytest.approx(-0.01)
        assert float(leaky_relu(2.0)) == 2.0

    def test_softplus_derivative_is_sigmoid(self):
        assert float(softplus_grad(0.0)) == pytest.approx(0.5)
        xs = np.linspace(-4, 4, 9)
        assert np.allclose(softplus_grad(xs), sigmoid(xs))

    def test_log_sigmoid(self):
        assert float(log_sigmoid(0.0)) == pytest.approx(-math.log(2.0))
        assert float(log_sigmoid(-50.0)) == pytest.approx(-50.0)

    def test_derivatives_against_finite_differences(self):
        rng = np.random.default_rng(31)
        pairs = [
            (lambda x: float(np.sum(softplus(x))), softplus_grad),
            (lambda x: float(np.sum(np.tanh(x))), tanh_grad),
            (lambda x: float(np.sum(leaky_relu(x))), leaky_relu_grad),
            (lambda x: float(np.sum(sigmoid(x))), numerics.sigmoid_grad),
        ]
        for _ in range(20):
            point = rng.normal(size=(4,)) * 2.0
            for f, g in pairs:
                err = finite_difference_check(f, g(point), point)
                assert err < 1e-4


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        assert np.allclose(softmax([3.0, 3.0, 3.0]), [1 / 3, 1 / 3, 1 / 3])

    def test_exact_exponent_ratios(self):
        out = softmax(np.log([1.0, 2.0, 4.0]))
        assert np.allclose(out, [1 / 7, 2 / 7, 4 / 7])

    def test_shift_invariance_and_normalization(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            logits = rng.normal(size=5) * 10
            a = softmax(logits)
            b = softmax(logits + 123.456)
            assert np.allclose(a, b, atol=1e-12)
            assert abs(a.sum() - 1.0) < 1e-9
            assert np.all((a > 0) & (a < 1))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))


class TestXavierInit:
    def test_bound(self):
        w = xavier_init((128, 128), rng=0)
        bound = math.sqrt(6.0 / 256.0)
        assert np.all(np.abs(w) <= bound)
        assert w.shape == (128, 128)

    def test_determinism(self):
        assert np.array_equal(xavier_init((16, 8), rng=99), xavier_init((16, 8), rng=99))

    def test_mean_near_zero(self):
        w = xavier_init((1000, 1000), rng=5)
        assert abs(w.mean()) < 0.001

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError):
            xavier_init((0, 4), rng=0)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        param = np.array([1.0, -2.0, 3.0])
        state = AdamState.for_param(param)
        updated = adam_step(param, np.zeros(3), state)
        assert np.array_equal(updated, param)
        assert state.step_count == 1

    def test_first_step_hand_value(self):
        # m_hat = 1, v_hat = 1 after one unit-gradient step, so the move is
        # lr / (1 + eps) = lr * (1 - 1e-8) to first order.
        param = np.array([0.5])
        state = AdamState.for_param(param, learning_rate=0.0001)
        updated = adam_step(param, np.array([1.0]), state)
        expected_delta = 0.0001 / (1.0 + 1e-8)
        assert float(param[0] - updated[0]) == pytest.approx(expected_delta, rel=1e-12)

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(77)
            param = rng.normal(size=(4, 3))
            state = AdamState.for_param(param, learning_rate=0.01)
            for _ in range(25):
                grad = rng.normal(size=(4, 3))
                param = adam_step(param, grad, state)
            return param

        assert np.array_equal(run(), run())

    def test_second_moment_nonnegative_and_counts(self):
        param = np.zeros((3,))
        state = AdamState.for_param(param)
        for step in range(1, 6):
            param = adam_step(param, np.random.default_rng(step).normal(size=3), state)
            assert state.step_count == step
            assert np.all(state.second_moment >= 0.0)

    def test_non_finite_gradient_rejected(self):
        param = np.zeros((2,))
        state = AdamState.for_param(param)
        with pytest.raises(ValueError):
            adam_step(param, np.array([1.0, np.inf]), state)


class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact(self):
        err = finite_difference_check(lambda x: float(x[0] ** 2), np.array([6.0]), np.array([3.0]))
        assert err < 1e-9

    def test_softplus_sum(self):
        rng = np.random.default_rng(3)
        point = rng.normal(size=(5,))
        err = finite_difference_check(
            lambda x: float(np.sum(softplus(x))), softplus_grad(point), point
        )
        assert err < 1e-6
