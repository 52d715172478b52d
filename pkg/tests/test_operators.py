import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsengep.imaging import gradient_operator
from tsengep.metric_algebra import MetricError, MetricOperator
from tsengep.operators import (
    LinearMap,
    LipschitzMap,
    ResolventOperator,
    abs_value,
    box01,
    conjugate,
    grad_quadratic,
    l1_conj,
    l1_translated,
    power_iteration_norm,
    project_tv_dual_ball,
    project_tv_dual_ball_scaled,
    prox_box01,
    prox_l1_conj,
    prox_l1_translated,
    prox_with_metric,
    prox_with_metric_scaled,
    quadratic_gradient,
    resolvent_of_inverse,
    soft_threshold,
    tv_dual_ball,
)

GRID = np.linspace(-10, 10, 200001)  # spacing 1e-4
STEP = GRID[1] - GRID[0]
finite = st.floats(-5, 5, allow_nan=False)


def grid_argmin(f, x, gamma, grid=GRID):
    """Brute-force minimizer of f(y) + (y - x)^2 / (2 gamma) on a grid."""
    vals = f(grid) + (grid - x) ** 2 / (2 * gamma)
    return grid[np.argmin(vals)]


class TestClosedForms:
    def test_box(self):
        np.testing.assert_array_equal(prox_box01([-0.5, 0.3, 1.7]), [0, 0.3, 1])
        x = np.array([0.0, 0.25, 1.0])
        np.testing.assert_array_equal(prox_box01(x), x)

    def test_box_grid(self):
        g = np.linspace(0, 1, 100001)
        assert grid_argmin(lambda y: 0 * y, 0.5, 1.0, g) == pytest.approx(0.5, abs=1e-5)
        assert prox_box01([0.5])[0] == 0.5

    @given(arrays(np.float64, 6, elements=finite))
    def test_box_idempotent(self, x):
        np.testing.assert_array_equal(prox_box01(prox_box01(x)), prox_box01(x))

    def test_l1_conj(self):
        np.testing.assert_array_equal(prox_l1_conj([2, -3], 1, [0, 0]), [1, -1])
        assert prox_l1_conj([0.5], 0.2, [1])[0] == pytest.approx(0.3, abs=1e-15)
        with pytest.raises(ValueError):
            prox_l1_conj([1, 2], 1, [1])

    def test_l1_translated(self):
        assert prox_l1_translated([2.5], 1, [0])[0] == 1.5
        assert prox_l1_translated([-0.5], 1, [0])[0] == 0
        b = np.array([0.3, -2.0])
        np.testing.assert_array_equal(prox_l1_translated(b, 0.7, b), b)
        with pytest.raises(ValueError):
            prox_l1_translated([1, 2], 1, [0])

    @pytest.mark.parametrize("x,gamma,b", [(2.5, 1.0, 0.0), (-0.5, 1.0, 0.0), (1.3, 0.4, 0.7), (-3.0, 2.0, 1.0)])
    def test_l1_translated_grid(self, x, gamma, b):
        expected = grid_argmin(lambda y: np.abs(y - b), x, gamma)
        assert prox_l1_translated([x], gamma, [b])[0] == pytest.approx(expected, abs=STEP)

    @pytest.mark.parametrize("p,gamma,b", [(2.0, 1.0, 0.0), (0.5, 0.2, 1.0), (-0.3, 0.5, -4.0)])
    def test_l1_conj_grid(self, p, gamma, b):
        # g*(q) = <q, b> on [-1, 1]
        g = np.linspace(-1, 1, 200001)
        expected = grid_argmin(lambda q: q * b, p, gamma, g)
        assert prox_l1_conj([p], gamma, [b])[0] == pytest.approx(expected, abs=2e-5)

    @given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite), st.floats(0.05, 5))
    def test_l1_moreau(self, p, b, gamma):
        # prox_{gamma g*}(p) + gamma prox_{g/gamma}(p/gamma) = p
        lhs = prox_l1_conj(p, gamma, b) + gamma * prox_l1_translated(p / gamma, 1 / gamma, b)
        np.testing.assert_allclose(lhs, p, atol=1e-10)

    def test_soft_threshold_kink(self):
        np.testing.assert_array_equal(soft_threshold([0.0, -0.0, 1.0], 1.0), [0.0, 0.0, 0.0])

    def test_tv_ball(self):
        f = np.array([[[3.0]], [[4.0]]])
        np.testing.assert_allclose(project_tv_dual_ball(f, 1)[:, 0, 0], [0.6, 0.8])
        g = np.array([[[0.3]], [[0.4]]])
        np.testing.assert_array_equal(project_tv_dual_ball(g, 1), g)
        np.testing.assert_array_equal(project_tv_dual_ball(f, 5), f)

    def test_tv_ball_grid(self):
        # 2-D brute force for one pixel: nearest point of the disc
        t = np.linspace(-1, 1, 801)
        P, Q = np.meshgrid(t, t, indexing="ij")
        inside = P ** 2 + Q ** 2 <= 1
        for point in [(3.0, 4.0), (0.2, -0.1), (-0.9, 0.9)]:
            d = np.where(inside, (P - point[0]) ** 2 + (Q - point[1]) ** 2, np.inf)
            i = np.unravel_index(np.argmin(d), d.shape)
            got = project_tv_dual_ball(np.array(point).reshape(2, 1, 1), 1.0).ravel()
            np.testing.assert_allclose(got, [P[i], Q[i]], atol=2 * (t[1] - t[0]))

    @given(arrays(np.float64, (2, 3, 3), elements=finite), st.floats(0.01, 3))
    def test_tv_ball_inside(self, f, lam):
        out = project_tv_dual_ball(f, lam)
        assert np.all(np.sqrt(out[0] ** 2 + out[1] ** 2) <= lam * (1 + 1e-12))

    def test_tv_ball_scaled_radius(self):
        f = np.array([[[3.0]], [[4.0]]])
        out = project_tv_dual_ball_scaled(f, 1.0, 2.0)
        assert math.hypot(*out.ravel()) == pytest.approx(2.0)
        np.testing.assert_array_equal(project_tv_dual_ball_scaled(f, 1.0, 1.0), project_tv_dual_ball(f, 1.0))

    def test_grad_quadratic(self):
        np.testing.assert_allclose(grad_quadratic([1, -2], 0.003), [0.006, -0.012], rtol=1e-15)
        np.testing.assert_array_equal(grad_quadratic(np.zeros(3), 0.5), 0)
        assert quadratic_gradient(0.003).beta == 0.006

    def test_grad_quadratic_finite_difference(self):
        rng = np.random.default_rng(0)
        lam, h = 0.37, 1e-5
        x = rng.standard_normal(4)
        fd = np.array([(lam * np.sum((x + h * e) ** 2) - lam * np.sum((x - h * e) ** 2)) / (2 * h)
                       for e in np.eye(4)])
        np.testing.assert_allclose(grad_quadratic(x, lam), fd, atol=1e-6)


PROXABLES = [abs_value(), box01(), l1_translated([0.3, -1.0, 2.0]), l1_conj([0.3, -1.0, 2.0]),
             conjugate(l1_translated([0.5, 0.5, -0.5]))]


@pytest.mark.parametrize("f", PROXABLES, ids=lambda f: f.descriptor)
def test_firm_nonexpansive(f):
    rng = np.random.default_rng(1)
    for _ in range(200):
        x, y = 3 * rng.standard_normal(3), 3 * rng.standard_normal(3)
        gamma = rng.uniform(0.1, 3)
        px, py = f.prox(gamma, x), f.prox(gamma, y)
        d = px - py
        assert d @ d <= d @ (x - y) + 1e-10


def test_tv_ball_firm_nonexpansive():
    f = tv_dual_ball(0.5)
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, y = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
        d = f.prox(1.0, x) - f.prox(1.0, y)
        assert np.vdot(d, d) <= np.vdot(d, x - y) + 1e-10


class TestMetricProx:
    def test_tau_one_bit_identical(self):
        x = np.random.default_rng(3).standard_normal(7)
        for f in PROXABLES[:2]:
            np.testing.assert_array_equal(prox_with_metric(f, 0.7, 1.0, x), f.prox(0.7, x))
            np.testing.assert_array_equal(prox_with_metric_scaled(f, 0.7, 1.0, x), f.prox(0.7, x))

    def test_abs_tau_two_brute_force(self):
        # argmin |y| + (y - 6)^2 / (2 tau), tau = 2
        expected = grid_argmin(np.abs, 6.0, 2.0)
        assert expected == pytest.approx(4.0, abs=STEP)
        assert prox_with_metric(abs_value(), 1.0, 2.0, np.array([6.0]))[0] == pytest.approx(expected, abs=STEP)

    def test_box_tau_two_brute_force(self):
        g = np.linspace(0, 1, 100001)
        expected = grid_argmin(lambda y: 0 * y, 3.0, 2.0, g)
        assert prox_with_metric(box01(), 1.0, 2.0, np.array([3.0]))[0] == expected == 1.0
        # the rescaled form leaves the box
        assert prox_with_metric_scaled(box01(), 1.0, 2.0, np.array([3.0]))[0] == 2.0

    @given(st.floats(-5, 5), st.floats(0.1, 3), st.floats(0.1, 3))
    def test_abs_matches_definition(self, x, gamma, tau):
        expected = grid_argmin(lambda y: gamma * np.abs(y), x, tau)
        assert prox_with_metric(abs_value(), gamma, tau, np.array([x]))[0] == pytest.approx(expected, abs=2 * STEP)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            prox_with_metric(abs_value(), 0.0, 1.0, np.ones(1))


class TestResolvents:
    def test_inverse_examples(self):
        g = abs_value()
        assert resolvent_of_inverse(g, 1.0, np.array([0.5]))[0] == 0.5
        assert resolvent_of_inverse(g, 1.0, np.array([2.0]))[0] == 1.0

    @given(arrays(np.float64, 4, elements=finite), st.floats(0.05, 10))
    def test_moreau_identity(self, x, gamma):
        for g in (abs_value(), l1_translated([0.1, -0.2, 0.3, 0.0])):
            recon = g.prox(gamma, x) + gamma * resolvent_of_inverse(g, 1 / gamma, x / gamma)
            np.testing.assert_allclose(recon, x, atol=1e-10)

    def test_conjugate_of_l1_translated_is_l1_conj(self):
        b = np.array([0.3, -1.0, 2.0])
        x = np.random.default_rng(4).standard_normal(3) * 3
        np.testing.assert_allclose(conjugate(l1_translated(b)).prox(0.4, x), l1_conj(b).prox(0.4, x), atol=1e-12)

    def test_subdifferential_identity_metric(self):
        f = abs_value()
        J = ResolventOperator.subdifferential(f)
        x = np.linspace(-2, 2, 9)
        np.testing.assert_allclose(J(0.3, MetricOperator.identity(), x), f.prox(0.3, x), atol=1e-10)

    def test_subdifferential_diagonal_metric(self):
        J = ResolventOperator.subdifferential(abs_value())
        d = np.array([1.0, 2.0, 0.5])
        x = np.array([3.0, 3.0, 3.0])
        np.testing.assert_allclose(J(1.0, MetricOperator.diagonal(d), x), 3.0 - d)

    def test_dense_metric_needs_custom_resolvent(self):
        J = ResolventOperator.subdifferential(abs_value())
        with pytest.raises(MetricError):
            J(1.0, MetricOperator.dense(np.eye(2), 1, 1), np.ones(2))

    def test_nonseparable_diagonal_rejected(self):
        J = ResolventOperator.subdifferential(tv_dual_ball(1.0))
        with pytest.raises(MetricError):
            J(1.0, MetricOperator.diagonal(np.ones(8)), np.ones((2, 2, 2)))

    def test_resolvent_definition(self):
        # J_{gamma U A}(x) = p  <=>  U^{-1}(x - p) / gamma in A p, checked for A = d|.| via the subgradient
        J = ResolventOperator.subdifferential(abs_value())
        U = MetricOperator.diagonal([0.5, 2.0, 1.5, 1.0])
        x = np.array([2.0, -0.3, 0.1, -5.0])
        p = J(0.8, U, x)
        g = U.apply_inverse(x - p) / 0.8
        for pi, gi in zip(p, g):
            if pi != 0:
                assert gi == pytest.approx(np.sign(pi))
            else:
                assert abs(gi) <= 1 + 1e-12


class TestMaps:
    def test_linear_adjoint_random(self):
        rng = np.random.default_rng(5)
        L = LinearMap.from_matrix(rng.standard_normal((4, 6)))
        for _ in range(100):
            x, y = rng.standard_normal(6), rng.standard_normal(4)
            assert abs(L(x) @ y - x @ L.T(y)) <= 1e-10 * (1 + np.linalg.norm(x) * np.linalg.norm(y))
            assert np.linalg.norm(L(x)) <= L.norm_bound * np.linalg.norm(x) * (1 + 1e-12)

    def test_to_matrix(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(LinearMap.from_matrix(m).to_matrix(), m)

    def test_lipschitz_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            LipschitzMap(lambda x: x, -1.0)
        with pytest.raises(ValueError):
            LipschitzMap(lambda x: x, math.inf)

    def test_lipschitz_monotone_sampling(self):
        M = np.array([[0.5, 1.0], [-1.0, 0.2]])
        B = LipschitzMap.from_matrix(M)
        rng = np.random.default_rng(6)
        for _ in range(100):
            x, y = rng.standard_normal(2), rng.standard_normal(2)
            d = B(x) - B(y)
            assert np.linalg.norm(d) <= B.beta * np.linalg.norm(x - y) * (1 + 1e-12)
            assert d @ (x - y) >= -1e-10


class TestPowerIteration:
    def test_scalar(self):
        assert power_iteration_norm(LinearMap.from_matrix(3 * np.eye(4))) == pytest.approx(3, abs=1e-9)

    def test_diagonal(self):
        assert power_iteration_norm(LinearMap.from_matrix(np.diag([1.0, 5.0])), iters=100) == pytest.approx(5, abs=1e-6)

    def test_zero(self):
        assert power_iteration_norm(LinearMap.from_matrix(np.zeros((3, 3)))) == 0.0

    def test_gradient_16(self):
        L = gradient_operator((16, 16))
        est = power_iteration_norm(L, iters=5000)
        exact = np.linalg.norm(L.to_matrix(), 2)
        assert est <= math.sqrt(8)
        assert est == pytest.approx(exact, abs=1e-3)

    def test_deterministic_and_monotone(self):
        L = LinearMap.from_matrix(np.random.default_rng(7).standard_normal((5, 5)))
        a = [power_iteration_norm(L, iters=k, seed=3) for k in (1, 2, 5, 20, 100)]
        assert a == sorted(a)
        assert power_iteration_norm(L, 50, seed=3) == power_iteration_norm(L, 50, seed=3)

    def test_bad_iters(self):
        with pytest.raises(ValueError):
            power_iteration_norm(LinearMap.identity((2,)), iters=0)
