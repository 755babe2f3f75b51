import math

import numpy as np
import pytest

from ddopt.core import (
    BallReg,
    ParameterError,
    SquaredNormReg,
    UnsupportedOperationError,
    derive_key,
)
from ddopt.problems import (
    GaussianLocationMap,
    LogisticRidgeLoss,
    QuadraticLoss,
    StrategicResponseMap,
    certify_lipschitz,
    deviation_check,
    make_problem,
    quad1d,
    quad_nd,
    static_map,
    strategic_from_csv,
    strategic_logistic,
)

RNG = np.random.default_rng(5)


def central_diff_grad(loss, x, z, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (loss.value_grad(x + e, z)[0] - loss.value_grad(x - e, z)[0]) / (2 * h)
    return g


class TestLosses:
    def test_quadratic_example(self):
        v, g = QuadraticLoss().value_grad([3.0], [1.0])
        assert v == 2.0
        np.testing.assert_array_equal(g, [2.0])

    def test_quadratic_at_sample(self):
        v, g = QuadraticLoss().value_grad([1.0, -2.0], [1.0, -2.0])
        assert v == 0.0
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_logistic_at_origin(self):
        # lam = 0, x = 0: value log 2, grad -b a / 2
        loss = LogisticRidgeLoss(lam=0.0, feature_bound=2.0)
        a, b = np.array([0.5, -1.0]), -1.0
        v, g = loss.value_grad(np.zeros(2), np.array([*a, b]))
        assert abs(v - math.log(2.0)) < 1e-15
        np.testing.assert_allclose(g, -b * a / 2 * -1 if False else -b * a * 0.5, atol=1e-15)

    def test_quadratic_plain_constants_exact(self):
        loss = QuadraticLoss()
        assert (loss.alpha, loss.L, loss.beta) == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize(
        "loss,zdim",
        [
            (QuadraticLoss(), 3),
            (QuadraticLoss([1.0, 4.0, 9.0]), 3),
            (LogisticRidgeLoss(lam=0.3, feature_bound=2.0), 4),
        ],
    )
    def test_grad_matches_finite_differences(self, loss, zdim):
        for _ in range(20):
            x = RNG.normal(size=zdim if loss.kind == "quadratic" else zdim - 1)
            z = RNG.normal(size=zdim)
            if loss.kind == "logistic-ridge":
                z[-1] = 1.0 if RNG.uniform() < 0.5 else -1.0
            _, g = loss.value_grad(x, z)
            fd = central_diff_grad(loss, x, z)
            ref = max(np.linalg.norm(g), 1e-8)
            assert np.linalg.norm(g - fd) / ref < 1e-6

    def test_loss_lower_bound_holds(self):
        for loss, zdim in [(QuadraticLoss(), 2), (LogisticRidgeLoss(0.1, 2.0), 3)]:
            for _ in range(50):
                x = RNG.normal(size=2)
                z = RNG.normal(size=zdim)
                if zdim == 3:
                    z[-1] = np.sign(z[-1]) or 1.0
                assert loss.value_grad(x, z)[0] >= loss.lower_bound

    def test_dimension_mismatch(self):
        with pytest.raises(ParameterError):
            QuadraticLoss().value_grad([1.0, 2.0], [1.0])


class TestDistributionMaps:
    def test_point_mass_sample(self):
        dmap = GaussianLocationMap([1.0], shift=0.5, cov=0.0)
        Z = dmap.sample([2.0], 3, seed=123)
        np.testing.assert_array_equal(Z, [[2.0], [2.0], [2.0]])

    def test_strategic_best_response(self):
        dmap = StrategicResponseMap([[1.0, 0.0]], [1.0], cost_scale=0.3)
        np.testing.assert_allclose(dmap.best_response([2.0, 2.0]), [[1.6, 0.6]], atol=1e-15)
        Z = dmap.sample([2.0, 2.0], 4, seed=9)
        np.testing.assert_allclose(Z[:, :2], np.tile([1.6, 0.6], (4, 1)), atol=1e-15)
        np.testing.assert_array_equal(Z[:, 2], np.ones(4))

    def test_static_map_ignores_decision(self):
        dmap = static_map([0.5, -1.0], cov=np.diag([1.0, 2.0]))
        a = dmap.sample([5.0, 5.0], 10, seed=42)
        b = dmap.sample([-3.0, 0.0], 10, seed=42)
        np.testing.assert_array_equal(a, b)
        assert dmap.gamma == 0.0
        assert dmap.kind == "static"

    def test_sample_determinism(self):
        dmap = GaussianLocationMap([0.0, 0.0], shift=0.4, cov=1.0)
        x = np.array([1.0, -1.0])
        np.testing.assert_array_equal(dmap.sample(x, 7, seed=1), dmap.sample(x, 7, seed=1))
        assert not np.array_equal(dmap.sample(x, 7, seed=1), dmap.sample(x, 7, seed=2))

    def test_common_random_numbers_coupling(self):
        # identical seeds at x and y: draws differ by exactly shift (x - y)
        S = np.array([[0.3, 0.1], [0.0, 0.2]])
        dmap = GaussianLocationMap([1.0, 2.0], shift=S, cov=0.7)
        x, y = np.array([1.0, 3.0]), np.array([-2.0, 0.5])
        Zx = dmap.sample(x, 20, seed=5)
        Zy = dmap.sample(y, 20, seed=5)
        np.testing.assert_allclose(Zx - Zy, np.tile(S @ (x - y), (20, 1)), atol=1e-12)

    def test_sample_stack_matches_solo_runs(self):
        dmap = GaussianLocationMap([1.0], shift=0.5, cov=1.3)
        seeds = np.array([11, 12, 13])
        X = np.array([[0.0], [1.0], [-2.0]])
        block = dmap.sample_stack(X, 6, seeds)
        for j, s in enumerate(seeds):
            np.testing.assert_array_equal(block[j], dmap.sample(X[j], 6, seed=int(s)))

    def test_mean_map(self):
        dmap = GaussianLocationMap([1.0, 1.0], shift=0.5, cov=0.0)
        np.testing.assert_allclose(dmap.mean([2.0, 0.0]), [2.0, 1.0])
        np.testing.assert_allclose(static_map([3.0]).mean([100.0]), [3.0])
        np.testing.assert_allclose(GaussianLocationMap([3.0], shift=0.0).mean([9.0]), [3.0])

    def test_strategic_mean_unsupported(self):
        dmap = StrategicResponseMap([[1.0]], [1.0], cost_scale=0.2)
        with pytest.raises(UnsupportedOperationError):
            dmap.mean([0.0])


class TestCertifyLipschitz:
    def test_static_passes_with_zero_ratio(self):
        rep = certify_lipschitz(static_map([0.0], cov=1.0), trials=3, seed=0)
        assert rep.max_ratio == 0.0 and rep.passed

    def test_point_mass_translation_exact(self):
        dmap = GaussianLocationMap([0.0], shift=0.7, cov=0.0)
        rep = certify_lipschitz(dmap, trials=5, seed=1)
        assert abs(rep.max_ratio - 0.7) < 1e-12
        assert rep.passed

    def test_understated_gamma_fails(self):
        dmap = GaussianLocationMap([0.0], shift=0.7, cov=0.0, gamma=0.5)
        rep = certify_lipschitz(dmap, trials=5, seed=1)
        assert not rep.passed

    def test_noisy_gaussian_passes(self):
        dmap = GaussianLocationMap([0.0, 0.0], shift=0.6, cov=0.5)
        assert certify_lipschitz(dmap, trials=8, seed=3, n_samples=800).passed

    def test_strategic_passes(self):
        prob = strategic_logistic(n_agents=60, gamma_u=0.4, lam=0.2)
        assert certify_lipschitz(prob.dmap, trials=6, seed=2).passed


class TestDeviationCheck:
    def test_static_zero_deviation(self):
        prob = quad1d(gamma=0.0, sigma=1.0)
        rep = deviation_check(prob, [1.0], [-2.0], n=500, seed=0)
        assert rep.passed
        assert rep.grad_dev_max < 1e-12  # common random numbers cancel exactly

    def test_gaussian_quadratic_deviation_exact(self):
        prob = quad1d(gamma=0.5, sigma=0.0)
        x, y = np.array([2.0]), np.array([0.5])
        rep = deviation_check(prob, x, y, n=100, seed=4)
        assert rep.passed
        assert abs(rep.grad_dev_max - 0.5 * 1.5) < 1e-12

    def test_same_point_zero(self):
        prob = quad1d(gamma=0.5, sigma=1.0)
        rep = deviation_check(prob, [1.5], [1.5], n=200, seed=6)
        assert rep.grad_dev_max == 0.0 and rep.gap_dev_max == 0.0 and rep.passed

    def test_strategic_instance_within_three_se(self):
        prob = strategic_logistic(n_agents=80, gamma_u=0.3, lam=0.3)
        rep = deviation_check(prob, [0.4, -0.2], [-0.1, 0.3], n=4000, seed=8)
        assert rep.passed


class TestDecisionProblem:
    def test_constants_derived_from_primitives(self):
        prob = quad1d(gamma=0.5, sigma=1.0)
        c = prob.constants
        assert (c.alpha, c.beta, c.L, c.mu) == (1.0, 1.0, 1.0, 0.0)
        assert c.gamma == prob.dmap.gamma == 0.5
        assert c.rho == 0.5 and c.kappa == 1.0
        assert c.sigma_sq == 1.0  # trace of the covariance

    def test_sigma_sq_analytic_vs_monte_carlo(self):
        prob = quad_nd(3, gamma=0.2, kappa=4.0, sigma=1.5)
        n = 20_000
        Z = prob.dmap.sample(np.zeros(3), n, seed=derive_key(99))
        G = prob.loss.grads(np.zeros(3), Z)
        est = float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))
        se = float(np.std(np.sum((G - G.mean(axis=0)) ** 2, axis=1), ddof=1)) / math.sqrt(n)
        assert abs(est - prob.constants.sigma_sq) <= 3 * se

    def test_model_constants_table(self):
        prob = quad1d(gamma=0.3, sigma=1.0, reg=SquaredNormReg(mu=0.2))
        c = prob.constants
        full = c.model_constants("full")
        lin = c.model_constants("linear", batch=4)
        clip = c.model_constants("clipped")
        assert (full.alpha1, full.alpha2) == (1.2, 0.0)
        assert (lin.alpha1, lin.alpha2) == (0.2, 1.0)
        assert (clip.alpha1, clip.alpha2) == (0.2, 0.0)
        assert lin.sigma0_sq == c.sigma_sq / 4
        with pytest.raises(ParameterError):
            c.model_constants("secant")

    def test_relative_bias_identity(self):
        # || grad f_x(x) - grad f_xbar(x) || = rho * || grad f_xbar(x) || exactly
        for gamma in (0.2, 0.5, 0.9):
            prob = quad1d(gamma=gamma, m0=1.0)
            x_bar = np.array([1.0 / (1.0 - gamma)])
            for _ in range(100):
                x = np.array([RNG.normal() * 3 + 1.0])
                if abs(x[0] - x_bar[0]) < 1e-8:
                    continue
                gx = prob.exact_mean_grad(at=x, of=x)
                gbar = prob.exact_mean_grad(at=x_bar, of=x)
                lhs = np.linalg.norm(gx - gbar)
                rhs = prob.constants.rho * np.linalg.norm(gbar)
                assert abs(lhs - rhs) <= 1e-10 * max(1.0, rhs)

    def test_exact_minimizer_and_gap(self):
        prob = quad1d(gamma=0.5, m0=1.0)
        np.testing.assert_allclose(prob.exact_minimizer([1.5]), [1.5])
        x_bar = np.array([2.0])
        assert prob.exact_gap(np.array([3.0]), x_bar) == pytest.approx(0.5, abs=1e-15)
        assert prob.exact_gap(x_bar, x_bar) == 0.0

    def test_exact_prox_solve(self):
        # argmin 0.5 (y - m)^2 + (y - x)^2 / (2 eta), m = 1, x = 0, eta = 1 -> 0.5
        prob = quad1d(gamma=0.5, m0=1.0)
        np.testing.assert_allclose(prob.exact_prox_solve([1.0], [0.0], 1.0), [0.5])

    def test_exact_family_guard(self):
        prob = strategic_logistic(n_agents=10, gamma_u=0.1, lam=0.2)
        with pytest.raises(UnsupportedOperationError):
            prob.exact_minimizer(np.zeros(2))

    def test_ball_with_anisotropic_weights_unsupported(self):
        prob = quad_nd(2, gamma=0.1, kappa=10.0, reg=BallReg(1.0))
        with pytest.raises(UnsupportedOperationError):
            prob.exact_minimizer(np.ones(2))

    def test_registry(self):
        p = make_problem("quad1d", gamma=0.5, sigma=1.0)
        assert p.constants.gamma == 0.5
        p2 = make_problem("quadNd", d=2, gamma=0.1, kappa=100.0)
        assert p2.constants.kappa == pytest.approx(100.0)
        p3 = make_problem("strategic-logistic", n_agents=20, gamma_u=0.2, lam=0.1)
        assert p3.constants.gamma == 0.2
        with pytest.raises(ParameterError):
            make_problem("rosenbrock")

    def test_strategic_csv_roundtrip(self, tmp_path):
        path = tmp_path / "pop.csv"
        path.write_text("a_1,a_2,b\n1.0,0.0,1\n-0.5,0.25,-1\n")
        prob = strategic_from_csv(path, gamma_u=0.3, lam=0.2)
        assert prob.dim == 2
        np.testing.assert_allclose(prob.dmap.features, [[1.0, 0.0], [-0.5, 0.25]])
        np.testing.assert_array_equal(prob.dmap.labels, [1.0, -1.0])
