import math

import numpy as np
import pytest

from ddopt.core import BallReg, ParameterError, UnsupportedOperationError
from ddopt.algorithms import (
    ModelKind,
    RegimeWarning,
    StepSchedule,
    alpha_hat,
    asg_run,
    conceptual_prox_grad_step,
    conceptual_prox_point_step,
    conceptual_run,
    geometric_decay,
    mba_run,
    minibatch_restart,
    model_update,
    online_avg_run,
    repeated_minimization_step,
    restart_config,
    run_algorithm,
    sg_run,
    sg_run_batch,
    stagewise_asg_run,
    stagewise_inner_count,
    stagewise_mba_run,
)
from ddopt.equilibrium import closed_form_equilibrium
from ddopt.problems import quad1d, quad_nd

RNG = np.random.default_rng(99)


def xbar(problem):
    return closed_form_equilibrium(problem).x_bar


class TestConceptualSteps:
    def test_rm_examples(self):
        prob = quad1d(gamma=0.5, m0=1.0)
        assert repeated_minimization_step(prob, [0.0])[0] == pytest.approx(1.0, abs=0)
        assert repeated_minimization_step(prob, [2.0])[0] == pytest.approx(2.0, abs=1e-15)

    def test_rm_static_is_one_shot(self):
        prob = quad1d(gamma=0.0, m0=3.0)
        for x in ([0.0], [50.0]):
            assert repeated_minimization_step(prob, x)[0] == 3.0

    def test_ppm_example(self):
        prob = quad1d(gamma=0.5, m0=1.0)
        assert conceptual_prox_point_step(prob, [0.0], eta=1.0)[0] == pytest.approx(0.5, abs=1e-15)

    def test_ppm_large_eta_limits_to_rm(self):
        prob = quad1d(gamma=0.5, m0=1.0)
        big = conceptual_prox_point_step(prob, [0.0], eta=1e12)[0]
        assert abs(big - repeated_minimization_step(prob, [0.0])[0]) < 1e-9

    def test_pgm_unit_step_hits_mean_map(self):
        prob = quad1d(gamma=0.3, m0=1.0)
        x = np.array([4.0])
        out = conceptual_prox_grad_step(prob, x, eta=1.0)
        assert out[0] == pytest.approx(1.0 + 0.3 * 4.0, abs=1e-15)

    def test_pgm_step_cap(self):
        with pytest.raises(ParameterError):
            conceptual_prox_grad_step(quad1d(gamma=0.3), [0.0], eta=1.5)

    def test_exact_contraction_ratios(self):
        # per-step ratios: rm gamma, ppm (1+g eta)/(1+eta), pgm |1-eta(1-g)|, all 1e-10
        g = 0.5
        prob = quad1d(gamma=g, m0=1.0)
        xb = xbar(prob)
        for _ in range(25):
            x = np.array([RNG.normal() * 4])
            if abs(x[0] - xb[0]) < 1e-6:
                continue
            d0 = abs(x[0] - xb[0])
            assert abs(abs(repeated_minimization_step(prob, x)[0] - xb[0]) / d0 - g) <= 1e-10
            for eta in (0.5, 1.0, 2.0):
                r = abs(conceptual_prox_point_step(prob, x, eta)[0] - xb[0]) / d0
                assert abs(r - (1 + g * eta) / (1 + eta)) <= 1e-10
            for eta in (0.5, 1.0):
                r = abs(conceptual_prox_grad_step(prob, x, eta)[0] - xb[0]) / d0
                assert r <= math.sqrt(1 - eta) + g * eta + 1e-10

    def test_fixed_points(self):
        prob = quad1d(gamma=0.3, m0=1.0)
        xb = xbar(prob)
        for step in (
            lambda x: repeated_minimization_step(prob, x),
            lambda x: conceptual_prox_point_step(prob, x, 0.7),
            lambda x: conceptual_prox_grad_step(prob, x, 0.9),
        ):
            np.testing.assert_allclose(step(xb), xb, atol=1e-12)


class TestDivergenceBoundary:
    def test_expansive_rm_ratio_and_guard(self):
        prob = quad1d(gamma=1.2, m0=1.0)
        x_bar = np.array([1.0 / (1.0 - 1.2)])  # algebraic fixed point -5
        x = np.array([0.0])
        for _ in range(40):
            nxt = repeated_minimization_step(prob, x)
            ratio = abs(nxt[0] - x_bar[0]) / abs(x[0] - x_bar[0])
            assert abs(ratio - 1.2) <= 1e-9
            x = nxt
        traj = conceptual_run(prob, [0.0], "rm", budget=200, x_bar=x_bar)
        assert traj.diverged and not traj.budget_exhausted

    def test_just_contractive_rm_converges(self):
        prob = quad1d(gamma=0.99, m0=1.0)
        traj = conceptual_run(prob, [0.0], "rm", budget=3000, x_bar=xbar(prob))
        assert not traj.diverged
        assert traj.dist_sq[-1] < 1e-8


class TestSgRun:
    def test_deterministic_recursion(self):
        # sigma = 0: x_{t+1} = 0.75 x_t + 0.5, fixed point 2, ratio 0.75
        prob = quad1d(gamma=0.5, m0=1.0, sigma=0.0)
        traj = sg_run(prob, [0.0], StepSchedule.constant(0.5), 60, seed=1, x_bar=[2.0])
        x = 0.0
        for _ in range(60):
            x = 0.75 * x + 0.5
        assert traj.final_x[0] == pytest.approx(x, abs=1e-12)
        ratios = np.sqrt(np.array(traj.dist_sq[1:]) / np.array(traj.dist_sq[:-1]))
        np.testing.assert_allclose(ratios, 0.75, atol=1e-9)

    def test_static_one_step_with_full_step(self):
        prob = quad1d(gamma=0.0, m0=2.0, sigma=0.0)
        with pytest.warns(RegimeWarning):
            traj = sg_run(prob, [7.0], StepSchedule.constant(1.0), 1, seed=0)
        assert traj.final_x[0] == pytest.approx(2.0, abs=1e-12)

    def test_linear_model_equivalence_bitwise(self):
        prob = quad1d(gamma=0.4, m0=1.0, sigma=1.0)
        sched = StepSchedule.constant(0.2)
        a = sg_run(prob, [0.0], sched, 200, seed=42)
        b = mba_run(prob, [0.0], ModelKind("linear", 1), sched, 200, seed=42)
        assert a.final_x[0] == b.final_x[0]

    def test_batch_matches_solo_bitwise(self):
        prob = quad1d(gamma=0.4, m0=1.0, sigma=1.0)
        sched = StepSchedule.constant(0.2)
        seeds = [3, 8, 21]
        batch = sg_run_batch(prob, [0.0], sched, 150, seeds)
        for j, s in enumerate(seeds):
            solo = sg_run(prob, [0.0], sched, 150, seed=s)
            assert batch.final[j, 0] == solo.final_x[0]

    def test_noise_ball(self):
        # mean ||x_T - xbar||^2 <= 1.5 * 2 sigma^2 eta / alpha_hat over 50 seeds
        prob = quad1d(gamma=0.5, m0=1.0, sigma=1.0)
        xb = xbar(prob)
        out = sg_run_batch(prob, [0.0], StepSchedule.constant(0.01), 2000, seeds=range(1, 51))
        msd = float(np.mean((out.final - xb) ** 2))
        ah = alpha_hat(prob, "distance")
        assert ah == 0.5
        assert msd <= 1.5 * (2 * prob.constants.sigma_sq * 0.01 / ah)

    def test_default_schedule_warns_nothing_and_contracts(self):
        prob = quad1d(gamma=0.5, m0=1.0, sigma=0.0)
        traj = sg_run(prob, [0.0], None, 400, seed=5, x_bar=[2.0])
        assert traj.dist_sq[-1] < traj.dist_sq[0] * 1e-6

    def test_divergence_guard(self):
        prob = quad1d(gamma=1.5, m0=1.0, sigma=0.0)
        with pytest.warns(RegimeWarning):
            traj = sg_run(prob, [0.0], StepSchedule.constant(3.5), 500, seed=0)
        assert traj.diverged


class TestModelUpdates:
    def test_full_model_quadratic_closed_form(self):
        prob = quad1d(gamma=0.2, m0=1.0)
        x, z, eta = np.array([2.0]), np.array([[0.5]]), 0.8
        out = model_update(prob, ModelKind("full", 1), x, z, eta)
        assert out[0] == pytest.approx((2.0 + 0.8 * 0.5) / 1.8, abs=1e-14)

    def test_clipped_zero_reg_formula(self):
        prob = quad1d(gamma=0.2, m0=1.0)
        x = np.array([3.0])
        Z = np.array([[1.0]])
        v = 0.5 * (3.0 - 1.0) ** 2
        g = 2.0
        for eta in (0.1, 0.4, 5.0):
            out = model_update(prob, ModelKind("clipped", 1), x, Z, eta)
            lam = min(eta, v / g**2)
            assert out[0] == pytest.approx(3.0 - lam * g, abs=1e-13)

    def test_clipped_zero_loss_stays_put(self):
        prob = quad1d(gamma=0.2, m0=1.0)
        out = model_update(prob, ModelKind("clipped", 1), np.array([1.0]), np.array([[1.0]]), 0.5)
        assert out[0] == 1.0

    def test_full_model_without_solver_rejected(self):
        from ddopt.problems import strategic_logistic

        prob = strategic_logistic(n_agents=10, gamma_u=0.1, lam=0.3)
        with pytest.raises(UnsupportedOperationError):
            model_update(prob, ModelKind("full", 1), np.zeros(2), prob.dmap.sample(np.zeros(2), 1, 0), 0.5)

    @pytest.mark.parametrize("selector", ["full", "linear", "clipped"])
    def test_grid_oracle_small(self, selector):
        # dense-grid argmin of the model subproblem over [x - 5 eta |g|, x + 5 eta |g|]
        from ddopt.acceptance import model_grid_gap

        worst_arg, worst_val = model_grid_gap(selector, n_instances=25, grid_points=200_001, seed=7)
        assert worst_arg <= 1e-5  # one grid cell at this resolution
        assert worst_val <= 1e-8  # the exact update is never beaten by the grid


class TestAsgRun:
    def test_stays_at_equilibrium(self):
        prob = quad1d(gamma=0.1, m0=1.0, sigma=0.0)
        xb = xbar(prob)
        traj = asg_run(prob, xb, 50, seed=0, x_bar=xb)
        assert max(traj.dist_sq) <= 1e-24

    def test_constant_parameter_lock_and_rate(self):
        # static quadratic: gap trace under the certified envelope until the
        # trace saturates at the float64 floor near the fixed point
        prob = quad1d(gamma=0.0, m0=1.0, sigma=0.0)
        xb = xbar(prob)
        traj = asg_run(prob, [5.0], 300, seed=0, x_bar=xb)  # lock asserted internally
        ah = alpha_hat(prob, "gap")
        factor = 1.0 - math.sqrt(ah / (4 * prob.constants.L))
        gap0 = prob.exact_gap(np.array([5.0]), xb)
        for t, g in zip(traj.ts, traj.gap):
            if g <= 1e-25:
                break
            assert g <= 2.0 * factor**t * gap0 * (1 + 1e-9)

    def test_infeasible_alpha_hat_rejected(self):
        with pytest.raises(ParameterError):
            asg_run(quad1d(gamma=0.6, m0=1.0), [0.0], 10, seed=0)

    def test_regime_warning(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=0.0)  # rho above the kappa-based cap
        with pytest.warns(RegimeWarning):
            asg_run(prob, [0.0], 5, seed=0)

    def test_momentum_beta_constant_when_locked(self):
        prob = quad_nd(2, gamma=0.0, kappa=100.0, sigma=0.0)
        traj = asg_run(prob, np.zeros(2), 200, seed=0, x_bar=xbar(prob))
        assert traj.budget_exhausted  # internal 1e-12 lock assertions held

    def test_noise_floor_inside_regime(self):
        # mean final gap <= 9 sigma^2 / (16 sqrt(L alpha_hat)), 30 seeds
        prob = quad1d(gamma=0.03, m0=1.0, sigma=1.0)  # inside the kappa=1 regime cap
        xb = xbar(prob)
        finals = [asg_run(prob, [0.0], 2000, seed=s, x_bar=xb, record_every=0).gap[-1]
                  for s in range(1, 31)]
        ah = alpha_hat(prob, "gap")
        floor = 9.0 / (16.0 * math.sqrt(prob.constants.L * ah))
        se = float(np.std(finals, ddof=1)) / math.sqrt(30)
        assert float(np.mean(finals)) <= floor + 3 * se


class TestOnlineRuns:
    def test_online_pg_constant_step_equals_sg(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
        sched = StepSchedule.constant(0.3)
        a = online_avg_run(prob, [0.0], "online-pg", sched, 100, seed=9)
        b = sg_run(prob, [0.0], sched, 100, seed=9)
        assert a.final_x[0] == b.final_x[0]

    def test_dual_avg_requires_bounded_domain(self):
        with pytest.raises(ParameterError):
            online_avg_run(quad1d(gamma=0.2), [0.0], "dual-avg", None, 10, seed=0)

    def test_dual_avg_average_converges_static_ball(self):
        # deterministic static quadratic over a ball: average approaches the
        # constrained minimizer (here interior, so the plain mean)
        prob = quad1d(gamma=0.0, m0=1.0, sigma=0.0, reg=BallReg(2.0))
        traj = online_avg_run(prob, [0.0], "dual-avg", None, 4000, seed=0)
        assert abs(traj.final_avg[0] - 1.0) < 0.05

    def test_dual_avg_boundary_minimizer(self):
        prob = quad1d(gamma=0.0, m0=3.0, sigma=0.0, reg=BallReg(1.0))
        traj = online_avg_run(prob, [0.0], "dual-avg", None, 4000, seed=0)
        assert abs(traj.final_avg[0] - 1.0) < 0.05

    def test_online_pg_averaged_gap_decays(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=0.5, reg=BallReg(3.0))
        xb = xbar(prob)
        traj = online_avg_run(prob, [0.0], "online-pg", None, 3000, seed=3, x_bar=xb)
        assert traj.gap[-1] < 0.02


class TestStagewise:
    def test_inner_count_example(self):
        # alpha1 = 1, alpha2 = 0, gamma beta = 0, eta = 1/(2L) = 0.5 -> J = 2
        prob = quad1d(gamma=0.0, m0=1.0)
        assert stagewise_inner_count(prob, ModelKind("full", 1), "I", 0.5) == 2

    def test_version1_stage_contraction(self):
        prob = quad1d(gamma=0.5, m0=1.0, sigma=0.0)
        xb = xbar(prob)
        traj = stagewise_mba_run(prob, [0.0], ModelKind("linear", 1), "I", 0.5, 8, seed=0, x_bar=xb)
        cap = 0.5 * (1 + 0.5 / (2 * 0 + 2 * 1 - 0.5))  # alpha1=0, alpha2=1
        d = np.array(traj.dist_sq)
        ratios = d[1:-1] / d[:-2]
        assert np.all(ratios <= cap + 1e-9)

    def test_version2_runs_and_contracts(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=0.0)
        xb = xbar(prob)
        traj = stagewise_mba_run(prob, [0.0], ModelKind("linear", 1), "II", 0.5, 10, seed=0, x_bar=xb)
        assert traj.dist_sq[-1] < 1e-6

    def test_deployment_accounting(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
        lazy = stagewise_mba_run(prob, [0.0], ModelKind("linear", 1), "I", 0.4, 5, seed=0)
        assert lazy.total_deployments == 6  # stages t = 0..budget inclusive
        assert lazy.total_samples == 6 * lazy.meta["inner_count"]
        greedy = sg_run(prob, [0.0], StepSchedule.constant(0.3), 50, seed=0)
        assert greedy.total_deployments == greedy.total_samples == 50
        assert all(np.diff(lazy.deployments) >= 0) and all(np.diff(lazy.samples) >= 0)

    def test_static_reduces_to_restarted_solver(self):
        prob = quad1d(gamma=0.0, m0=1.0, sigma=0.0)
        traj = stagewise_mba_run(prob, [4.0], ModelKind("linear", 1), "I", 0.5, 6, seed=0, x_bar=[1.0])
        assert traj.total_deployments == 7
        assert traj.dist_sq[-1] < 1e-6

    def test_regime_violations_abort(self):
        prob = quad1d(gamma=0.5, m0=1.0)
        with pytest.raises(ParameterError):  # clipped model, mu = 0: alpha1 + alpha2 = 0
            stagewise_mba_run(prob, [0.0], ModelKind("clipped", 1), "I", 0.4, 3, seed=0)
        with pytest.raises(ParameterError):  # eta above the version cap
            stagewise_mba_run(prob, [0.0], ModelKind("linear", 1), "I", 0.9, 3, seed=0)

    def test_stage_asg_factor(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=0.0)
        xb = xbar(prob)
        traj = stagewise_asg_run(prob, [0.0], 8, seed=0, x_bar=xb)
        cap = 1.0 / (2 * (1 - 0.3))
        gaps = np.array(traj.gap)
        live = gaps > 1e-250
        ratios = gaps[1:][live[:-1]] / gaps[:-1][live[:-1]]
        assert np.all(ratios <= cap + 1e-9)

    def test_stage_asg_static_factor_half(self):
        prob = quad1d(gamma=0.0, m0=1.0, sigma=0.0)
        traj = stagewise_asg_run(prob, [4.0], 6, seed=0, x_bar=[1.0])
        gaps = np.array(traj.gap)
        live = gaps > 1e-250
        ratios = gaps[1:][live[:-1]] / gaps[:-1][live[:-1]]
        assert np.all(ratios <= 0.5 + 1e-9)

    def test_stage_asg_regime(self):
        with pytest.raises(ParameterError):
            stagewise_asg_run(quad1d(gamma=0.5, m0=1.0), [0.0], 3, seed=0)
        prob = quad1d(gamma=0.3, m0=1.0, sigma=0.0)
        traj = stagewise_asg_run(prob, xbar(prob), 4, seed=0, x_bar=xbar(prob))
        assert max(traj.dist_sq) <= 1e-20

    def test_version2_noisy_gap_bound(self):
        # per-stage averaged-gap guarantee with noise, mean over 40 seeds:
        # E[gap(u_t)] <= (0.5 (1 + gb/(a1+a2)))^t gap(u_0) + 2 s0^2 eta / (1 - gb/(a1+a2))
        prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
        xb = xbar(prob)
        eta = 0.25
        gaps = np.array([
            stagewise_mba_run(prob, [3.0], ModelKind("linear", 1), "II", eta, 8, seed=s, x_bar=xb).gap
            for s in range(1, 41)
        ])
        gap0 = prob.exact_gap(np.array([3.0]), xb)
        factor, floor = 0.5 * (1 + 0.3), 2 * eta / (1 - 0.3)
        for t in range(9):
            mean, se = gaps[:, t].mean(), gaps[:, t].std(ddof=1) / math.sqrt(40)
            assert mean <= factor**t * gap0 + floor + 3 * se


def saturating_geo_inner(C, c, D):
    """Synthetic inner solver that meets the geometric-decay contract with
    equality; the state is the scalar h value itself."""

    def inner(h, delta, T):
        return C * (1 - c * delta) ** T * h + D * delta, T, T

    return inner


def saturating_minibatch_inner(C, tau, B):
    def inner(h, m, T):
        return C * (1 - tau) ** T * h + B / m, T, T

    return inner


class TestRestartDrivers:
    def test_minibatch_warmup_count_example(self):
        # C=1, tau=0.1, Delta/eps = e: T0 = ceil(10 log(2e)) = 17
        res = minibatch_restart(
            saturating_minibatch_inner(1.0, 0.1, 0.5), None,
            y0=math.e, Delta=math.e, C=1.0, tau=0.1, B=0.5, eps=1.0,
        )
        assert res.stages[0].iters == 17

    def test_minibatch_zero_variance_single_stage(self):
        res = minibatch_restart(
            saturating_minibatch_inner(1.0, 0.2, 0.0), None,
            y0=1.0, Delta=1.0, C=1.0, tau=0.2, B=0.0, eps=1e-3,
        )
        assert len(res.stages) == 1
        assert res.y <= 1e-3

    def test_minibatch_reaches_eps_on_contract(self):
        C, tau, B, eps = 2.0, 0.15, 4.0, 1e-3
        res = minibatch_restart(saturating_minibatch_inner(C, tau, B), None, 1.0, 1.0, C, tau, B, eps)
        assert res.y <= eps
        assert res.stages[1].param == 2 and res.stages[-1].param == 2 ** (len(res.stages) - 1)

    def test_minibatch_validation(self):
        inner = saturating_minibatch_inner(1.0, 0.5, 1.0)
        with pytest.raises(ParameterError):
            minibatch_restart(inner, None, 1.0, -1.0, 1.0, 0.5, 1.0, 1e-2)
        with pytest.raises(ParameterError):
            minibatch_restart(inner, None, 1.0, 1.0, 1.0, 1.5, 1.0, 1e-2)
        with pytest.raises(ParameterError):  # Delta must dominate h(y0)
            minibatch_restart(inner, lambda y: y, 5.0, 1.0, 1.0, 0.5, 1.0, 1e-2)

    def test_geo_warmup_count_example(self):
        # psi(d) = d, delta0 = 0.5, C = 2, Delta/eps = 4: T0 = ceil(2 log 16) = 6
        res = geometric_decay(
            saturating_geo_inner(2.0, 1.0, 1.0), None,
            y0=4.0, Delta=4.0, C=2.0, D=1.0, delta0=0.5, psi=lambda d: d, eps=1.0,
        )
        assert res.stages[0].iters == 6

    def test_geo_inside_noise_floor_only_warmup(self):
        res = geometric_decay(
            saturating_geo_inner(1.0, 1.0, 0.1), None,
            y0=1.0, Delta=1.0, C=1.0, D=0.1, delta0=0.5, psi=lambda d: d, eps=0.5,
        )
        assert len(res.stages) == 1

    def test_geo_reaches_eps_on_contract(self):
        C, c, D, d0 = 2.0, 0.8, 3.0, 0.4
        for eps in (1e-2, 1e-4):
            res = geometric_decay(
                saturating_geo_inner(C, c, D), None, 1.0, 1.0, C, D, d0, lambda d: c * d, eps
            )
            assert res.y <= eps

    def test_geo_budget_cap(self):
        res = geometric_decay(
            saturating_geo_inner(1.0, 1.0, 1.0), None, 1.0, 1.0, 1.0, 1.0, 0.5,
            lambda d: d, 1e-6, budget=30,
        )
        assert res.budget_exhausted
        assert res.total_inner_iters <= 30

    def test_restart_config_alpha_hat_selection(self):
        prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
        dist = restart_config(prob, "sg", metric="distance")
        gap = restart_config(prob, "sg", metric="gap")
        assert dist.alpha_hat == pytest.approx(0.7)
        assert gap.alpha_hat == pytest.approx(0.4)
        assert gap.C == 2.0 and dist.C == 1.0
        st = restart_config(prob, "stage-mba-ii")
        assert st.psi_constant and st.psi(0.123) == st.rate


class TestRegistry:
    @pytest.mark.parametrize("name", ["rm", "ppm", "pgm", "sg", "mba-linear", "mba-full",
                                      "mba-clipped", "online-pg", "stage-mba-i", "stage-mba-ii",
                                      "stage-asg"])
    def test_all_names_run(self, name):
        prob = quad1d(gamma=0.2, m0=1.0, sigma=0.5)
        traj = run_algorithm(name, prob, [0.0], 5, seed=1, x_bar=[1.25])
        assert traj.row_count() >= 2
        assert traj.final_x is not None

    def test_asg_and_dual_avg_entries(self):
        prob = quad1d(gamma=0.05, m0=1.0, sigma=0.2, reg=BallReg(3.0))
        assert run_algorithm("asg", prob, [0.0], 5, seed=1).algo == "asg"
        assert run_algorithm("dual-avg", prob, [0.0], 5, seed=1).algo == "dual-avg"

    def test_unknown_name(self):
        with pytest.raises(ParameterError):
            run_algorithm("adam", quad1d(0.1), [0.0], 5, seed=0)
