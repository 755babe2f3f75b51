"""End-to-end acceptance suites.

Each suite verifies one headline guarantee at its stated tolerance on a desk
scale instance: exact contraction factors, divergence boundaries, bias
identities, noise floors, acceleration, model-subproblem optimality,
deployment complexity, restart certification, the online reduction, the
sensitivity bounds, and the averaging identities.  ``run_suite`` prints one
pass/fail line per criterion; the pytest module asserts the same results.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .core import (
    BallReg,
    L1Reg,
    BoxReg,
    ScheduleState,
    SquaredNormReg,
    ZeroReg,
    averaging_update,
    counter_normals,
    counter_uniforms,
    derive_key,
    gamma_products,
)
from .problems import (
    DecisionProblem,
    GaussianLocationMap,
    QuadraticLoss,
    deviation_check,
    quad1d,
    quad_nd,
    strategic_logistic,
)
from .equilibrium import closed_form_equilibrium
from .algorithms import (
    ModelKind,
    StepSchedule,
    alpha_hat,
    asg_run,
    conceptual_prox_grad_step,
    conceptual_prox_point_step,
    conceptual_run,
    geometric_decay,
    model_update,
    repeated_minimization_step,
    restart_config,
    sg_run,
    sg_run_batch,
)
from .harness import _lstsq_line, run_wrapped

__all__ = ["CriterionResult", "run_criterion", "run_suite", "SUITES", "model_grid_gap"]


@dataclass
class CriterionResult:
    name: str
    passed: bool
    details: str
    runtime: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.details}  [{self.runtime:.2f}s]"


def _result(name, checks, details):
    return CriterionResult(name, all(checks), details)


# ---------------------------------------------------------------------------
# 1. Exact conceptual contractions
# ---------------------------------------------------------------------------


def crit_contractions() -> CriterionResult:
    prob = quad1d(gamma=0.5, m0=1.0, sigma=0.0)
    xb = closed_form_equilibrium(prob).x_bar
    checks, worst = [], 0.0
    for i in range(40):
        x = np.array([3.0 * counter_normals(derive_key(0xC0, i), 1)[0] + 1.0])
        d0 = abs(x[0] - xb[0])
        if d0 < 1e-6:
            continue
        r_rm = abs(repeated_minimization_step(prob, x)[0] - xb[0]) / d0
        checks.append(abs(r_rm - 0.5) <= 1e-10)
        worst = max(worst, abs(r_rm - 0.5))
        for eta in (0.5, 1.0, 2.0):
            r = abs(conceptual_prox_point_step(prob, x, eta)[0] - xb[0]) / d0
            err = abs(r - (1 + 0.5 * eta) / (1 + eta))
            checks.append(err <= 1e-10)
            worst = max(worst, err)
        for eta in (0.5, 1.0):
            r = abs(conceptual_prox_grad_step(prob, x, eta)[0] - xb[0]) / d0
            checks.append(r <= 0.5 * eta + math.sqrt(1 - eta) + 1e-10)
    return _result("contractions", checks, f"worst factor error {worst:.2e} (tol 1e-10)")


# ---------------------------------------------------------------------------
# 2. Divergence boundary
# ---------------------------------------------------------------------------


def crit_divergence() -> CriterionResult:
    prob = quad1d(gamma=1.2, m0=1.0, sigma=0.0)
    x_bar = np.array([1.0 / (1.0 - 1.2)])  # algebraic fixed point, not an equilibrium certificate
    x = np.array([0.0])
    worst = 0.0
    checks = []
    for _ in range(60):
        nxt = repeated_minimization_step(prob, x)
        ratio = abs(nxt[0] - x_bar[0]) / abs(x[0] - x_bar[0])
        worst = max(worst, abs(ratio - 1.2))
        checks.append(abs(ratio - 1.2) <= 1e-9)
        x = nxt
    traj = conceptual_run(prob, [0.0], "rm", budget=200, x_bar=x_bar)
    checks.append(traj.diverged)
    ok = conceptual_run(quad1d(gamma=0.99, m0=1.0), [0.0], "rm", budget=4000, x_bar=[100.0])
    checks.append(not ok.diverged and ok.dist_sq[-1] < ok.dist_sq[0])
    return _result(
        "divergence", checks,
        f"growth factor error {worst:.2e} (tol 1e-9); guard at 1.2 fired={traj.diverged}; 0.99 converges",
    )


# ---------------------------------------------------------------------------
# 3. Relative-bias identity
# ---------------------------------------------------------------------------


def crit_relative_bias() -> CriterionResult:
    worst = 0.0
    checks = []
    for i in range(100):
        gamma = 0.1 + 0.8 * counter_uniforms(derive_key(0xB1A5, i), 1)[0]
        prob = quad1d(gamma=float(gamma), m0=1.0)
        xb = np.array([1.0 / (1.0 - gamma)])
        x = np.array([4.0 * counter_normals(derive_key(0xB1A6, i), 1)[0] + 1.0])
        if abs(x[0] - xb[0]) < 1e-8:
            continue
        lhs = np.linalg.norm(prob.exact_mean_grad(at=x, of=x) - prob.exact_mean_grad(at=xb, of=x))
        rhs = prob.constants.rho * np.linalg.norm(prob.exact_mean_grad(at=xb, of=x))
        err = abs(lhs - rhs) / max(rhs, 1e-30)
        worst = max(worst, err)
        checks.append(err <= 1e-10)
    return _result("relative-bias", checks, f"worst relative error {worst:.2e} (tol 1e-10), 100 points")


# ---------------------------------------------------------------------------
# 4. Stochastic gradient noise ball
# ---------------------------------------------------------------------------


def crit_noise_ball() -> CriterionResult:
    prob = quad1d(gamma=0.5, m0=1.0, sigma=1.0)
    xb = closed_form_equilibrium(prob).x_bar
    out = sg_run_batch(prob, [0.0], StepSchedule.constant(0.01), 2000, seeds=range(1, 51))
    msd = float(np.mean(np.sum((out.final - xb) ** 2, axis=1)))
    ah = alpha_hat(prob, "distance")
    floor = 2.0 * prob.constants.sigma_sq * 0.01 / ah
    return _result(
        "noise-ball", [ah == 0.5, msd <= 1.5 * floor],
        f"mean dist^2 {msd:.4g} <= 1.5 x theoretical floor {floor:.4g} over 50 seeds",
    )


# ---------------------------------------------------------------------------
# 5. Acceleration on an ill-conditioned quadratic
# ---------------------------------------------------------------------------


def _iterations_to_gap(problem, xb, threshold, eta, chunk=20_000, cap=600_000):
    """Greedy sg iterations until the closed-form gap crosses the threshold."""
    x = np.zeros(problem.dim)
    total = 0
    sched = StepSchedule.constant(eta)
    while total < cap:
        traj = sg_run(problem, x, sched, chunk, seed=derive_key(3, total), x_bar=xb, record_every=1)
        gaps = np.asarray(traj.gap)
        below = np.nonzero(gaps <= threshold)[0]
        if below.size:
            return total + int(traj.ts[below[0]])
        x = traj.final_x
        total += chunk
    return cap


def crit_acceleration() -> CriterionResult:
    kappa = 1e4
    rho_cap = 0.5 / (1.0 + math.sqrt(32.0 + 64.0 * math.sqrt(3.0 * kappa)))
    gamma = 0.5 * rho_cap / kappa  # beta = kappa, so rho = gamma beta / alpha = rho_cap / 2
    prob = quad_nd(2, gamma=gamma, kappa=kappa, sigma=0.0)
    xb = closed_form_equilibrium(prob).x_bar
    c = prob.constants
    assert c.rho <= rho_cap

    n_sg = _iterations_to_gap(prob, xb, 1e-6, eta=1.0 / (2 * c.L))
    asg = asg_run(prob, np.zeros(2), 20_000, seed=3, x_bar=xb, record_every=1)
    gaps = np.asarray(asg.gap)
    below = np.nonzero(gaps <= 1e-6)[0]
    n_asg = int(asg.ts[below[0]]) if below.size else 20_000

    ah = alpha_hat(prob, "gap")
    factor = 1.0 - math.sqrt(ah / (4.0 * c.L))
    gap0 = gaps[0]
    burn = 10
    envelope_ok = all(
        gaps[i] <= 2.0 * gap0 * (min(1.0, factor * 1.05)) ** asg.ts[i] + 1e-300
        for i in range(burn, below[0] if below.size else len(gaps))
    )
    # implied per-iteration factor from envelope threshold crossings
    env = np.maximum.accumulate(gaps[::-1])[::-1]  # running max from the right
    t_hi = int(np.argmax(env <= 1e-2 * gap0))
    t_lo = int(np.argmax(env <= 1e-8 * gap0))
    implied = (env[t_lo] / env[t_hi]) ** (1.0 / (t_lo - t_hi))
    within = abs(implied - factor) <= 0.05 * factor

    checks = [n_asg <= n_sg / 10.0, envelope_ok, within]
    return _result(
        "acceleration", checks,
        f"iters to gap<=1e-6: asg {n_asg} vs sg {n_sg} (ratio {n_asg / n_sg:.3g} <= 0.1); "
        f"implied factor {implied:.6f} vs theory {factor:.6f} (within 5%)",
    )


# ---------------------------------------------------------------------------
# 6. Model-subproblem grid oracle
# ---------------------------------------------------------------------------


def _reg_values_1d(reg, ys):
    if isinstance(reg, ZeroReg):
        return 0.0
    if isinstance(reg, SquaredNormReg):
        return 0.5 * reg.mu * ys**2
    if isinstance(reg, L1Reg):
        return reg.lam * np.abs(ys)
    if isinstance(reg, BoxReg):
        return np.where((ys >= reg.lo[0]) & (ys <= reg.hi[0]), 0.0, np.inf)
    if isinstance(reg, BallReg):
        return np.where(np.abs(ys) <= reg.radius, 0.0, np.inf)
    raise AssertionError(reg)


def _random_1d_instance(i, seed):
    # windows 10 eta |g| stay below 0.9 so a 1e6-point grid resolves 1e-6;
    # regularizer scales keep every update within the window (see the box
    # /ball feasibility and mu |x| <= |g|/2 constraints)
    u = counter_uniforms(derive_key(seed, i), 8)
    w = 0.5 + 1.5 * u[0]
    x = -1.0 + 2.0 * u[1]
    eta = 0.1 + 0.4 * u[2]
    g = (0.05 + 0.13 * u[3]) * (1.0 if u[4] < 0.5 else -1.0)
    z = x - g / w
    regs = [
        ZeroReg(),
        SquaredNormReg(mu=0.5 * abs(g) / max(abs(x), 0.5) * max(u[5], 0.05)),
        L1Reg(lam=(0.05 + 0.25 * u[5]) * abs(g)),
        BoxReg(lo=x - (0.2 + u[5]) * eta * abs(g), hi=x + (0.2 + u[6]) * eta * abs(g)),
        BallReg(radius=abs(x) + (0.2 + u[6]) * eta * abs(g)),
    ]
    reg = regs[i % len(regs)]
    return w, x, z, eta, g, reg


def model_grid_gap(selector: str, n_instances: int, grid_points: int, seed: int = 11):
    """Worst gaps between the model update and a dense-grid argmin of the
    model subproblem over [x - 5 eta |g|, x + 5 eta |g|].

    Returns (argument gap, one-sided value gap max(F(update) - grid min, 0)).
    The value gap is one-sided because the exact update always weakly beats
    the grid; at a kinked minimizer the grid's own value error scales with
    the spacing, so only "never beaten" is a solver property.
    """
    worst_arg = 0.0
    worst_val = 0.0
    for i in range(n_instances):
        w, x, z, eta, g, reg = _random_1d_instance(i, seed)
        prob = DecisionProblem.build(QuadraticLoss([w]), reg, GaussianLocationMap([0.0]))
        Z = np.array([[z]])
        upd = model_update(prob, ModelKind(selector, 1), np.array([x]), Z, eta)[0]
        half = 5.0 * eta * abs(g)
        ys = np.linspace(x - half, x + half, grid_points)
        if selector == "linear":
            mvals = 0.5 * w * (x - z) ** 2 + g * (ys - x)
        elif selector == "full":
            mvals = 0.5 * w * (ys - z) ** 2
        else:
            mvals = np.maximum(0.5 * w * (x - z) ** 2 + g * (ys - x), 0.0)
        total = mvals + _reg_values_1d(reg, ys) + (ys - x) ** 2 / (2.0 * eta)
        jmin = int(np.argmin(total))
        worst_arg = max(worst_arg, abs(upd - ys[jmin]))

        def subvalue(y):
            if selector == "linear":
                m = 0.5 * w * (x - z) ** 2 + g * (y - x)
            elif selector == "full":
                m = 0.5 * w * (y - z) ** 2
            else:
                m = max(0.5 * w * (x - z) ** 2 + g * (y - x), 0.0)
            return m + float(np.atleast_1d(_reg_values_1d(reg, np.array([y])))[0]) + (y - x) ** 2 / (2 * eta)

        worst_val = max(worst_val, subvalue(upd) - float(total[jmin]))
    return worst_arg, max(worst_val, 0.0)


def crit_model_oracle() -> CriterionResult:
    checks, parts = [], []
    for selector in ("full", "linear", "clipped"):
        wa, wv = model_grid_gap(selector, n_instances=200, grid_points=1_000_001, seed=11)
        checks.append(wa <= 1e-6)
        parts.append(f"{selector}: arg gap {wa:.2e}, value gap {wv:.2e}")
    return _result("model-oracle", checks, "; ".join(parts) + " (arg tol 1e-6, 200 instances each)")


# ---------------------------------------------------------------------------
# 7. Deployment complexity of lazy vs greedy methods
# ---------------------------------------------------------------------------


def crit_deployments() -> CriterionResult:
    prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
    xb = closed_form_equilibrium(prob).x_bar
    eps_grid = [1e-1, 1e-2, 1e-3, 1e-4]
    logs = np.log(1.0 / np.asarray(eps_grid))
    checks, parts = [], []
    lazy_at_1em4 = {}
    for algo, wrapper in (("stage-mba-ii", "restart-geo"), ("stage-asg", "restart-minibatch")):
        deps = []
        for eps in eps_grid:
            traj = run_wrapped(prob, algo, wrapper, eps, [0.0], seed=5, metric="gap", x_bar=xb)
            deps.append(traj.total_deployments)
        slope, r2 = _lstsq_line(logs, np.asarray(deps, dtype=np.float64))
        checks.append(r2 > 0.9 and slope > 0)
        lazy_at_1em4[algo] = deps[-1]
        parts.append(f"{algo} deployments {deps}, R^2 {r2:.3f}")
    greedy = run_wrapped(prob, "sg", "restart-geo", 1e-4, [0.0], seed=5, metric="gap", x_bar=xb)
    checks.append(greedy.total_deployments == greedy.total_samples)
    ratios = {a: greedy.total_deployments / d for a, d in lazy_at_1em4.items()}
    checks.extend(r >= 1e3 for r in ratios.values())
    parts.append(
        f"greedy sg deployments=samples={greedy.total_deployments}; "
        f"ratios vs lazy {dict((a, round(r)) for a, r in ratios.items())} (>= 1e3)"
    )
    return _result("deployments", checks, "; ".join(parts))


# ---------------------------------------------------------------------------
# 8. Restart drivers reach the target accuracy
# ---------------------------------------------------------------------------


def crit_restarts() -> CriterionResult:
    prob = quad1d(gamma=0.5, m0=1.0, sigma=1.0)
    xb = closed_form_equilibrium(prob).x_bar
    cfg = restart_config(prob, "sg", metric="distance")
    seeds = list(range(1, 51))
    delta_sq0 = float((0.0 - xb[0]) ** 2)
    Delta = 4.0 * delta_sq0
    checks, parts = [], []
    for eps in (1e-2, 1e-3):
        stage = [0]

        def inner(Y, delta, T):
            k = stage[0]
            stage[0] += 1
            stage_seeds = [derive_key(s, 0x57A6E, k) for s in seeds]
            out = sg_run_batch(prob, [0.0], StepSchedule.constant(delta), T, stage_seeds, x_start=Y)
            return out.final, out.samples_per_seed * len(seeds), out.deployments_per_seed * len(seeds)

        Y0 = np.zeros((len(seeds), 1))
        res = geometric_decay(inner, None, Y0, Delta, cfg.C, cfg.noise, cfg.delta0, cfg.psi, eps)
        mean_h = float(np.mean(np.sum((res.y - xb) ** 2, axis=1)))
        checks.append(mean_h <= 1.5 * eps)
        # stage counts must equal the driver formulas as integers
        K_expect = 0 if cfg.noise * cfg.delta0 <= eps else math.ceil(1 + math.log2(cfg.noise * cfg.delta0 / eps))
        checks.append(len(res.stages) == K_expect + 1)
        T0_expect = math.ceil(math.log(2 * cfg.C * Delta / eps) / cfg.psi(cfg.delta0))
        checks.append(res.stages[0].iters == T0_expect)
        for k in range(1, K_expect + 1):
            checks.append(res.stages[k].iters == math.ceil(math.log(4 * cfg.C) / cfg.psi(cfg.delta0 * 2.0**-k)))
        parts.append(f"eps={eps:g}: mean dist^2 {mean_h:.3g} <= {1.5 * eps:g}, stages {K_expect + 1}")
    return _result("restarts", checks, "; ".join(parts) + " (50 seeds)")


# ---------------------------------------------------------------------------
# 9. Online reduction
# ---------------------------------------------------------------------------


def crit_online() -> CriterionResult:
    prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0, reg=BallReg(3.0))
    xb = closed_form_equilibrium(prob).x_bar
    c = prob.constants
    T = 10_000
    seeds = [derive_key(0x0A, s) for s in range(1, 51)]

    def mean_avg_gap(t, X, avg):
        return float(np.mean(prob.exact_gap(avg, xb)))

    out = sg_run_batch(
        prob, [0.0], StepSchedule.inverse_time(c.alpha), T, seeds,
        averaging="uniform", metric_fn=mean_avg_gap, metric_every=50,
    )
    ts = np.array([t for t, _ in out.records], dtype=np.float64)
    gaps = np.array([g for _, g in out.records], dtype=np.float64)
    live = ts >= 100
    slope, r2 = _lstsq_line(np.log(ts[live]), gaps[live] * ts[live])
    G = out.g_max
    rho = c.rho
    predicted = (G**2 / c.alpha) * math.log(T) / ((1.0 - 2.0 * rho) * T)
    final_gap = gaps[-1]
    checks = [slope > 0, math.isfinite(slope), final_gap <= 10.0 * predicted]
    return _result(
        "online", checks,
        f"gap*t vs log t slope {slope:.3g} (positive, R^2 {r2:.2f}); "
        f"final gap {final_gap:.3g} <= 10 x predicted {predicted:.3g} with measured G={G:.2f}",
    )


# ---------------------------------------------------------------------------
# 10. Sensitivity bounds
# ---------------------------------------------------------------------------


def crit_sensitivity() -> CriterionResult:
    checks, parts = [], []
    # analytic equality on the 1-d gaussian + quadratic family
    prob = quad1d(gamma=0.5, m0=1.0, sigma=0.7)
    worst = 0.0
    for i in range(20):
        xy = counter_normals(derive_key(0x5E15, i), 2) * 2.0
        x, y = np.array([xy[0]]), np.array([xy[1]])
        w1 = abs(0.5 * (x[0] - y[0]))  # translation of a fixed-shape gaussian
        for j in range(5):
            wpt = np.array([counter_normals(derive_key(0x5E16, i * 7 + j), 1)[0] * 3.0])
            dev = abs(prob.exact_mean_grad(at=x, of=wpt)[0] - prob.exact_mean_grad(at=y, of=wpt)[0])
            worst = max(worst, abs(dev - prob.constants.beta * w1))
        u, v = np.array([xy[0] + 1.0]), np.array([xy[1] - 2.0])
        mx, my = prob.dmap.mean(x), prob.dmap.mean(y)
        gap_dev = abs(
            (0.5 * (u - mx) ** 2 - 0.5 * (v - mx) ** 2) - (0.5 * (u - my) ** 2 - 0.5 * (v - my) ** 2)
        )[0]
        worst = max(worst, abs(gap_dev - prob.constants.beta * w1 * abs(u[0] - v[0])))
    checks.append(worst <= 1e-10)
    parts.append(f"gaussian-quadratic equality error {worst:.2e} (tol 1e-10)")
    # Monte-Carlo on a strategic-logistic instance, three standard errors
    sprob = strategic_logistic(n_agents=120, gamma_u=0.25, lam=0.4)
    rep = deviation_check(sprob, [0.5, -0.3], [-0.2, 0.4], n=20_000, seed=21)
    checks.append(rep.passed)
    parts.append(
        f"strategic MC: grad dev {rep.grad_dev_max:.4g} vs bound {rep.grad_bound:.4g} "
        f"(3 SE {3 * rep.grad_dev_se:.2g})"
    )
    return _result("sensitivity", checks, "; ".join(parts))


# ---------------------------------------------------------------------------
# 11. Averaging identities
# ---------------------------------------------------------------------------


def crit_averaging() -> CriterionResult:
    checks = []
    worst = 0.0
    for i in range(1000):
        n = 1 + int(counter_uniforms(derive_key(0xA11, i), 1)[0] * 200)
        deltas = 1e-4 + (1 - 2e-4) * counter_uniforms(derive_key(0xA12, i), n)
        g, res = gamma_products(deltas)
        worst = max(worst, res * g[-1])
        checks.append(res <= 1e-10 / g[-1])
    # synthetic recursion saturating the averaging bound with equality:
    # pick the potential sequence D_t = q^t with q below (1-c1 d)/(1+c2 d),
    # then d h(x_t) = (1 - c1 d) D_{t-1} - (1 + c2 d) D_t + omega defines a
    # nonnegative iterate sequence for the linear metric h(x) = x
    c1, c2, d, omega, q = 0.6, 0.4, 0.2, 0.01, 0.8
    T = 60
    Ds = [q**t for t in range(T + 1)]
    xs = [((1 - c1 * d) * Ds[t - 1] - (1 + c2 * d) * Ds[t] + omega) / d for t in range(1, T + 1)]
    assert all(x >= 0 for x in xs)
    h0 = xs[0]  # start the average at a point with a known metric value
    state = ScheduleState.start([h0])
    for x in xs:
        averaging_update(state, [x], c1=c1, c2=c2, delta_t=d)
    gamma_hat = state.gamma_hat
    lhs = state.avg_point[0] + (c1 + c2) * Ds[-1]
    rhs_exact = gamma_hat * (h0 + (c1 + c2) * Ds[0]) + (omega / d) * (1 - gamma_hat)
    rhs_bound = ((1 - c1 * d) / (1 + c2 * d)) ** T * (h0 + (c1 + c2) * Ds[0]) + omega / d
    eq_err = abs(lhs - rhs_exact)
    checks.append(eq_err <= 1e-9)
    checks.append(lhs <= rhs_bound + 1e-12)
    return _result(
        "averaging", checks,
        f"weight-product residual max {worst:.2e} (tol 1e-10, 1000 sequences); "
        f"constant-parameter trajectory equality error {eq_err:.2e}",
    )


SUITES = {
    "contractions": crit_contractions,
    "divergence": crit_divergence,
    "relative-bias": crit_relative_bias,
    "noise-ball": crit_noise_ball,
    "acceleration": crit_acceleration,
    "model-oracle": crit_model_oracle,
    "deployments": crit_deployments,
    "restarts": crit_restarts,
    "online": crit_online,
    "sensitivity": crit_sensitivity,
    "averaging": crit_averaging,
}


def run_criterion(name: str) -> CriterionResult:
    if name not in SUITES:
        raise KeyError(f"unknown acceptance suite '{name}' (known: {sorted(SUITES)})")
    t0 = time.perf_counter()
    res = SUITES[name]()
    res.runtime = time.perf_counter() - t0
    return res


def run_suite(name: str = "all", out=print) -> list:
    names = list(SUITES) if name == "all" else [name]
    results = [run_criterion(n) for n in names]
    for r in results:
        out(r.line())
    return results
