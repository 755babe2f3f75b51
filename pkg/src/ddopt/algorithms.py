"""Optimization procedures under decision-dependent sampling.

Greedy methods (sg, asg, model-based, online) redeploy the sampling
distribution every iteration; stagewise methods freeze it for a block of
inner steps and redeploy once per stage; the two restart drivers wrap a
constant-parameter method into a target-accuracy procedure with stage counts
computed from its contraction contract.

Every run is a pure function of (problem, config, seed): iteration t of a run
draws from the stream derive_key(seed, t), so trajectories are bit
reproducible and coupled runs share noise exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ParameterError,
    Regularizer,
    ScheduleState,
    UnsupportedOperationError,
    as_point,
    averaging_update,
    derive_key,
)
from .problems import DecisionProblem, QuadraticLoss, _weighted_argmin

__all__ = [
    "StepSchedule",
    "ModelKind",
    "AsgState",
    "Trajectory",
    "RegimeWarning",
    "alpha_hat",
    "certified_step",
    "repeated_minimization_step",
    "conceptual_prox_point_step",
    "conceptual_prox_grad_step",
    "conceptual_run",
    "model_update",
    "register_full_model_solver",
    "sg_run",
    "mba_run",
    "asg_run",
    "online_avg_run",
    "sg_run_batch",
    "stagewise_inner_count",
    "stagewise_mba_run",
    "stagewise_asg_run",
    "minibatch_restart",
    "geometric_decay",
    "restart_config",
    "RestartConfig",
    "RestartResult",
    "StageRecord",
    "ALGORITHMS",
    "run_algorithm",
]

DIVERGENCE_GUARD = 1e8


class RegimeWarning(UserWarning):
    """Step size or feedback strength outside the certified-rate regime."""


# ---------------------------------------------------------------------------
# Schedules, models, trajectories
# ---------------------------------------------------------------------------


class StepSchedule:
    """Step-size sequence eta_t, t = 0, 1, ...  (constant, 1/(a(t+1)), or staged)."""

    def __init__(self, kind: str, at, describe: str):
        self.kind = kind
        self._at = at
        self._describe = describe

    def at(self, t: int) -> float:
        return self._at(t)

    def __repr__(self):
        return f"StepSchedule({self._describe})"

    @classmethod
    def constant(cls, eta: float) -> "StepSchedule":
        if not eta > 0:
            raise ParameterError("constant step size must be positive")
        return cls("constant", lambda t: eta, f"constant eta={eta}")

    @classmethod
    def inverse_time(cls, a: float) -> "StepSchedule":
        if not a > 0:
            raise ParameterError("inverse-time coefficient must be positive")
        return cls("inverse-time", lambda t: 1.0 / (a * (t + 1)), f"eta_t=1/({a}(t+1))")

    @classmethod
    def staged(cls, etas) -> "StepSchedule":
        etas = [float(e) for e in etas]
        if not etas or any(e <= 0 for e in etas):
            raise ParameterError("staged schedule needs positive step sizes")
        return cls("staged", lambda t: etas[min(t, len(etas) - 1)], f"staged {etas}")


@dataclass(frozen=True)
class ModelKind:
    """Stochastic model selector: full (prox-point), linear (gradient), or
    clipped (hinged linearization), with an averaging batch size."""

    selector: str
    batch: int = 1

    def __post_init__(self):
        if self.selector not in ("full", "linear", "clipped"):
            raise ParameterError(f"unknown model selector '{self.selector}'")
        if self.batch < 1:
            raise ParameterError("batch size must be >= 1")


@dataclass
class AsgState:
    """Momentum bookkeeping of the accelerated method: the weight recursion
    delta = sqrt(eta gamma), gamma' = (1 - delta) gamma + delta alpha_hat and
    the current iterate pair.  With a constant step and gamma_0 = alpha_hat
    the weights are fixed points of the recursion (asserted to 1e-12)."""

    gamma_t: float
    delta_t: float
    beta_t: float
    x: np.ndarray
    x_prev: np.ndarray
    y: np.ndarray


@dataclass
class Trajectory:
    """Per-iteration record of a run.

    ``dist_sq`` tracks the last iterate; ``gap`` tracks the averaged iterate
    when the method maintains one (matching the two kinds of guarantees) and
    the last iterate otherwise.  Counters are cumulative and non-decreasing.
    """

    algo: str
    ts: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    deployments: list = field(default_factory=list)
    dist_sq: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_avg: np.ndarray | None = None
    total_samples: int = 0
    total_deployments: int = 0
    converged: bool = False
    diverged: bool = False
    budget_exhausted: bool = False
    meta: dict = field(default_factory=dict)

    def row_count(self) -> int:
        return len(self.ts)


class _Recorder:
    def __init__(self, traj: Trajectory, problem: DecisionProblem, x_bar, every: int):
        self.traj = traj
        self.problem = problem
        self.x_bar = None if x_bar is None else as_point(x_bar, dim=problem.dim)
        self.every = every
        self.exact = problem.has_exact_family and self.x_bar is not None

    def record(self, t, x, avg, samples, deployments, eta, force=False):
        if not force and (self.every <= 0 or t % self.every != 0):
            return
        tr = self.traj
        tr.ts.append(t)
        tr.samples.append(samples)
        tr.deployments.append(deployments)
        tr.etas.append(eta)
        if self.x_bar is not None:
            d = x - self.x_bar
            tr.dist_sq.append(float(d @ d))
            point = avg if avg is not None else x
            tr.gap.append(self.problem.exact_gap(point, self.x_bar) if self.exact else float("nan"))
        else:
            tr.dist_sq.append(float("nan"))
            tr.gap.append(float("nan"))


def alpha_hat(problem: DecisionProblem, metric: str, model: ModelKind | None = None) -> float:
    """Modified strong-convexity constant for the requested target metric.

    Distance guarantees lose one bias term (alpha - gamma beta), objective-gap
    guarantees lose two (alpha - 2 gamma beta); model-based methods replace
    alpha by alpha1 + alpha2.  Runs log which constant they used.
    """
    c = problem.constants
    gb = c.gamma * c.beta
    if model is None:
        base = c.alpha
    else:
        mc = c.model_constants(model.selector, model.batch)
        base = mc.alpha1 + mc.alpha2
    if metric == "distance":
        return base - gb
    if metric == "gap":
        return base - 2.0 * gb
    raise ParameterError(f"metric must be 'distance' or 'gap', got '{metric}'")


def certified_step(problem: DecisionProblem, metric: str, model: ModelKind | None = None) -> float:
    """Largest constant step size covered by the constant-step guarantees."""
    c = problem.constants
    gb = c.gamma * c.beta
    ah = alpha_hat(problem, metric, model)
    if ah <= 0:
        raise ParameterError(f"alpha_hat={ah:.4g} <= 0: outside the convergence regime")
    if model is None:
        # the distance-metric cap alone can exceed 1/(2L) on well-conditioned
        # instances; the key recursion needs eta < 1/(2L) as well
        cap = 1.0 / (gb**2 / ah + c.L)
        return min(cap, 1.0 / (2.0 * c.L)) if metric == "distance" else cap / 2.0
    mc = c.model_constants(model.selector, model.batch)
    if metric == "distance":
        return min(1.0 / (2 * c.L), _inv_pos(mc.alpha1), _inv_pos(mc.alpha2))
    return min(1.0 / (2 * c.L), _inv_pos(mc.alpha1 - gb), _inv_pos(mc.alpha2 - gb))


def _inv_pos(v: float) -> float:
    return 1.0 / v if v > 0 else math.inf


# ---------------------------------------------------------------------------
# Conceptual (exact-expectation) methods
# ---------------------------------------------------------------------------


def repeated_minimization_step(problem: DecisionProblem, x) -> np.ndarray:
    """One retraining step: minimize the expected objective under D(x)."""
    return problem.exact_minimizer(problem.dmap.mean(x))


def conceptual_prox_point_step(problem: DecisionProblem, x, eta: float) -> np.ndarray:
    """Proximal-point step on the static problem induced by D(x); its
    distance contraction factor is (1 + gamma eta beta) / (1 + eta alpha)."""
    return problem.exact_prox_solve(problem.dmap.mean(x), x, eta)


def conceptual_prox_grad_step(problem: DecisionProblem, x, eta: float) -> np.ndarray:
    """Prox step on the exact expected gradient; requires eta <= 1/L."""
    if eta > 1.0 / problem.constants.L + 1e-12:
        raise ParameterError(
            f"conceptual prox-gradient needs eta <= 1/L = {1.0 / problem.constants.L:.4g}, got {eta}"
        )
    x = as_point(x, dim=problem.dim)
    g = problem.exact_mean_grad(at=x, of=x)
    return problem.reg.prox(eta, x - eta * g)


_CONCEPTUAL_STEPS = {
    "rm": lambda p, x, eta: repeated_minimization_step(p, x),
    "ppm": conceptual_prox_point_step,
    "pgm": conceptual_prox_grad_step,
}


def conceptual_run(problem, x0, kind: str, budget: int, eta: float = 1.0, x_bar=None, record_every: int = 1) -> Trajectory:
    """Iterate an exact-expectation update; deploys every iteration, samples none."""
    if kind not in _CONCEPTUAL_STEPS:
        raise ParameterError(f"unknown conceptual method '{kind}'")
    step = _CONCEPTUAL_STEPS[kind]
    traj = Trajectory(algo=kind, meta={"eta": eta})
    rec = _Recorder(traj, problem, x_bar, record_every)
    x = as_point(x0, dim=problem.dim)
    t = 0
    for t in range(budget):
        rec.record(t, x, None, 0, t, eta)
        x = step(problem, x, eta)
        if np.linalg.norm(x) > DIVERGENCE_GUARD:
            traj.diverged = True
            t += 1
            break
    else:
        t = budget
        traj.budget_exhausted = True
    rec.record(t, x, None, 0, t, eta, force=True)
    traj.final_x = x
    traj.total_deployments = t
    return traj


# ---------------------------------------------------------------------------
# Model subproblems
# ---------------------------------------------------------------------------

_FULL_MODEL_SOLVERS: dict = {}


def register_full_model_solver(loss_type, solver):
    """Register argmin_y mean_z l(y, z) + r(y) + ||y - x||^2/(2 eta) for a loss
    class without a built-in closed form.  solver(problem, x, Z, eta) -> y."""
    _FULL_MODEL_SOLVERS[loss_type] = solver


def model_update(problem: DecisionProblem, model: ModelKind, x, Z, eta: float) -> np.ndarray:
    """Minimize the model of the sampled loss plus regularizer plus proximal term."""
    loss, reg = problem.loss, problem.reg
    single = Z.shape[0] == 1
    if model.selector == "linear":
        g = loss.grads(x, Z)[0] if single else loss.grads(x, Z).mean(axis=0)
        return reg.prox(eta, x - eta * g)
    if model.selector == "full":
        if isinstance(loss, QuadraticLoss):
            w = loss._w(problem.dim)
            zbar = Z[0] if single else Z.mean(axis=0)
            a = w + 1.0 / eta
            return _weighted_argmin(a, (w * zbar + x / eta) / a, reg)
        solver = _FULL_MODEL_SOLVERS.get(type(loss))
        if solver is None:
            raise UnsupportedOperationError(
                f"full model for {loss.kind} needs a registered subproblem solver"
            )
        return solver(problem, x, Z, eta)
    # clipped: hinge the averaged linearization at the declared lower bound
    if getattr(loss, "lower_bound", None) != 0.0:
        raise UnsupportedOperationError("clipped model requires a declared loss lower bound of 0")
    v = float(loss.values(x, Z)[0] if single else loss.values(x, Z).mean())
    g = loss.grads(x, Z)[0] if single else loss.grads(x, Z).mean(axis=0)
    return _clipped_update(reg, x, v, g, eta)


def _clipped_update(reg: Regularizer, x, v: float, g, eta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gnorm_sq = float(g @ g)
    if gnorm_sq == 0.0:
        return x.copy()
    kind = reg.kind
    if kind == "zero":
        lam = min(eta, v / gnorm_sq)
        return x - lam * g
    if kind == "sqnorm":
        mu = reg.mu
        lam = ((1.0 + eta * mu) * v - eta * mu * float(g @ x)) / (eta * gnorm_sq)
        lam = min(max(lam, 0.0), 1.0)
        return (x - eta * lam * g) / (1.0 + eta * mu)
    # general prox-friendly regularizer: bisection on the hinge multiplier
    def linear_part(lam):
        y = reg.prox(eta, x - eta * lam * g)
        return v + float(g @ (y - x)), y

    m0, y0 = linear_part(0.0)
    if m0 <= 0.0:
        return y0
    m1, y1 = linear_part(1.0)
    if m1 >= 0.0:
        return y1
    lo, hi = 0.0, 1.0
    y = y1
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m, y = linear_part(mid)
        if abs(m) <= 1e-10:
            break
        if m > 0.0:
            lo = mid
        else:
            hi = mid
    return y


# ---------------------------------------------------------------------------
# Greedy stochastic runs
# ---------------------------------------------------------------------------


def _avg_start(x):
    return x.copy()


def mba_run(
    problem: DecisionProblem,
    x0,
    model: ModelKind,
    schedule: StepSchedule,
    budget: int,
    seed: int,
    *,
    x_bar=None,
    averaging: bool = False,
    metric: str = "distance",
    record_every: int = 1,
    algo: str | None = None,
) -> Trajectory:
    """Greedy model-based run: deploy D(x_t), draw a batch, minimize the model.

    With ``averaging`` the gap-metric running average
    xhat <- (1 - d) xhat + d x,  d = alpha_hat eta / (1 + (alpha1 - gamma beta) eta)
    is maintained, which is the averaged-iterate the gap guarantee speaks about.
    """
    c = problem.constants
    if schedule.at(0) >= 1.0 / (2 * c.L) * (1 + 1e-12) and schedule.kind == "constant":
        warnings.warn(
            f"step {schedule.at(0):.4g} >= 1/(2L): constant-step rate certificates need smaller steps",
            RegimeWarning,
        )
    mc = c.model_constants(model.selector, model.batch)
    gb = c.gamma * c.beta
    traj = Trajectory(algo=algo or f"mba-{model.selector}", meta={
        "seed": seed, "batch": model.batch, "schedule": repr(schedule),
        "alpha_hat": alpha_hat(problem, "gap" if averaging else metric, model),
        "alpha_hat_metric": "gap" if averaging else metric,
    })
    rec = _Recorder(traj, problem, x_bar, record_every)
    x = as_point(x0, dim=problem.dim)
    avg = _avg_start(x) if averaging else None
    samples = 0
    t = 0
    for t in range(budget):
        eta = schedule.at(t)
        rec.record(t, x, avg, samples, t, eta)
        Z = problem.dmap.sample(x, model.batch, seed=derive_key(seed, t))
        x = model_update(problem, model, x, Z, eta)
        samples += model.batch
        if averaging:
            ah = mc.alpha1 + mc.alpha2 - 2.0 * gb
            d = ah * eta / (1.0 + (mc.alpha1 - gb) * eta)
            avg = (1.0 - d) * avg + d * x
        if np.linalg.norm(x) > DIVERGENCE_GUARD:
            traj.diverged = True
            t += 1
            break
    else:
        t = budget
        traj.budget_exhausted = True
    rec.record(t, x, avg, samples, t, schedule.at(max(t - 1, 0)), force=True)
    traj.final_x, traj.final_avg = x, avg
    traj.total_samples, traj.total_deployments = samples, t
    return traj


def sg_run(
    problem: DecisionProblem,
    x0,
    schedule: StepSchedule | None,
    budget: int,
    seed: int,
    *,
    x_bar=None,
    averaging: bool = False,
    metric: str = "distance",
    record_every: int = 1,
) -> Trajectory:
    """Stochastic proximal gradient under greedy deployment.

    Sample z_t from D(x_t), then x_{t+1} = prox_{eta_t r}(x_t - eta_t grad l(x_t, z_t)).
    With ``averaging`` the running average uses weight alpha_hat eta / 2 with
    alpha_hat = alpha - 2 gamma beta (the objective-gap constant).
    """
    if schedule is None:
        schedule = StepSchedule.constant(certified_step(problem, metric))
    c = problem.constants
    if schedule.kind == "constant" and schedule.at(0) >= 1.0 / (2 * c.L) * (1 + 1e-12):
        warnings.warn(
            f"step {schedule.at(0):.4g} >= 1/(2L): rate certificates need eta_t < 1/(2L)",
            RegimeWarning,
        )
    ah_gap = alpha_hat(problem, "gap")
    traj = Trajectory(algo="sg", meta={
        "seed": seed, "schedule": repr(schedule),
        "alpha_hat": ah_gap if averaging else alpha_hat(problem, metric),
        "alpha_hat_metric": "gap" if averaging else metric,
    })
    rec = _Recorder(traj, problem, x_bar, record_every)
    x = as_point(x0, dim=problem.dim)
    avg = _avg_start(x) if averaging else None
    t = 0
    for t in range(budget):
        eta = schedule.at(t)
        rec.record(t, x, avg, t, t, eta)
        Z = problem.dmap.sample(x, 1, seed=derive_key(seed, t))
        g = problem.loss.grads(x, Z)[0]
        x = problem.reg.prox(eta, x - eta * g)
        if averaging:
            d = 0.5 * ah_gap * eta
            avg = (1.0 - d) * avg + d * x
        if np.linalg.norm(x) > DIVERGENCE_GUARD:
            traj.diverged = True
            t += 1
            break
    else:
        t = budget
        traj.budget_exhausted = True
    rec.record(t, x, avg, t, t, schedule.at(max(t - 1, 0)), force=True)
    traj.final_x, traj.final_avg = x, avg
    traj.total_samples = traj.total_deployments = t
    return traj


def asg_run(
    problem: DecisionProblem,
    x0,
    budget: int,
    seed: int,
    *,
    eta: float | None = None,
    gamma0: float | None = None,
    schedule: StepSchedule | None = None,
    batch: int = 1,
    x_bar=None,
    record_every: int = 1,
) -> Trajectory:
    """Accelerated stochastic proximal gradient under greedy deployment.

    Samples at the extrapolated point y (that is where the distribution is
    deployed), then
        x_t = prox_{eta_t r}(y_{t-1} - eta_t grad l(y_{t-1}, z_t)),
        y_t = x_t + beta_t (x_t - x_{t-1}),
    with momentum driven by the weight recursion
        delta_t = sqrt(eta_t gamma_t),  gamma_t = (1 - delta_t) gamma_{t-1} + delta_t alpha_hat,
        beta_t = delta_t (1 - delta_t) eta_{t+1} / (eta_t delta_{t+1} + eta_{t+1} delta_t^2).
    With constant eta and gamma0 = alpha_hat the weights lock to
    delta = sqrt(eta alpha_hat) and beta = (1 - delta) / (1 + delta).
    """
    c = problem.constants
    ah = alpha_hat(problem, "gap")  # alpha - 2 gamma beta
    if ah <= 0:
        raise ParameterError(f"accelerated method needs alpha - 2*gamma*beta > 0, got {ah:.4g}")
    rho_cap = 0.5 / (1.0 + math.sqrt(32.0 + 64.0 * math.sqrt(3.0 * c.kappa)))
    if c.rho > rho_cap:
        warnings.warn(
            f"rho={c.rho:.4g} exceeds the certified acceleration regime {rho_cap:.4g}; "
            "running anyway without a rate guarantee",
            RegimeWarning,
        )
    if schedule is None:
        schedule = StepSchedule.constant(eta if eta is not None else 1.0 / (4.0 * c.L))
    g0 = ah if gamma0 is None else float(gamma0)
    if g0 <= 0:
        raise ParameterError("gamma0 must be positive")

    constant_lock = schedule.kind == "constant" and abs(g0 - ah) <= 1e-12 * max(1.0, ah)
    lock_delta = math.sqrt(schedule.at(0) * ah) if constant_lock else None

    traj = Trajectory(algo="asg", meta={
        "seed": seed, "schedule": repr(schedule), "gamma0": g0,
        "alpha_hat": ah, "alpha_hat_metric": "gap", "samples_at": "y",
    })
    rec = _Recorder(traj, problem, x_bar, record_every)
    x = as_point(x0, dim=problem.dim)
    x_prev = x.copy()
    y = x.copy()
    gamma_cur = g0
    state = AsgState(g0, 0.0, 0.0, x, x_prev, y)

    def next_delta(gamma_prev, eta_next):
        b = eta_next * (gamma_prev - ah)
        return 0.5 * (-b + math.sqrt(b * b + 4.0 * eta_next * gamma_prev))

    samples = 0
    t = 0
    for t in range(budget):
        eta_t = schedule.at(t)
        rec.record(t, x, None, samples, t, eta_t)
        if t == 0:
            delta_t = math.sqrt(eta_t * gamma_cur)
        else:
            delta_t = next_delta(gamma_cur, eta_t)
            gamma_cur = (1.0 - delta_t) * gamma_cur + delta_t * ah
        Z = problem.dmap.sample(y, batch, seed=derive_key(seed, t))
        g = problem.loss.grads(y, Z).mean(axis=0)
        samples += batch
        x_new = problem.reg.prox(eta_t, y - eta_t * g)
        eta_next = schedule.at(t + 1)
        delta_next = next_delta(gamma_cur, eta_next)
        beta_t = delta_t * (1.0 - delta_t) * eta_next / (eta_t * delta_next + eta_next * delta_t**2)
        if constant_lock:
            beta_lock = (1.0 - lock_delta) / (1.0 + lock_delta)
            assert abs(delta_t - lock_delta) <= 1e-12 and abs(beta_t - beta_lock) <= 1e-12
        x_prev, x = x, x_new
        y = x + beta_t * (x - x_prev)
        state = AsgState(gamma_cur, delta_t, beta_t, x, x_prev, y)
        if np.linalg.norm(x) > DIVERGENCE_GUARD:
            traj.diverged = True
            t += 1
            break
    else:
        t = budget
        traj.budget_exhausted = True
    rec.record(t, x, None, samples, t, schedule.at(max(t - 1, 0)), force=True)
    traj.final_x = x
    traj.total_samples, traj.total_deployments = samples, t
    traj.meta["asg_state"] = state
    return traj


def online_avg_run(
    problem: DecisionProblem,
    x0,
    method: str,
    schedule: StepSchedule | None,
    budget: int,
    seed: int,
    *,
    x_bar=None,
    record_every: int = 1,
    g_bound: float | None = None,
) -> Trajectory:
    """Online reduction: run an online method on l_t = l(., z_t), z_t ~ D(x_t),
    and report the uniform average xhat_t = (1/t) sum x_i with its gap trace.

    online-pg is the online proximal gradient step (eta_t = 1/(alpha t) by
    default); dual-avg anchors a quadratic at x0 with weight G/(D sqrt(t)) on
    top of the averaged gradient and requires a bounded domain (its regret
    analysis does).  The trajectory reports the largest sampled gradient norm
    in meta["g_max"].
    """
    if method not in ("online-pg", "dual-avg"):
        raise ParameterError(f"unknown online method '{method}'")
    c = problem.constants
    if method == "dual-avg" and not problem.reg.bounded:
        raise ParameterError("dual averaging requires a bounded domain (box or ball regularizer)")
    if schedule is None:
        schedule = StepSchedule.inverse_time(c.alpha)
    traj = Trajectory(algo=method, meta={"seed": seed, "schedule": repr(schedule)})
    rec = _Recorder(traj, problem, x_bar, record_every)
    x = as_point(x0, dim=problem.dim)
    x_anchor = x.copy()
    avg = x.copy()
    gsum = np.zeros_like(x)
    g_max = 0.0 if g_bound is None else float(g_bound)
    diameter = problem.reg.diameter() if problem.reg.bounded else None
    t = 0
    for t in range(budget):
        eta = schedule.at(t)
        rec.record(t, x, avg, t, t, eta)
        Z = problem.dmap.sample(x, 1, seed=derive_key(seed, t))
        g = problem.loss.grads(x, Z)[0]
        g_max = max(g_max, float(np.linalg.norm(g)))
        if method == "online-pg":
            x = problem.reg.prox(eta, x - eta * g)
        else:
            gsum += g
            # vanishing anchor weight G / (D sqrt(t+1)) on the averaged gradient
            weight = max(g_max, 1e-12) / (diameter * math.sqrt(t + 1.0))
            x = problem.reg.prox(1.0 / weight, x_anchor - gsum / ((t + 1.0) * weight))
        avg = avg + (x - avg) / (t + 2.0)  # uniform average including x0
        if np.linalg.norm(x) > DIVERGENCE_GUARD:
            traj.diverged = True
            t += 1
            break
    else:
        t = budget
        traj.budget_exhausted = True
    rec.record(t, x, avg, t, t, schedule.at(max(t - 1, 0)), force=True)
    traj.final_x, traj.final_avg = x, avg
    traj.total_samples = traj.total_deployments = t
    traj.meta["g_max"] = g_max
    return traj


# ---------------------------------------------------------------------------
# Vectorized many-seed stochastic gradient (linear model)
# ---------------------------------------------------------------------------


@dataclass
class BatchRun:
    final: np.ndarray            # (n_seeds, d) last iterates
    avg: np.ndarray | None       # (n_seeds, d) averaged iterates
    records: list                # (t, metric array) pairs if metric_fn given
    samples_per_seed: int
    deployments_per_seed: int
    g_max: float = 0.0


def sg_run_batch(
    problem: DecisionProblem,
    x0,
    schedule: StepSchedule,
    budget: int,
    seeds,
    *,
    batch: int = 1,
    averaging: str | None = None,   # None | "uniform" | "gap-weighted"
    metric_fn=None,
    metric_every: int = 0,
    x_start=None,
) -> BatchRun:
    """Run one independent stochastic proximal gradient chain per seed in
    lockstep.  Row j is bitwise identical to the solo run with seed seeds[j];
    only the quadratic + gaussian-location family is supported (the vector
    arithmetic relies on its structure).

    ``metric_fn(t, X, avg)`` is invoked every ``metric_every`` iterations and
    its value stored in ``records``.
    """
    if not problem.has_exact_family:
        raise UnsupportedOperationError("batched runs support the gaussian + quadratic family only")
    seeds = np.asarray(list(seeds), dtype=np.uint64)
    k, d = seeds.size, problem.dim
    w = problem.loss._w(d)
    reg = problem.reg
    X = np.tile(as_point(x0, dim=d), (k, 1)) if x_start is None else np.array(x_start, dtype=np.float64)
    avg = X.copy() if averaging else None
    ah_gap = alpha_hat(problem, "gap")
    records = []
    g_max = 0.0
    for t in range(budget):
        eta = schedule.at(t)
        if metric_fn is not None and metric_every > 0 and t % metric_every == 0:
            records.append((t, metric_fn(t, X, avg)))
        keys = derive_key(seeds, t)
        Z = problem.dmap.sample_stack(X, batch, keys)
        G = (w * (X[:, None, :] - Z)).mean(axis=1)
        g_max = max(g_max, float(np.sqrt(np.max(np.sum(G * G, axis=1)))))
        X = reg.prox(eta, X - eta * G)
        if averaging == "uniform":
            avg = avg + (X - avg) / (t + 2.0)
        elif averaging == "gap-weighted":
            dw = 0.5 * ah_gap * eta
            avg = (1.0 - dw) * avg + dw * X
        if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > DIVERGENCE_GUARD:
            raise FloatingPointError("batched run diverged")
    if metric_fn is not None and metric_every > 0 and (not records or records[-1][0] != budget):
        records.append((budget, metric_fn(budget, X, avg)))
    return BatchRun(X, avg, records, budget * batch, budget, g_max)


# ---------------------------------------------------------------------------
# Stagewise (lazy deployment) methods
# ---------------------------------------------------------------------------


def stagewise_inner_count(problem: DecisionProblem, model: ModelKind, version: str, eta: float) -> int:
    """Inner iterations per stage that halve the outer error (up to the bias floor)."""
    c = problem.constants
    mc = c.model_constants(model.selector, model.batch)
    gb = c.gamma * c.beta
    a1, a2 = mc.alpha1, mc.alpha2
    if version == "I":
        denom = (2 * a1 + 2 * a2 - gb) * eta
        arg = (2 * a1 + 2 * a2 - gb) / (a1 + a2 - gb)
    elif version == "II":
        denom = (a1 + a2 - gb) * eta
        arg = 2 * (a1 + a2) / (a1 + a2 - gb)
    else:
        raise ParameterError("version must be 'I' or 'II'")
    return max(1, math.ceil((1.0 + 1.0 / denom) * math.log(arg)))


def stagewise_mba_run(
    problem: DecisionProblem,
    u0,
    model: ModelKind,
    version: str,
    eta: float,
    budget: int,
    seed: int,
    *,
    x_bar=None,
    record_every: int = 1,
    inner_count: int | None = None,
) -> Trajectory:
    """Inexact repeated minimization with a model-based inner solver.

    Each outer stage deploys D(u_t) once, runs J inner model-based steps on the
    frozen distribution, and advances to the last inner iterate (version I) or
    to the weighted running average with weights
    dhat_j = (alpha1 + alpha2 - gamma beta) eta / (1 + (alpha1 - gamma beta) eta)
    (version II).  Outer stages run for t = 0..budget inclusive.
    """
    c = problem.constants
    mc = c.model_constants(model.selector, model.batch)
    gb = c.gamma * c.beta
    ratio = gb / (mc.alpha1 + mc.alpha2) if (mc.alpha1 + mc.alpha2) > 0 else math.inf
    if ratio >= 1.0:
        raise ParameterError(
            f"stagewise regime needs gamma*beta/(alpha1+alpha2) < 1, got {ratio:.4g}"
        )
    if version == "I":
        cap = 1.0 / (2 * c.L)
    elif version == "II":
        cap = min(1.0 / (2 * c.L), _inv_pos(gb - mc.alpha1), _inv_pos(mc.alpha2))
    else:
        raise ParameterError("version must be 'I' or 'II'")
    if eta > cap * (1 + 1e-12):
        raise ParameterError(f"stagewise version {version} needs eta <= {cap:.4g}, got {eta}")
    J = inner_count if inner_count is not None else stagewise_inner_count(problem, model, version, eta)

    traj = Trajectory(algo=f"stage-mba-{version.lower()}", meta={
        "seed": seed, "eta": eta, "inner_count": J, "batch": model.batch,
        "alpha_hat": mc.alpha1 + mc.alpha2 - gb, "alpha_hat_metric": "distance" if version == "I" else "gap",
    })
    rec = _Recorder(traj, problem, x_bar, record_every)
    u = as_point(u0, dim=problem.dim)
    samples = 0
    deployments = 0
    for t in range(budget + 1):
        rec.record(t, u, None, samples, deployments, eta)
        deployments += 1
        x = u.copy()
        state = ScheduleState.start(x) if version == "II" else None
        for j in range(1, J + 1):
            Z = problem.dmap.sample(u, model.batch, seed=derive_key(seed, t, j))
            x = model_update(problem, model, x, Z, eta)
            samples += model.batch
            if version == "II":
                averaging_update(state, x, c1=mc.alpha2, c2=mc.alpha1 - gb, delta_t=eta)
        u = x if version == "I" else state.avg_point
        if np.linalg.norm(u) > DIVERGENCE_GUARD:
            traj.diverged = True
            break
    else:
        traj.budget_exhausted = True
    rec.record(budget + 1, u, None, samples, deployments, eta, force=True)
    traj.final_x = u
    traj.total_samples, traj.total_deployments = samples, deployments
    return traj


def stagewise_asg_run(
    problem: DecisionProblem,
    u0,
    budget: int,
    seed: int,
    *,
    inner_iters: int | None = None,
    batch: int = 1,
    x_bar=None,
    record_every: int = 1,
) -> Trajectory:
    """Inexact repeated minimization with an accelerated inner solver.

    Requires rho < 1/2.  Each stage freezes D(u_t), runs
    J = ceil(sqrt(L/alpha) log(4 / (1/2 - rho))) accelerated steps with
    eta = 1/L and static momentum (1 - sqrt(alpha/L)) / (1 + sqrt(alpha/L)),
    then advances to the last inner iterate.
    """
    c = problem.constants
    if c.rho >= 0.5:
        raise ParameterError(f"stagewise accelerated method needs rho < 1/2, got rho={c.rho:.4g}")
    J = inner_iters if inner_iters is not None else max(
        1, math.ceil(math.sqrt(c.kappa) * math.log(4.0 / (0.5 - c.rho)))
    )
    eta = 1.0 / c.L
    beta_m = (1.0 - math.sqrt(c.alpha / c.L)) / (1.0 + math.sqrt(c.alpha / c.L))
    traj = Trajectory(algo="stage-asg", meta={
        "seed": seed, "inner_count": J, "batch": batch, "eta": eta, "momentum": beta_m,
    })
    rec = _Recorder(traj, problem, x_bar, record_every)
    u = as_point(u0, dim=problem.dim)
    samples = 0
    deployments = 0
    for t in range(budget + 1):
        rec.record(t, u, None, samples, deployments, eta)
        deployments += 1
        x_prev = u.copy()
        x = u.copy()
        y = u.copy()
        for j in range(1, J + 1):
            Z = problem.dmap.sample(u, batch, seed=derive_key(seed, t, j))
            g = problem.loss.grads(y, Z).mean(axis=0)
            x_prev, x = x, problem.reg.prox(eta, y - eta * g)
            y = x + beta_m * (x - x_prev)
            samples += batch
        u = x
        if np.linalg.norm(u) > DIVERGENCE_GUARD:
            traj.diverged = True
            break
    else:
        traj.budget_exhausted = True
    rec.record(budget + 1, u, None, samples, deployments, eta, force=True)
    traj.final_x = u
    traj.total_samples, traj.total_deployments = samples, deployments
    return traj


# ---------------------------------------------------------------------------
# Restart drivers
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    k: int
    param: float        # minibatch size or stage step parameter
    iters: int
    samples: int
    deployments: int


@dataclass
class RestartResult:
    y: np.ndarray
    stages: list
    total_samples: int
    total_deployments: int
    total_inner_iters: int
    budget_exhausted: bool = False


def _check_h0(h, y0, Delta):
    if h is None:
        return
    h0 = np.max(np.atleast_1d(h(y0)))
    if h0 > Delta * (1.0 + 1e-9):
        raise ParameterError(f"Delta={Delta:.4g} must dominate h(y0)={h0:.4g}")


def minibatch_restart(inner, h, y0, Delta: float, C: float, tau: float, B: float, eps: float, budget: int | None = None) -> RestartResult:
    """Variance-halving restarts for an inner method with contract
    E h(out) <= C (1 - tau)^T h(in) + B / m when run for T iterations on
    minibatches of size m.

    Runs a warmup stage at m = 1 for T0 = ceil(log(2 C Delta / eps) / tau),
    then K = ceil(1 + log2(B / eps)) stages with m_k = 2^k and
    T_k = ceil(log(4C) / tau); the returned point carries E h <= eps.
    inner(y, m, T) must return (y_out, samples_used, deployments_used).
    """
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"tau must lie in (0, 1), got {tau}")
    if Delta < 0 or B < 0 or eps <= 0 or C <= 0:
        raise ParameterError("need Delta >= 0, B >= 0, C > 0, eps > 0")
    _check_h0(h, y0, Delta)
    T0 = max(0, math.ceil(math.log(max(2.0 * C * Delta / eps, 1.0)) / tau))
    K = 0 if B == 0.0 else max(0, math.ceil(1.0 + math.log2(B / eps)))
    Tk = math.ceil(math.log(4.0 * C) / tau)
    y = y0
    stages = []
    totals = [0, 0, 0]  # samples, deployments, inner iters
    exhausted = False
    for k in range(0, K + 1):
        m, T = (1, T0) if k == 0 else (2**k, Tk)
        if budget is not None and totals[2] + T > budget:
            exhausted = True
            break
        if T == 0:
            stages.append(StageRecord(k, m, 0, 0, 0))
            continue
        y, samples, deployments = inner(y, m, T)
        stages.append(StageRecord(k, m, T, samples, deployments))
        totals[0] += samples
        totals[1] += deployments
        totals[2] += T
    return RestartResult(y, stages, totals[0], totals[1], totals[2], exhausted)


def geometric_decay(inner, h, y0, Delta: float, C: float, D: float, delta0: float, psi, eps: float, budget: int | None = None) -> RestartResult:
    """Step-halving restarts for an inner method with contract
    E h(out) <= C (1 - psi(delta))^T h(in) + D delta at stage parameter delta.

    Warmup runs at delta0 for T0 = ceil(log(2 C Delta / eps) / psi(delta0));
    stage k halves the parameter, delta_k = 2^-k delta0, and runs
    T_k = ceil(log(4C) / psi(delta_k)).  K = ceil(1 + log2(D delta0 / eps))
    stages (zero when D delta0 <= eps: the warmup already lands inside the
    noise floor).  inner(y, delta, T) -> (y_out, samples, deployments).
    """
    if not 0.0 < delta0 < 1.0:
        raise ParameterError(f"delta0 must lie in (0, 1), got {delta0}")
    if Delta < 0 or D < 0 or eps <= 0 or C <= 0:
        raise ParameterError("need Delta >= 0, D >= 0, C > 0, eps > 0")
    _check_h0(h, y0, Delta)
    K = 0 if D * delta0 <= eps else math.ceil(1.0 + math.log2(D * delta0 / eps))
    y = y0
    stages = []
    totals = [0, 0, 0]
    exhausted = False
    for k in range(0, K + 1):
        dk = delta0 * 2.0**-k
        rate = psi(dk)
        if not 0.0 < rate < 1.0:
            raise ParameterError(f"psi(delta_{k})={rate:.4g} must lie in (0, 1)")
        if k == 0:
            T = max(0, math.ceil(math.log(max(2.0 * C * Delta / eps, 1.0)) / rate))
        else:
            T = math.ceil(math.log(4.0 * C) / rate)
        if budget is not None and totals[2] + T > budget:
            exhausted = True
            break
        if T == 0:
            stages.append(StageRecord(k, dk, 0, 0, 0))
            continue
        y, samples, deployments = inner(y, dk, T)
        stages.append(StageRecord(k, dk, T, samples, deployments))
        totals[0] += samples
        totals[1] += deployments
        totals[2] += T
    return RestartResult(y, stages, totals[0], totals[1], totals[2], exhausted)


@dataclass(frozen=True)
class RestartConfig:
    """Contract-derived driver parameters for a (method, metric) pair."""

    driver: str          # "geo" or "minibatch"
    C: float
    noise: float         # D (geo) or B (minibatch)
    delta0: float        # initial stage parameter (geo only)
    rate: float          # linear psi coefficient (geo) or tau (minibatch)
    psi_constant: bool   # geo: psi(delta) = rate (stagewise) vs rate * delta
    alpha_hat: float
    metric: str

    def psi(self, delta: float) -> float:
        return self.rate if self.psi_constant else self.rate * delta


def restart_config(problem: DecisionProblem, algo: str, metric: str = "gap", batch: int = 1) -> RestartConfig:
    """Contract constants (C, noise level, stage parameter, rate) under which
    each method satisfies its restart-driver assumption, per its constant-step
    guarantee.  The matching modified strong-convexity constant is recorded.
    """
    c = problem.constants
    gb = c.gamma * c.beta
    if algo == "sg":
        ah = alpha_hat(problem, metric)
        if ah <= 0:
            raise ParameterError(f"sg restart outside regime (alpha_hat={ah:.4g})")
        s2 = c.sigma_sq / batch
        if metric == "distance":
            d0 = min(1.0 / (gb**2 / ah + c.L), 1.0 / (2.0 * c.L))
            return RestartConfig("geo", 1.0, 2.0 * s2 / ah, d0, 2.0 * ah / 3.0, False, ah, metric)
        return RestartConfig("geo", 2.0, s2, 0.5 / (gb**2 / ah + c.L), 0.5 * ah, False, ah, metric)
    if algo.startswith("mba-"):
        model = ModelKind(algo.split("-", 1)[1], batch)
        mc = c.model_constants(model.selector, batch)
        ah = alpha_hat(problem, metric, model)
        if ah <= 0:
            raise ParameterError(f"mba restart outside regime (alpha_hat={ah:.4g})")
        if metric == "distance":
            d0 = min(1.0 / (2 * c.L), _inv_pos(mc.alpha1), _inv_pos(mc.alpha2))
            return RestartConfig("geo", 1.0, mc.sigma0_sq / (2.0 * ah), d0, 0.5 * ah, False, ah, metric)
        d0 = min(1.0 / (2 * c.L), _inv_pos(mc.alpha1 - gb), _inv_pos(mc.alpha2 - gb))
        return RestartConfig("geo", 2.0, mc.sigma0_sq, d0, 0.5 * ah, False, ah, metric)
    if algo in ("stage-mba-i", "stage-mba-ii"):
        version = "I" if algo.endswith("-i") else "II"
        mc = c.model_constants("linear", batch)
        a12 = mc.alpha1 + mc.alpha2
        if gb / a12 >= 1.0:
            raise ParameterError("stagewise restart outside regime")
        if version == "I":
            rate = 0.5 * (1.0 - gb / (2 * a12 - gb))
            noise = 2.0 * mc.sigma0_sq / (a12 - gb)
            d0 = 1.0 / (2 * c.L)
            return RestartConfig("geo", 1.0, noise, d0, rate, True, a12 - gb, "distance")
        rate = 0.5 * (1.0 - gb / a12)
        noise = 2.0 * mc.sigma0_sq / (1.0 - gb / a12)
        d0 = min(1.0 / (2 * c.L), _inv_pos(gb - mc.alpha1), _inv_pos(mc.alpha2))
        return RestartConfig("geo", 1.0, noise, d0, rate, True, a12 - gb, "gap")
    if algo == "asg":
        ah = alpha_hat(problem, "gap")
        if ah <= 0:
            raise ParameterError("asg restart outside regime")
        tau = math.sqrt(ah / (4.0 * c.L))
        noise = 9.0 * c.sigma_sq / (16.0 * math.sqrt(c.L * ah))
        return RestartConfig("minibatch", 2.0, noise, 0.0, tau, False, ah, "gap")
    if algo == "stage-asg":
        if c.rho >= 0.5:
            raise ParameterError("stage-asg restart needs rho < 1/2")
        tau = 1.0 - 1.0 / (2.0 * (1.0 - c.rho))
        noise = 32.0 * c.sigma_sq / (5.0 * (1.0 - c.rho / (1.0 - c.rho)) * math.sqrt(c.alpha * c.L))
        return RestartConfig("minibatch", 1.0, noise, 0.0, tau, False, c.alpha - gb, "gap")
    raise ParameterError(f"no restart contract registered for '{algo}'")


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _conceptual_entry(kind):
    def run(problem, x0, budget, seed, eta=1.0, x_bar=None, record_every=1, **_):
        return conceptual_run(problem, x0, kind, budget, eta=eta, x_bar=x_bar, record_every=record_every)

    return run


def _mba_entry(selector):
    def run(problem, x0, budget, seed, eta=None, batch=1, x_bar=None, record_every=1,
            averaging=False, metric="distance", **_):
        model = ModelKind(selector, batch)
        if eta is None:
            try:
                eta = certified_step(problem, metric, model)
            except ParameterError:
                eta = 1.0 / (2.0 * problem.constants.L)
                warnings.warn(
                    f"no certified step for mba-{selector} on this instance; "
                    f"falling back to 1/(2L) = {eta:.4g}",
                    RegimeWarning,
                )
        return mba_run(problem, x0, model, StepSchedule.constant(eta), budget, seed, x_bar=x_bar,
                       averaging=averaging, metric=metric, record_every=record_every)

    return run


def _sg_entry(problem, x0, budget, seed, eta=None, x_bar=None, record_every=1,
              averaging=False, metric="distance", **_):
    schedule = None if eta is None else StepSchedule.constant(eta)
    return sg_run(problem, x0, schedule, budget, seed, x_bar=x_bar,
                  averaging=averaging, metric=metric, record_every=record_every)


def _asg_entry(problem, x0, budget, seed, eta=None, gamma0=None, batch=1, x_bar=None, record_every=1, **_):
    return asg_run(problem, x0, budget, seed, eta=eta, gamma0=gamma0, batch=batch,
                   x_bar=x_bar, record_every=record_every)


def _online_entry(method):
    def run(problem, x0, budget, seed, eta=None, x_bar=None, record_every=1, **_):
        schedule = None if eta is None else StepSchedule.constant(eta)
        return online_avg_run(problem, x0, method, schedule, budget, seed,
                              x_bar=x_bar, record_every=record_every)

    return run


def _stage_mba_entry(version):
    def run(problem, x0, budget, seed, eta=None, batch=1, x_bar=None, record_every=1, **_):
        model = ModelKind("linear", batch)
        if eta is None:
            c = problem.constants
            mc = c.model_constants("linear", batch)
            gb = c.gamma * c.beta
            if version == "I":
                eta = 1.0 / (2 * c.L)
            else:
                eta = min(1.0 / (2 * c.L), _inv_pos(gb - mc.alpha1), _inv_pos(mc.alpha2))
        return stagewise_mba_run(problem, x0, model, version, eta, budget, seed,
                                 x_bar=x_bar, record_every=record_every)

    return run


def _stage_asg_entry(problem, x0, budget, seed, inner_iters=None, batch=1, x_bar=None, record_every=1, **_):
    return stagewise_asg_run(problem, x0, budget, seed, inner_iters=inner_iters,
                             batch=batch, x_bar=x_bar, record_every=record_every)


ALGORITHMS = {
    "rm": _conceptual_entry("rm"),
    "ppm": _conceptual_entry("ppm"),
    "pgm": _conceptual_entry("pgm"),
    "sg": _sg_entry,
    "asg": _asg_entry,
    "mba-full": _mba_entry("full"),
    "mba-linear": _mba_entry("linear"),
    "mba-clipped": _mba_entry("clipped"),
    "online-pg": _online_entry("online-pg"),
    "dual-avg": _online_entry("dual-avg"),
    "stage-mba-i": _stage_mba_entry("I"),
    "stage-mba-ii": _stage_mba_entry("II"),
    "stage-asg": _stage_asg_entry,
}


def run_algorithm(name: str, problem: DecisionProblem, x0, budget: int, seed: int, **params) -> Trajectory:
    if name not in ALGORITHMS:
        raise ParameterError(f"unknown algorithm '{name}' (known: {sorted(ALGORITHMS)})")
    return ALGORITHMS[name](problem, x0, budget, seed, **params)
