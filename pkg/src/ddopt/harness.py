"""Experiment harness: declarative TOML configs, batch runs across seeds and
sweep grids, deterministic CSV emission, convergence-rate fitting, and the
regime-sweep table.

Outputs are flat files: one trajectory CSV per (seed, sweep point) with the
column schema {run_id, algo, t, samples, deployments, dist_sq, gap, gap_se,
eta}, one aggregated summary CSV, and an optional gnuplot script.  Identical
configs produce byte-identical files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .core import NoCertificateError, ParameterError, UnsupportedOperationError, derive_key
from .equilibrium import equilibrium
from .problems import DecisionProblem, make_problem
from .algorithms import (
    ALGORITHMS,
    ModelKind,
    Trajectory,
    restart_config,
    run_algorithm,
    geometric_decay,
    minibatch_restart,
    stagewise_mba_run,
    stagewise_asg_run,
    sg_run,
    mba_run,
    asg_run,
    StepSchedule,
)

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "run_experiment",
    "run_wrapped",
    "RateFit",
    "fit_rate",
    "theory_factor",
    "regime_sweep",
    "CSV_COLUMNS",
    "SEED_OFFSET_ENV",
]

CSV_COLUMNS = ["run_id", "algo", "t", "samples", "deployments", "dist_sq", "gap", "gap_se", "eta"]
SEED_OFFSET_ENV = "DDOPT_SEED_OFFSET"
WRAPPERS = ("restart-geo", "restart-minibatch")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    problem_name: str
    problem_params: dict
    algo_name: str
    algo_params: dict
    seeds: list
    budget: int
    metric: str = "distance"
    x0: list | None = None
    record_every: int = 1
    wrapper: str | None = None
    eps: float | None = None
    sweep_axis: str | None = None
    sweep_grid: list = field(default_factory=list)
    emit_gnuplot: bool = False

    def validate(self):
        if self.algo_name not in ALGORITHMS:
            raise ParameterError(f"unknown algorithm '{self.algo_name}'")
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ParameterError("seeds must be distinct")
        if self.metric not in ("distance", "gap"):
            raise ParameterError("metric must be 'distance' or 'gap'")
        if self.wrapper is not None:
            if self.wrapper not in WRAPPERS:
                raise ParameterError(f"wrapper must be one of {WRAPPERS}")
            if self.eps is None or self.eps <= 0:
                raise ParameterError("a restart wrapper needs a positive target eps")
        if self.sweep_axis is not None and self.sweep_axis not in ("gamma", "eps"):
            raise ParameterError("sweep axis must be 'gamma' or 'eps'")
        make_problem(self.problem_name, **self.problem_params)  # resolves or raises
        return self


def parse_config(text: str) -> ExperimentConfig:
    """Parse the TOML experiment description (sections: problem, algorithm,
    run, optional sweep)."""
    data = tomllib.loads(text)
    try:
        prob = dict(data["problem"])
        algo = dict(data["algorithm"])
        run = dict(data.get("run", {}))
    except KeyError as e:
        raise ParameterError(f"config missing section {e}") from None
    sweep = dict(data.get("sweep", {}))
    cfg = ExperimentConfig(
        problem_name=str(prob.pop("name")),
        problem_params=prob,
        algo_name=str(algo.pop("name")),
        algo_params={k: v for k, v in algo.items() if k not in ("wrapper", "eps")},
        seeds=[int(s) for s in run.get("seeds", [1])],
        budget=int(run.get("budget", 1000)),
        metric=str(run.get("metric", "distance")),
        x0=run.get("x0"),
        record_every=int(run.get("record_every", 1)),
        wrapper=algo.get("wrapper"),
        eps=algo.get("eps"),
        sweep_axis=sweep.get("axis"),
        sweep_grid=[float(g) for g in sweep.get("grid", [])],
        emit_gnuplot=bool(run.get("gnuplot", False)),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _seed_offset() -> int:
    return int(os.environ.get(SEED_OFFSET_ENV, "0"))


# ---------------------------------------------------------------------------
# Restart-wrapped runs
# ---------------------------------------------------------------------------


def run_wrapped(
    problem: DecisionProblem,
    algo: str,
    wrapper: str,
    eps: float,
    x0,
    seed: int,
    *,
    metric: str = "gap",
    x_bar=None,
    Delta: float | None = None,
    budget: int | None = None,
    batch: int = 1,
    algo_params: dict | None = None,
) -> Trajectory:
    """Run a restart driver around a registered method, assembling a stagewise
    trajectory (one row per driver stage).

    The driver constants come from the method's constant-parameter guarantee
    via restart_config; Delta defaults to a generous bound from the start
    metric when an equilibrium oracle is available.
    """
    cfg = restart_config(problem, algo, metric=metric, batch=batch)
    params = dict(algo_params or {})
    x0 = np.asarray(x0, dtype=np.float64)
    if Delta is None:
        if x_bar is None:
            raise ParameterError("run_wrapped needs Delta or an equilibrium point")
        d0 = float(np.sum((x0 - np.asarray(x_bar)) ** 2))
        Delta = 4.0 * (d0 if cfg.metric == "distance" else problem.exact_gap(x0, x_bar)) + 1e-12

    stage_idx = [0]
    traj = Trajectory(algo=f"{wrapper}({algo})", meta={
        "seed": seed, "eps": eps, "alpha_hat": cfg.alpha_hat, "alpha_hat_metric": cfg.metric,
    })

    def record_state(y, samples, deployments):
        traj.ts.append(len(traj.ts))
        traj.samples.append(samples)
        traj.deployments.append(deployments)
        traj.etas.append(float("nan"))
        if x_bar is not None:
            d = y - np.asarray(x_bar)
            traj.dist_sq.append(float(d @ d))
            traj.gap.append(problem.exact_gap(y, x_bar) if problem.has_exact_family else float("nan"))
        else:
            traj.dist_sq.append(float("nan"))
            traj.gap.append(float("nan"))

    totals = [0, 0]

    def inner(y, param, T):
        k = stage_idx[0]
        stage_idx[0] += 1
        stage_seed = derive_key(seed, 0x57A6E, k)
        if algo == "sg":
            t = sg_run(problem, y, StepSchedule.constant(param), T, stage_seed, metric=metric, record_every=0)
        elif algo.startswith("mba-"):
            t = mba_run(problem, y, ModelKind(algo.split("-", 1)[1], batch),
                        StepSchedule.constant(param), T, stage_seed, metric=metric, record_every=0)
        elif algo in ("stage-mba-i", "stage-mba-ii"):
            version = "I" if algo.endswith("-i") else "II"
            t = stagewise_mba_run(problem, y, ModelKind("linear", batch), version, param,
                                  T - 1, stage_seed, record_every=0)
        elif algo == "asg":
            t = asg_run(problem, y, T, stage_seed, batch=int(param), record_every=0)
        elif algo == "stage-asg":
            t = stagewise_asg_run(problem, y, T - 1, stage_seed, batch=int(param), record_every=0)
        else:
            raise ParameterError(f"wrapper does not support algorithm '{algo}'")
        totals[0] += t.total_samples
        totals[1] += t.total_deployments
        record_state(t.final_x, totals[0], totals[1])
        return t.final_x, t.total_samples, t.total_deployments

    record_state(x0, 0, 0)
    if cfg.driver == "geo" and wrapper == "restart-geo":
        res = geometric_decay(inner, None, x0, Delta, cfg.C, cfg.noise, cfg.delta0, cfg.psi, eps, budget=budget)
    elif cfg.driver == "minibatch" and wrapper == "restart-minibatch":
        res = minibatch_restart(inner, None, x0, Delta, cfg.C, cfg.rate, cfg.noise, eps, budget=budget)
    else:
        raise ParameterError(
            f"algorithm '{algo}' carries a '{cfg.driver}' contract; use the matching wrapper"
        )
    traj.final_x = np.asarray(res.y, dtype=np.float64)
    traj.total_samples, traj.total_deployments = totals[0], totals[1]
    traj.budget_exhausted = res.budget_exhausted
    traj.converged = not res.budget_exhausted
    traj.meta["stages"] = [(s.k, s.param, s.iters) for s in res.stages]
    return traj


# ---------------------------------------------------------------------------
# Experiment runner and CSV emission
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _traj_rows(run_id: str, traj: Trajectory):
    gap_se = 0.0 if traj.meta.get("gap_exact", True) else float("nan")
    for i in range(traj.row_count()):
        yield [
            run_id, traj.algo, traj.ts[i], traj.samples[i], traj.deployments[i],
            traj.dist_sq[i], traj.gap[i], 0.0 if not math.isnan(traj.gap[i]) else float("nan"),
            traj.etas[i],
        ]


def run_experiment(config: ExperimentConfig, out_dir) -> list:
    """Execute all (sweep point, seed) runs and write trajectory + summary CSVs.

    Returns the list of written paths.  Deterministic under a fixed config;
    the environment variable DDOPT_SEED_OFFSET shifts every seed globally.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offset = _seed_offset()
    sweep_values = config.sweep_grid if config.sweep_axis else [None]
    written = []
    summary_rows = []
    for sv in sweep_values:
        pp = dict(config.problem_params)
        ap = dict(config.algo_params)
        eps = config.eps
        if config.sweep_axis == "gamma":
            pp["gamma"] = sv
        elif config.sweep_axis == "eps":
            eps = sv
        problem = make_problem(config.problem_name, **pp)
        x_bar = None
        try:
            x_bar = equilibrium(problem).x_bar
        except (UnsupportedOperationError, NoCertificateError):
            pass
        x0 = config.x0 if config.x0 is not None else [0.0] * problem.dim
        per_seed = []
        for seed in config.seeds:
            seed_eff = seed + offset
            tag = "" if sv is None else f"-{config.sweep_axis}{sv:g}"
            run_id = f"{config.algo_name}{tag}-s{seed}"
            if config.wrapper:
                traj = run_wrapped(
                    problem, config.algo_name, config.wrapper, eps, x0, seed_eff,
                    metric=config.metric, x_bar=x_bar,
                    batch=int(ap.get("batch", 1)), algo_params=ap,
                )
            else:
                traj = run_algorithm(
                    config.algo_name, problem, x0, config.budget, seed_eff,
                    x_bar=x_bar, record_every=config.record_every,
                    metric=config.metric, **ap,
                )
            path = out / f"traj_{run_id}.csv"
            _write_csv(path, CSV_COLUMNS, _traj_rows(run_id, traj))
            written.append(path)
            per_seed.append(traj)
        summary_rows.extend(_summarize(config, sv, per_seed))
    spath = out / "summary.csv"
    _write_csv(
        spath,
        ["algo", "sweep_value", "t", "n_seeds", "samples_mean", "deployments_mean",
         "dist_sq_mean", "dist_sq_se", "gap_mean", "gap_se"],
        summary_rows,
    )
    written.append(spath)
    if config.emit_gnuplot:
        gpath = out / "plot.gp"
        gpath.write_text(_gnuplot_script(config), encoding="utf-8")
        written.append(gpath)
    return written


def _summarize(config, sweep_value, trajs):
    by_t = {}
    for traj in trajs:
        for i, t in enumerate(traj.ts):
            by_t.setdefault(t, []).append((traj.samples[i], traj.deployments[i], traj.dist_sq[i], traj.gap[i]))
    rows = []
    for t in sorted(by_t):
        entries = np.array(by_t[t], dtype=np.float64)
        n = entries.shape[0]
        d, g = entries[:, 2], entries[:, 3]
        rows.append([
            config.algo_name,
            float("nan") if sweep_value is None else sweep_value,
            t, n,
            float(entries[:, 0].mean()), float(entries[:, 1].mean()),
            float(np.nanmean(d)), float(np.nanstd(d, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
            float(np.nanmean(g)), float(np.nanstd(g, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        ])
    return rows


def _gnuplot_script(config) -> str:
    return (
        "set datafile separator ','\n"
        "set logscale y\n"
        "set xlabel 't'\n"
        "set ylabel 'mean dist_sq'\n"
        f"plot 'summary.csv' every ::1 using 3:7 with lines title '{config.algo_name}'\n"
    )


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    mode: str
    ok: bool
    t_start: int = 0
    t_end: int = 0
    n_rows: int = 0
    slope: float = float("nan")
    factor: float = float("nan")
    r2: float = float("nan")
    theory_factor: float | None = None
    pass_margin: float | None = None
    diagnostic: str = ""


def _lstsq_line(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), r2


def fit_rate(ts, values, mode: str = "linear", burn_in: float = 0.1,
             theory_factor_value: float | None = None, noise_floor: float | None = None,
             min_rows: int = 20) -> RateFit:
    """Least-squares rate fit of a metric trace.

    linear mode fits log(metric) against t and reports exp(slope) as the
    per-iteration factor; log-t-over-t fits metric * t against log t.  The
    window drops the burn-in fraction, everything at or below the noise floor
    (3x the theoretical floor when given, else the trailing-quartile median),
    and non-positive values.  Returns ok=False with a diagnostic when fewer
    than min_rows usable points remain or the metric is flat.
    """
    ts = np.asarray(ts, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if ts.size != vals.size or ts.size == 0:
        raise ParameterError("ts and values must be equal-length and non-empty")
    keep = ts >= burn_in * ts.max()
    if noise_floor is None:
        tail = vals[keep][-max(1, int(np.sum(keep) // 4)):]
        floor = float(np.nanmedian(tail))
        cut = 3.0 * floor if mode == "linear" else -math.inf
        # only truncate when the trace actually decays to a plateau
        if np.nanmax(vals[keep]) <= 10.0 * max(floor, 1e-300):
            cut = -math.inf
    else:
        cut = 3.0 * noise_floor
    keep &= np.isfinite(vals) & (vals > 0)
    if mode == "linear" and cut > -math.inf:
        below = keep & (vals <= cut)
        if below.any():
            first_cross = np.argmax(below)
            keep &= ts < ts[first_cross]
    n = int(keep.sum())
    if n < min_rows:
        return RateFit(mode, ok=False, n_rows=n, diagnostic=f"only {n} usable rows (need {min_rows})")
    x = ts[keep]
    if mode == "linear":
        y = np.log(vals[keep])
        if float(np.ptp(y)) < 1e-12:
            return RateFit(mode, ok=False, n_rows=n, diagnostic="metric constant on window")
        slope, r2 = _lstsq_line(x, y)
        factor = math.exp(slope)
        margin = None if theory_factor_value is None else factor / theory_factor_value
        return RateFit(mode, True, int(x[0]), int(x[-1]), n, slope, factor, r2,
                       theory_factor_value, margin)
    if mode == "log-t-over-t":
        pos = x > 0
        if int(pos.sum()) < min_rows:
            return RateFit(mode, ok=False, n_rows=int(pos.sum()), diagnostic="needs t > 0 rows")
        slope, r2 = _lstsq_line(np.log(x[pos]), vals[keep][pos] * x[pos])
        return RateFit(mode, True, int(x[pos][0]), int(x[pos][-1]), int(pos.sum()), slope,
                       float("nan"), r2)
    raise ParameterError(f"unknown fit mode '{mode}'")


def theory_factor(problem: DecisionProblem, algo: str, eta: float | None = None, metric: str = "distance") -> float | None:
    """Predicted per-iteration contraction factor of the distance trace
    (metric='distance') or of the averaged-iterate gap trace (metric='gap').

    Conceptual methods have exact per-step distance factors; sg and asg
    factors come from their constant-step guarantees (the distance-squared
    guarantee contracts at 1 - 2 eta alpha_hat / 3, so the distance trace
    contracts at its square root).  Returns None when no constant applies.
    """
    c = problem.constants
    gb = c.gamma * c.beta
    if algo == "rm":
        return gb / c.alpha
    if algo == "ppm":
        return (1 + gb * eta) / (1 + eta * c.alpha)
    if algo == "pgm":
        return math.sqrt(max(1 - eta * c.alpha, 0.0)) + gb * eta
    if algo == "sg":
        if metric == "distance":
            return math.sqrt(max(1 - 2 * eta * (c.alpha - gb) / 3.0, 0.0))
        return max(1 - eta * (c.alpha - 2 * gb) / 2.0, 0.0)
    if algo == "asg":
        ah = c.alpha - 2 * gb
        return 1 - math.sqrt(ah / (4 * c.L)) if ah > 0 else None
    return None


def regime_sweep(problem_factory, algo: str, gamma_grid, seeds, budget: int, **algo_params):
    """Tabulate empirical convergence against the theory boundary over a
    feedback-strength grid.

    problem_factory(gamma) must build the instance; the verdict per gamma is
    'diverges' when any run trips the guard, 'converges' when the mean
    distance-squared drops by 4x from its start, else 'indeterminate'.
    """
    rows = []
    for gamma in gamma_grid:
        if not 0.0 <= gamma < 2.0:
            raise ParameterError("gamma grid must lie in [0, 2)")
        problem = problem_factory(gamma)
        shift = problem.dmap.shift
        x_bar = None
        if problem.has_exact_family and problem.reg.kind == "zero" and abs(1 - np.linalg.norm(shift, 2)) > 1e-9:
            x_bar = np.linalg.solve(np.eye(problem.dim) - shift, problem.dmap.m0)
        trajs = [
            run_algorithm(algo, problem, [0.0] * problem.dim, budget, seed, x_bar=x_bar, **algo_params)
            for seed in seeds
        ]
        diverged = any(t.diverged for t in trajs)
        nrows = min(t.row_count() for t in trajs)  # diverged runs halt early
        d = np.array([t.dist_sq[:nrows] for t in trajs], dtype=np.float64)
        mean_d = np.nanmean(d, axis=0)
        converged = bool(mean_d[-1] <= 0.25 * max(mean_d[0], 1e-300)) and not diverged
        # noiseless traces quantize near the fixed point; cut at machine scale
        mach_floor = None
        if problem.constants.sigma_sq == 0.0 and x_bar is not None:
            mach_floor = 1e-11 * (1.0 + float(np.linalg.norm(x_bar)))
        fit = fit_rate(trajs[0].ts[:nrows], np.sqrt(mean_d), "linear", min_rows=5,
                       noise_floor=mach_floor)
        eta = algo_params.get("eta")
        th = theory_factor(problem, algo, eta=eta, metric="distance") if (eta or algo == "rm") else None
        rows.append({
            "gamma": gamma,
            "rho": problem.constants.rho,
            "converged_fraction": float(np.mean([not t.diverged and t.dist_sq[-1] <= 0.25 * max(t.dist_sq[0], 1e-300) for t in trajs])),
            "fitted_factor": fit.factor if fit.ok else float("nan"),
            "theory_factor": float("nan") if th is None else th,
            "verdict": "diverges" if diverged else ("converges" if converged else "indeterminate"),
        })
    return rows
