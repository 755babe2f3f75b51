"""Equilibrium certificates and the metrics measured against them.

An equilibrium is a decision vector that solves the static problem induced by
its own distribution, i.e. a fixed point of the map
S(x) = argmin_y { E_{z ~ D(x)} l(y, z) + r(y) }.  Every convergence claim in
the experiment harness is a statement about distance or objective gap to this
point, so the certificates here are the measurement backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NoCertificateError, as_point, derive_key
from .problems import DecisionProblem

__all__ = [
    "EquilibriumCertificate",
    "closed_form_equilibrium",
    "fixed_point_equilibrium",
    "equilibrium",
    "gap_estimate",
]


@dataclass(frozen=True)
class EquilibriumCertificate:
    x_bar: np.ndarray
    residual: float       # ||x_bar - S(x_bar)||
    method: str           # "closed-form" or "fixed-point"
    iterations: int


def _rm_map(problem: DecisionProblem, x) -> np.ndarray:
    return problem.exact_minimizer(problem.dmap.mean(x))


def closed_form_equilibrium(problem: DecisionProblem, tol: float = 1e-12) -> EquilibriumCertificate:
    """Exact equilibrium of a gaussian-location + quadratic instance.

    Without a regularizer the fixed point solves (I - S) x = m0 directly;
    with one, the prox-composed map is iterated to a 1e-12 step (it is a
    contraction with factor at most gamma when the shift norm is below one).
    Raises NoCertificateError when ||shift|| >= 1, where uniqueness fails.
    """
    problem._require_exact()
    shift = problem.dmap.shift
    shift_norm = float(np.linalg.norm(shift, 2))
    if shift_norm >= 1.0:
        raise NoCertificateError(
            f"shift operator norm {shift_norm:.4g} >= 1: no contraction, equilibrium not certified"
        )
    if problem.reg.kind == "zero":
        x_bar = np.linalg.solve(np.eye(problem.dim) - shift, problem.dmap.m0)
        iterations = 0
    else:
        x_bar = problem.dmap.m0.copy()
        iterations = 0
        for iterations in range(1, 200_000):
            nxt = _rm_map(problem, x_bar)
            step = float(np.linalg.norm(nxt - x_bar))
            x_bar = nxt
            if step <= tol:
                break
        else:
            raise NoCertificateError("fixed-point refinement did not reach 1e-12")
    residual = float(np.linalg.norm(x_bar - _rm_map(problem, x_bar)))
    if residual > 1e-10:
        raise NoCertificateError(f"closed-form residual {residual:.3g} exceeds 1e-10")
    return EquilibriumCertificate(x_bar, residual, "closed-form", iterations)


def fixed_point_equilibrium(problem: DecisionProblem, x0, tol: float = 1e-9, max_iter: int = 100_000) -> EquilibriumCertificate:
    """Iterate repeated minimization until the contraction a-posteriori bound
    certifies ||x - x_bar|| <= tol.

    The map is a rho-contraction (rho = gamma beta / alpha), so a step of size
    s certifies distance s / (1 - rho); the loop stops once s <= tol (1 - rho).
    Divergence or an exhausted budget raises NoCertificateError carrying the
    best residual seen.
    """
    rho = problem.constants.rho
    x = as_point(x0, dim=problem.dim)
    best = math.inf
    for it in range(1, max_iter + 1):
        nxt = _rm_map(problem, x)
        step = float(np.linalg.norm(nxt - x))
        x = nxt
        best = min(best, step)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e8:
            raise NoCertificateError(f"repeated minimization diverged (rho={rho:.3g})")
        if rho < 1.0 and step <= tol * (1.0 - rho):
            residual = float(np.linalg.norm(x - _rm_map(problem, x)))
            return EquilibriumCertificate(x, residual, "fixed-point", it)
    raise NoCertificateError(
        f"no certificate after {max_iter} iterations (best step {best:.3g}, rho={rho:.3g})"
    )


def equilibrium(problem: DecisionProblem) -> EquilibriumCertificate:
    """Closed form first, fixed-point iteration as a fallback refinement."""
    try:
        return closed_form_equilibrium(problem)
    except NoCertificateError:
        return fixed_point_equilibrium(problem, np.zeros(problem.dim), tol=1e-10)


def gap_estimate(problem: DecisionProblem, cert: EquilibriumCertificate, x, n: int = 4000, seed: int = 0):
    """Objective gap phi(x) - phi(x_bar) with phi = f_{x_bar} + r.

    Returns (estimate, standard error).  The gaussian + quadratic family is
    evaluated in closed form (zero error); other instances use Monte Carlo at
    the equilibrium distribution with common random numbers, which cancels
    the shared noise between the two loss evaluations.
    """
    x = as_point(x, dim=problem.dim)
    if problem.has_exact_family:
        return problem.exact_gap(x, cert.x_bar), 0.0
    Z = problem.dmap.sample(cert.x_bar, n, seed=derive_key(seed, 0x6A9))
    per = problem.loss.values(x, Z) - problem.loss.values(cert.x_bar, Z)
    est = float(per.mean()) + problem.reg.value(x) - problem.reg.value(cert.x_bar)
    se = float(per.std(ddof=1)) / math.sqrt(n)
    return est, se
