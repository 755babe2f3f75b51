"""Losses, decision-indexed distribution maps with certified Lipschitz
constants, and the benchmark problem instances.

The Gaussian-location + quadratic family is the exact backbone: its mean map,
static minimizers, and objective gaps all have closed forms, so contraction
factors and sensitivity bounds can be checked to floating-point accuracy.
The strategic-response family supplies a realistic instance (agents shift
their features by the best response to a linear utility with quadratic cost)
where only Monte-Carlo verification is possible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ParameterError,
    Regularizer,
    UnsupportedOperationError,
    ZeroReg,
    BallReg,
    as_point,
    counter_integers,
    counter_normals,
    counter_uniforms,
    derive_key,
    make_regularizer,
    w1_empirical_1d,
)

__all__ = [
    "QuadraticLoss",
    "LogisticRidgeLoss",
    "GaussianLocationMap",
    "StrategicResponseMap",
    "static_map",
    "ProblemConstants",
    "ModelConstants",
    "DecisionProblem",
    "quad1d",
    "quad_nd",
    "strategic_logistic",
    "strategic_from_csv",
    "make_problem",
    "certify_lipschitz",
    "deviation_check",
    "LipschitzReport",
    "DeviationReport",
]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class QuadraticLoss:
    """l(x, z) = (1/2) (x - z)' W (x - z) with diagonal weights W.

    With unit weights (the default) alpha = L = beta = 1 exactly.  Anisotropic
    weights give condition number max(w)/min(w) while keeping every formula
    closed form; the map z -> grad l(x, z) is max(w)-Lipschitz.
    """

    kind = "quadratic"
    lower_bound = 0.0

    def __init__(self, weights=None):
        if weights is None:
            self.weights = None
            self.alpha = self.L = self.beta = 1.0
        else:
            w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
            if np.any(w <= 0):
                raise ParameterError("quadratic weights must be positive")
            self.weights = w
            self.alpha = float(w.min())
            self.L = float(w.max())
            self.beta = float(w.max())

    def _w(self, d: int):
        # scalar 1.0 broadcasts everywhere and skips an allocation per call
        return 1.0 if self.weights is None else self.weights

    def values(self, x, Z) -> np.ndarray:
        diff = x - Z
        return 0.5 * np.sum(self._w(diff.shape[-1]) * diff * diff, axis=-1)

    def grads(self, x, Z) -> np.ndarray:
        return self._w(np.shape(Z)[-1]) * (x - Z)

    def value_grad(self, x, z):
        x = as_point(x)
        z = as_point(z, dim=x.size)
        return float(self.values(x, z[None])[0]), self.grads(x, z[None])[0]


class LogisticRidgeLoss:
    """l(x, (a, b)) = log(1 + exp(-b <a, x>)) + (lam/2) ||x||^2, b in {-1, +1}.

    The ridge term gives strong convexity alpha = lam and the gradient is
    (lam + R^2/4)-Lipschitz in x for feature norms bounded by R.  The sample
    Lipschitz constant beta is not certifiable without bounding the decision
    vector; it is user-declared, defaulting to the heuristic
    1 + R * x_bound / 4 (sigmoid slope at most 1, derivative at most 1/4,
    cross term R * ||x|| / 4).
    """

    kind = "logistic-ridge"
    lower_bound = 0.0

    def __init__(self, lam: float, feature_bound: float, x_bound: float = 1.0, beta: float | None = None):
        if lam < 0:
            raise ParameterError("logistic-ridge requires lam >= 0")
        self.lam = float(lam)
        self.feature_bound = float(feature_bound)
        self.alpha = self.lam
        self.L = self.lam + self.feature_bound**2 / 4.0
        self.beta = float(beta) if beta is not None else 1.0 + self.feature_bound * x_bound / 4.0

    def values(self, x, Z) -> np.ndarray:
        A, b = Z[..., :-1], Z[..., -1]
        margins = -b * (A @ x)
        return np.logaddexp(0.0, margins) + 0.5 * self.lam * float(x @ x)

    def grads(self, x, Z) -> np.ndarray:
        A, b = Z[..., :-1], Z[..., -1]
        margins = -b * (A @ x)
        s = 0.5 * (1.0 + np.tanh(0.5 * margins))  # sigmoid, overflow-safe
        return (-b * s)[..., None] * A + self.lam * x

    def value_grad(self, x, z):
        x = as_point(x)
        z = np.asarray(z, dtype=np.float64)
        return float(self.values(x, z[None])[0]), self.grads(x, z[None])[0]


# ---------------------------------------------------------------------------
# Distribution maps
# ---------------------------------------------------------------------------


class GaussianLocationMap:
    """D(x) = N(m0 + S x, Sigma).  Certified Lipschitz constant ||S||_2.

    Sampling at x and y with the same seed uses identical base noise, so the
    draws differ by exactly S (x - y).  A zero shift is the static map.
    """

    def __init__(self, m0, shift=0.0, cov=0.0, gamma: float | None = None):
        self.m0 = as_point(m0)
        d = self.m0.size
        S = np.asarray(shift, dtype=np.float64)
        self.shift = np.eye(d) * float(S) if S.ndim == 0 else S.reshape(d, -1)
        C = np.asarray(cov, dtype=np.float64)
        self.cov = np.eye(d) * float(C) if C.ndim == 0 else C.reshape(d, d)
        if np.any(np.diag(self.cov) < 0):
            raise ParameterError("covariance diagonal must be nonnegative")
        self._chol = None if not self.cov.any() else np.linalg.cholesky(self.cov)
        self.gamma = float(gamma) if gamma is not None else float(np.linalg.norm(self.shift, 2))

    @property
    def kind(self) -> str:
        return "static" if not self.shift.any() else "gaussian-location"

    @property
    def zdim(self) -> int:
        return self.m0.size

    @property
    def xdim(self) -> int:
        return self.shift.shape[1]

    def mean(self, x) -> np.ndarray:
        # rowwise for stacked x of shape (..., xdim)
        return self.m0 + np.asarray(x, dtype=np.float64) @ self.shift.T

    def sample(self, x, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ParameterError("sample count must be >= 1")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.xdim,):
            x = as_point(x, dim=self.xdim)
        mean = self.m0 + x @ self.shift.T
        if self._chol is None:
            return np.tile(mean, (n, 1))
        xi = counter_normals(derive_key(seed), n * self.zdim).reshape(n, self.zdim)
        return mean + xi @ self._chol.T

    def sample_stack(self, X, n: int, seeds) -> np.ndarray:
        """Draws for a stack of points, one independent stream per row.

        Row j is bitwise identical to sample(X[j], n, seeds[j]).
        """
        X = np.asarray(X, dtype=np.float64)
        means = self.mean(X)[:, None, :]
        if self._chol is None:
            return np.broadcast_to(means, (X.shape[0], n, self.zdim)).copy()
        keys = derive_key(np.asarray(seeds))
        xi = counter_normals(keys, n * self.zdim).reshape(X.shape[0], n, self.zdim)
        return means + xi @ self._chol.T


class StrategicResponseMap:
    """Finite population of (features, label) pairs reacting to the decision.

    Every sampled agent plays the best response to the linear utility
    u(x, a') = <x, a'> against the quadratic cost ||a - a'||^2 / (2 c), which
    is a' = a + c x.  The whole population translates by c (x - y) between
    decisions x and y, so the map is c-Lipschitz in Wasserstein-1.
    """

    kind = "strategic-response"

    def __init__(self, features, labels, cost_scale: float, gamma: float | None = None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ParameterError("features must be (n, d) with matching labels (n,)")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ParameterError("labels must be -1 or +1")
        if cost_scale < 0:
            raise ParameterError("cost scale must be nonnegative")
        self.cost_scale = float(cost_scale)
        self.gamma = float(gamma) if gamma is not None else self.cost_scale

    @property
    def zdim(self) -> int:
        return self.features.shape[1] + 1

    @property
    def xdim(self) -> int:
        return self.features.shape[1]

    def best_response(self, x) -> np.ndarray:
        return self.features + self.cost_scale * as_point(x, dim=self.xdim)

    def mean(self, x):
        raise UnsupportedOperationError(
            "strategic-response map has no analytic mean map; conceptual "
            "algorithms need the gaussian-location family"
        )

    def sample(self, x, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ParameterError("sample count must be >= 1")
        x = as_point(x, dim=self.xdim)
        idx = counter_integers(derive_key(seed), n, self.features.shape[0])
        moved = self.features[idx] + self.cost_scale * x
        return np.hstack([moved, self.labels[idx][:, None]])


def static_map(mean, cov=0.0) -> GaussianLocationMap:
    """Fixed measure, gamma = 0: a gaussian-location map with zero shift."""
    return GaussianLocationMap(mean, shift=0.0, cov=cov)


# ---------------------------------------------------------------------------
# Problem bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConstants:
    """Strong-convexity split (alpha1, alpha2) and per-draw variance of a
    stochastic model: full/prox-point (alpha + mu, 0), linear/gradient
    (mu, alpha), clipped (mu, 0); batching divides the variance."""

    alpha1: float
    alpha2: float
    sigma0_sq: float


@dataclass(frozen=True)
class ProblemConstants:
    alpha: float
    beta: float
    gamma: float
    L: float
    sigma_sq: float
    mu: float

    @property
    def rho(self) -> float:
        return self.gamma * self.beta / self.alpha

    @property
    def kappa(self) -> float:
        return self.L / self.alpha

    def model_constants(self, selector: str, batch: int = 1) -> ModelConstants:
        if batch < 1:
            raise ParameterError("batch size must be >= 1")
        table = {
            "full": (self.alpha + self.mu, 0.0),
            "linear": (self.mu, self.alpha),
            "clipped": (self.mu, 0.0),
        }
        if selector not in table:
            raise ParameterError(f"unknown model selector '{selector}'")
        a1, a2 = table[selector]
        return ModelConstants(a1, a2, self.sigma_sq / batch)


class DecisionProblem:
    """Loss + regularizer + distribution map + certified constants.

    The single object every algorithm consumes.  ``constants`` is always
    recomputed from the primitives at build time (gamma from the map,
    alpha/beta/L from the loss, mu from the regularizer), never stored stale.
    """

    def __init__(self, loss, reg: Regularizer, dmap, constants: ProblemConstants, name: str = ""):
        self.loss = loss
        self.reg = reg
        self.dmap = dmap
        self.constants = constants
        self.dim = dmap.xdim
        self.name = name or f"{loss.kind}+{dmap.kind}"

    @classmethod
    def build(cls, loss, reg, dmap, sigma_sq: float | None = None, seed: int = 0, name: str = "") -> "DecisionProblem":
        if sigma_sq is None:
            sigma_sq = _default_sigma_sq(loss, dmap, seed)
        constants = ProblemConstants(
            alpha=loss.alpha,
            beta=loss.beta,
            gamma=dmap.gamma,
            L=loss.L,
            sigma_sq=float(sigma_sq),
            mu=reg.mu,
        )
        return cls(loss, reg, dmap, constants, name=name)

    # -- exact machinery for the gaussian + quadratic family ----------------

    @property
    def has_exact_family(self) -> bool:
        return isinstance(self.loss, QuadraticLoss) and isinstance(self.dmap, GaussianLocationMap)

    def _require_exact(self):
        if not self.has_exact_family:
            raise UnsupportedOperationError(
                f"operation needs the gaussian-location + quadratic family, got {self.name}"
            )

    def _loss_weights(self) -> np.ndarray:
        return self.loss._w(self.dim)

    def exact_minimizer(self, mean) -> np.ndarray:
        """argmin_y f(y) + r(y) where f(y) = E (1/2)(y - z)' W (y - z), z ~ N(mean, .)."""
        self._require_exact()
        return _weighted_argmin(self._loss_weights(), as_point(mean, dim=self.dim), self.reg)

    def exact_prox_solve(self, mean, x, eta: float) -> np.ndarray:
        """argmin_y f(y) + r(y) + ||y - x||^2 / (2 eta) for the same f."""
        self._require_exact()
        if not eta > 0:
            raise ParameterError("eta must be positive")
        w = self._loss_weights()
        x = as_point(x, dim=self.dim)
        mean = as_point(mean, dim=self.dim)
        a = w + 1.0 / eta
        c = (w * mean + x / eta) / a
        return _weighted_argmin(a, c, self.reg)

    def exact_mean_grad(self, at, of) -> np.ndarray:
        """grad of f_{at} evaluated at ``of``: W (of - mean(at)); stacked rows ok."""
        self._require_exact()
        return self._loss_weights() * (np.asarray(of, dtype=np.float64) - self.dmap.mean(at))

    def exact_gap(self, x, x_bar):
        """phi(x) - phi(x_bar) in closed form, phi = f_{x_bar} + r.

        Accepts stacked x of shape (..., d); returns matching shape.
        """
        self._require_exact()
        w = self._loss_weights()
        x = np.asarray(x, dtype=np.float64)
        x_bar = as_point(x_bar, dim=self.dim)
        m = self.dmap.mean(x_bar)
        fx = 0.5 * np.sum(w * (x - m) ** 2, axis=-1)
        fbar = 0.5 * float(np.sum(w * (x_bar - m) ** 2))
        if x.ndim == 1:
            return float(fx - fbar + self.reg.value(x) - self.reg.value(x_bar))
        rx = np.array([self.reg.value(row) for row in x.reshape(-1, self.dim)]).reshape(x.shape[:-1])
        return fx - fbar + rx - self.reg.value(x_bar)


def _weighted_argmin(a: np.ndarray, c: np.ndarray, reg: Regularizer) -> np.ndarray:
    """argmin_y (1/2) sum_i a_i (y_i - c_i)^2 + r(y), closed form per kind."""
    kind = reg.kind
    if kind == "zero":
        return c.copy()
    if kind == "sqnorm":
        return a * c / (a + reg.mu)
    if kind == "l1":
        thr = reg.lam / a
        return np.sign(c) * np.maximum(np.abs(c) - thr, 0.0)
    if kind == "box":
        return np.clip(c, reg.lo, reg.hi)
    if kind == "ball":
        if np.ptp(a) > 1e-12 * np.max(a):
            raise UnsupportedOperationError(
                "ball constraint with anisotropic quadratic loss has no closed form"
            )
        return reg.prox(1.0, c)
    raise UnsupportedOperationError(f"no closed-form static solver for regularizer '{kind}'")


def _default_sigma_sq(loss, dmap, seed: int, n: int = 10_000) -> float:
    # analytic trace for the gaussian + quadratic family, Monte Carlo otherwise
    if isinstance(loss, QuadraticLoss) and isinstance(dmap, GaussianLocationMap):
        w = loss._w(dmap.zdim)
        return float(np.sum(w**2 * np.diag(dmap.cov)))
    x0 = np.zeros(dmap.xdim)
    Z = dmap.sample(x0, n, seed=derive_key(seed, 0x51E))
    G = loss.grads(x0, Z)
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Canonical instances
# ---------------------------------------------------------------------------


def quad1d(gamma: float, sigma: float = 0.0, m0: float = 1.0, reg: Regularizer | None = None) -> DecisionProblem:
    """Scalar gaussian-location quadratic: D(x) = N(m0 + gamma x, sigma^2)."""
    dmap = GaussianLocationMap([m0], shift=gamma, cov=sigma**2)
    return DecisionProblem.build(QuadraticLoss(), reg or ZeroReg(), dmap, name=f"quad1d(g={gamma})")


def quad_nd(
    d: int,
    gamma: float,
    kappa: float = 1.0,
    sigma: float = 0.0,
    m0=None,
    reg: Regularizer | None = None,
) -> DecisionProblem:
    """Diagonal quadratic with condition number kappa on a gamma-shift map.

    Loss weights run geometrically from 1 to kappa; the covariance is scaled
    so the gradient noise satisfies E||grad - mean||^2 = sigma^2 exactly.
    """
    if d < 1 or kappa < 1:
        raise ParameterError("need d >= 1 and kappa >= 1")
    w = np.geomspace(1.0, float(kappa), d)
    mean0 = np.ones(d) if m0 is None else as_point(m0, dim=d)
    cov = sigma**2 / float(np.sum(w**2)) if sigma else 0.0
    dmap = GaussianLocationMap(mean0, shift=gamma, cov=cov)
    return DecisionProblem.build(
        QuadraticLoss(w), reg or ZeroReg(), dmap, name=f"quadNd(d={d},k={kappa},g={gamma})"
    )


def strategic_logistic(
    n_agents: int,
    gamma_u: float,
    lam: float,
    d: int = 2,
    seed: int = 7,
    feature_bound: float = 2.0,
    x_bound: float = 1.0,
) -> DecisionProblem:
    """Synthetic strategic classification instance.

    A base population of feature-label pairs is generated once from the seed;
    agents respond to a deployed linear classifier by shifting features
    gamma_u * x.  Labels come from a fixed linear rule with noise.
    """
    key = derive_key(seed, 0xA9E17)
    u = counter_normals(key, n_agents * d).reshape(n_agents, d)
    feats = u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    radii = 0.25 + 0.75 * counter_uniforms(derive_key(seed, 0xA9E18), n_agents)
    feats *= feature_bound * radii[:, None]
    w_true = np.ones(d) / math.sqrt(d)
    noise = 0.3 * counter_normals(derive_key(seed, 0xA9E19), n_agents)
    labels = np.where(feats @ w_true + noise >= 0.0, 1.0, -1.0)
    dmap = StrategicResponseMap(feats, labels, cost_scale=gamma_u)
    loss = LogisticRidgeLoss(lam=lam, feature_bound=feature_bound, x_bound=x_bound)
    return DecisionProblem.build(loss, ZeroReg(), dmap, seed=seed, name=f"strategic-logistic(n={n_agents})")


def strategic_from_csv(path, gamma_u: float, lam: float, feature_bound: float | None = None, x_bound: float = 1.0) -> DecisionProblem:
    """Load a strategic base population from CSV with columns a_1..a_d, b."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParameterError(f"empty population file {path}")
    d = sum(1 for k in rows[0] if k.startswith("a_"))
    feats = np.array([[float(r[f"a_{j + 1}"]) for j in range(d)] for r in rows])
    labels = np.array([float(r["b"]) for r in rows])
    fb = feature_bound if feature_bound is not None else float(np.max(np.linalg.norm(feats, axis=1)))
    dmap = StrategicResponseMap(feats, labels, cost_scale=gamma_u)
    loss = LogisticRidgeLoss(lam=lam, feature_bound=fb, x_bound=x_bound)
    return DecisionProblem.build(loss, ZeroReg(), dmap, name=f"strategic-csv({len(rows)})")


def make_problem(name: str, **params) -> DecisionProblem:
    """Instance registry used by the experiment harness configs."""
    name = name.lower()
    if "lambda" in params:  # config-friendly alias (python keyword)
        params["lam"] = params.pop("lambda")
    reg = None
    if "reg" in params:
        spec = dict(params.pop("reg"))
        reg = make_regularizer(spec.pop("kind"), **spec)
    elif "ball_radius" in params:
        reg = BallReg(params.pop("ball_radius"))
    if name == "quad1d":
        return quad1d(reg=reg, **params)
    if name in ("quadnd", "quad_nd"):
        return quad_nd(reg=reg, **params)
    if name == "strategic-logistic":
        if reg is not None:
            raise ParameterError("strategic-logistic instances are unregularized beyond the ridge")
        return strategic_logistic(**params)
    if name == "strategic-csv":
        return strategic_from_csv(**params)
    raise ParameterError(f"unknown problem '{name}'")


# ---------------------------------------------------------------------------
# Empirical certification harnesses
# ---------------------------------------------------------------------------


@dataclass
class LipschitzReport:
    declared_gamma: float
    max_ratio: float
    slack: float
    passed: bool
    trials: int


def certify_lipschitz(dmap, trials: int, seed: int, n_samples: int = 400, scale: float = 2.0, slack: float = 0.05) -> LipschitzReport:
    """Falsification harness for the declared Wasserstein Lipschitz constant.

    Samples random decision pairs with common random numbers and measures the
    largest projected empirical-W1 to distance ratio over all coordinates of
    the sample space.  Projections are 1-Lipschitz so this lower-bounds the
    true W1 ratio: a failure is conclusive, a pass is evidence.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    max_ratio = 0.0
    for t in range(trials):
        kx = derive_key(seed, t, 0)
        x = scale * counter_normals(derive_key(seed, t, 1), dmap.xdim)
        y = scale * counter_normals(derive_key(seed, t, 2), dmap.xdim)
        dist = float(np.linalg.norm(x - y))
        if dist < 1e-9:
            continue
        Zx = dmap.sample(x, n_samples, seed=kx)
        Zy = dmap.sample(y, n_samples, seed=kx)
        for j in range(Zx.shape[1]):
            w1 = w1_empirical_1d(np.sort(Zx[:, j]), np.sort(Zy[:, j]))
            max_ratio = max(max_ratio, w1 / dist)
    passed = max_ratio <= dmap.gamma * (1.0 + slack) + 1e-12
    return LipschitzReport(dmap.gamma, max_ratio, slack, passed, trials)


@dataclass
class DeviationReport:
    grad_dev_max: float
    grad_dev_se: float
    grad_bound: float
    gap_dev_max: float
    gap_dev_se: float
    gap_bound_factor: float  # bound is gap_bound_factor * ||u - v|| per pair
    passed: bool


def deviation_check(problem: DecisionProblem, x, y, n: int, seed: int, grid_size: int = 10) -> DeviationReport:
    """Monte-Carlo check of the two sensitivity bounds between D(x) and D(y).

    Estimates sup_w ||grad f_x(w) - grad f_y(w)|| over a random grid against
    gamma * beta * ||x - y||, and the function-gap deviation for grid pairs
    (u, v) against gamma * beta * ||x - y|| * ||u - v||, using common random
    numbers.  Passes when every estimate is below its bound plus three
    standard errors (plus a 1e-12 relative slack: on the exact family the
    estimates can equal the bounds to the last ulp).
    """
    x = as_point(x, dim=problem.dim)
    y = as_point(y, dim=problem.dim)
    c = problem.constants
    bound = c.gamma * c.beta * float(np.linalg.norm(x - y))
    scale = 1.0 + max(np.linalg.norm(x), np.linalg.norm(y))
    grid = [
        scale * counter_normals(derive_key(seed, 0xBEEF, i), problem.dim)
        for i in range(grid_size)
    ]

    grad_max, grad_se_at_max = 0.0, 0.0
    passed = True
    gap_max, gap_se_at_max = 0.0, 0.0
    for i, w in enumerate(grid):
        kz = derive_key(seed, 0xCAFE, i)
        Zx = problem.dmap.sample(x, n, seed=kz)
        Zy = problem.dmap.sample(y, n, seed=kz)
        diffs = problem.loss.grads(w, Zx) - problem.loss.grads(w, Zy)
        est = float(np.linalg.norm(diffs.mean(axis=0)))
        se = math.sqrt(float(np.sum(diffs.var(axis=0))) / n)
        if est > grad_max:
            grad_max, grad_se_at_max = est, se
        passed &= est <= bound + 3.0 * se + 1e-12 * max(1.0, bound)

    for (iu, iv) in [(i, (i + 1) % grid_size) for i in range(0, grid_size - 1, 2)]:
        u, v = grid[iu], grid[iv]
        kz = derive_key(seed, 0xD00D, iu)
        Zx = problem.dmap.sample(x, n, seed=kz)
        Zy = problem.dmap.sample(y, n, seed=kz)
        per = (problem.loss.values(u, Zx) - problem.loss.values(v, Zx)) - (
            problem.loss.values(u, Zy) - problem.loss.values(v, Zy)
        )
        est = abs(float(per.mean()))
        se = float(per.std(ddof=1)) / math.sqrt(n)
        pair_bound = bound * float(np.linalg.norm(u - v))
        if est > gap_max:
            gap_max, gap_se_at_max = est, se
        passed &= est <= pair_bound + 3.0 * se + 1e-12 * max(1.0, pair_bound)

    return DeviationReport(grad_max, grad_se_at_max, bound, gap_max, gap_se_at_max, bound, bool(passed))
