"""Shared numeric foundations: proximal operators, 1-d Wasserstein-1 distance,
weight-product identities, averaging state, and the counter-based random
number generator used for reproducible sampling.

All arithmetic is 64-bit. Every random draw in the package is a pure function
of an integer key, so trajectories are bit-reproducible and common-random-number
coupling across evaluation points is free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParameterError",
    "UnsupportedOperationError",
    "NoCertificateError",
    "derive_key",
    "counter_normal",
    "counter_normals",
    "counter_uniforms",
    "counter_integers",
    "as_point",
    "Regularizer",
    "ZeroReg",
    "SquaredNormReg",
    "L1Reg",
    "BoxReg",
    "BallReg",
    "make_regularizer",
    "prox",
    "prox_optimality_residual",
    "w1_empirical_1d",
    "gamma_products",
    "ScheduleState",
    "averaging_update",
]


class ParameterError(ValueError):
    """An argument violates a documented precondition."""


class UnsupportedOperationError(RuntimeError):
    """The operation is not available for this problem family."""


class NoCertificateError(RuntimeError):
    """An equilibrium certificate could not be produced."""


# ---------------------------------------------------------------------------
# Counter-based pseudo-randomness (splitmix64 mixing)
# ---------------------------------------------------------------------------
#
# Draw i under key k reads counters (k + 2i, k + 2i + 1), mixes each through
# splitmix64, and maps the pair to one standard normal via Box-Muller.  The
# scalar and vectorized paths produce bitwise-identical doubles.

_MASK = (1 << 64) - 1
_C1 = 0x9E3779B97F4A7C15
_C2 = 0xBF58476D1CE4E5B9
_C3 = 0x94D049BB133111EB
_TWO53 = 2.0**-53
_TWO54 = 2.0**-54


def _mix64(x: int) -> int:
    x = (x + _C1) & _MASK
    x = ((x ^ (x >> 30)) * _C2) & _MASK
    x = ((x ^ (x >> 27)) * _C3) & _MASK
    return x ^ (x >> 31)


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps silently, matching the scalar masking
    x = x + np.uint64(_C1)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_C2)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_C3)
    return x ^ (x >> np.uint64(31))


def derive_key(*parts):
    """Hash integer parts (seed, iteration, ...) into a 64-bit stream key.

    Any part may be an integer array, in which case the result is a uint64
    array of keys, bitwise consistent with the scalar path.
    """
    for p in parts:
        if isinstance(p, np.ndarray):
            k = np.uint64(0x8C9F4E1A2B3D5C77)
            for q in parts:
                k = _mix64_vec(k + np.asarray(q).astype(np.uint64))
            return k
    k = 0x8C9F4E1A2B3D5C77
    for p in parts:
        k = _mix64((k + int(p)) & _MASK)
    return k


def counter_normal(key: int, i: int) -> float:
    """Standard normal draw number ``i`` of the stream ``key`` (scalar path)."""
    u1 = (_mix64((key + 2 * i) & _MASK) >> 11) * _TWO53 + _TWO54
    u2 = (_mix64((key + 2 * i + 1) & _MASK) >> 11) * _TWO53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def counter_normals(key, n: int) -> np.ndarray:
    """Standard normals, vectorized.

    ``key`` may be a python int (returns shape ``(n,)``) or a uint64 array of
    stream keys (returns shape ``key.shape + (n,)``, one stream per key).
    The scalar small-n path produces bitwise-identical doubles.
    """
    if not isinstance(key, np.ndarray):
        key = int(key)
        if n <= 4:  # hot single-draw path in greedy loops
            return np.array([counter_normal(key, i) for i in range(n)])
        base = np.uint64(key & _MASK) + np.arange(2 * n, dtype=np.uint64)
    else:
        base = np.asarray(key, dtype=np.uint64)[..., None] + np.arange(2 * n, dtype=np.uint64)
    m = _mix64_vec(base)
    u = (m >> np.uint64(11)).astype(np.float64) * _TWO53
    u1 = u[..., 0::2] + _TWO54
    u2 = u[..., 1::2]
    out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return out if isinstance(key, np.ndarray) else out.reshape(n)


def counter_uniforms(key: int, n: int) -> np.ndarray:
    """n uniforms in [0, 1) from stream ``key`` (counters offset by 2n avoid
    colliding with the normal counters of the same key only if callers use
    distinct keys per purpose, which they do)."""
    base = np.uint64(int(key) & _MASK) + np.arange(n, dtype=np.uint64)
    m = _mix64_vec(base)
    return (m >> np.uint64(11)).astype(np.float64) * _TWO53


def counter_integers(key: int, n: int, hi: int) -> np.ndarray:
    """n integers uniform on {0, ..., hi-1}."""
    if hi < 1:
        raise ParameterError("hi must be >= 1")
    idx = np.floor(counter_uniforms(key, n) * hi).astype(np.int64)
    return np.minimum(idx, hi - 1)


# ---------------------------------------------------------------------------
# Points
# ---------------------------------------------------------------------------


def as_point(x, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 vector; scalars become 1-vectors."""
    p = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if p.ndim != 1:
        raise ParameterError(f"point must be a vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ParameterError("point has non-finite entries")
    if dim is not None and p.size != dim:
        raise ParameterError(f"point has dimension {p.size}, expected {dim}")
    return p


# ---------------------------------------------------------------------------
# Regularizers and proximal operators
# ---------------------------------------------------------------------------


class Regularizer:
    """Convex, closed regularizer with a closed-form proximal map.

    ``prox`` accepts arrays of shape (..., d) and operates on the last axis,
    so stacked iterates (one row per seed) go through a single call.
    """

    kind = "abstract"
    mu = 0.0          # strong convexity modulus
    bounded = False   # domain bounded (needed by dual averaging)

    def value(self, x) -> float:
        raise NotImplementedError

    def prox(self, eta: float, x):
        raise NotImplementedError

    def diameter(self) -> float:
        raise UnsupportedOperationError(f"{self.kind} regularizer has unbounded domain")

    def _check_eta(self, eta: float) -> float:
        if not eta > 0:
            raise ParameterError(f"prox step eta must be positive, got {eta}")
        return float(eta)


class ZeroReg(Regularizer):
    kind = "zero"

    def value(self, x) -> float:
        return 0.0

    def prox(self, eta, x):
        self._check_eta(eta)
        return np.asarray(x, dtype=np.float64).copy()


class SquaredNormReg(Regularizer):
    """r(x) = (mu/2) ||x||^2."""

    kind = "sqnorm"

    def __init__(self, mu: float):
        if not mu > 0:
            raise ParameterError("sqnorm modulus mu must be positive")
        self.mu = float(mu)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * self.mu * float(np.dot(x, x))

    def prox(self, eta, x):
        eta = self._check_eta(eta)
        return np.asarray(x, dtype=np.float64) / (1.0 + eta * self.mu)


class L1Reg(Regularizer):
    """r(x) = lam * ||x||_1, prox is the soft threshold."""

    kind = "l1"

    def __init__(self, lam: float):
        if not lam > 0:
            raise ParameterError("l1 weight lam must be positive")
        self.lam = float(lam)

    def value(self, x) -> float:
        return self.lam * float(np.sum(np.abs(x)))

    def prox(self, eta, x):
        eta = self._check_eta(eta)
        x = np.asarray(x, dtype=np.float64)
        return np.sign(x) * np.maximum(np.abs(x) - eta * self.lam, 0.0)


class BoxReg(Regularizer):
    """Indicator of the box [lo, hi]^d (lo, hi scalars or vectors)."""

    kind = "box"
    bounded = True

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if np.any(self.lo >= self.hi):
            raise ParameterError("box requires lo < hi componentwise")

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        inside = np.all(x >= self.lo - 1e-12) and np.all(x <= self.hi + 1e-12)
        return 0.0 if inside else float("inf")

    def prox(self, eta, x):
        self._check_eta(eta)
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)

    def diameter(self) -> float:
        span = self.hi - self.lo
        return float(np.linalg.norm(span))


class BallReg(Regularizer):
    """Indicator of the Euclidean ball of given radius centered at the origin."""

    kind = "ball"
    bounded = True

    def __init__(self, radius: float):
        if not radius > 0:
            raise ParameterError("ball radius must be positive")
        self.radius = float(radius)

    def value(self, x) -> float:
        return 0.0 if np.linalg.norm(x) <= self.radius + 1e-12 else float("inf")

    def prox(self, eta, x):
        self._check_eta(eta)
        x = np.asarray(x, dtype=np.float64)
        nrm = np.linalg.norm(x, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
        return x * scale

    def diameter(self) -> float:
        return 2.0 * self.radius


def make_regularizer(kind: str, **params) -> Regularizer:
    """Build a regularizer by name: zero, sqnorm(mu), l1(lam), box(lo, hi), ball(radius)."""
    kind = kind.lower()
    if kind == "zero":
        return ZeroReg()
    if kind == "sqnorm":
        return SquaredNormReg(params["mu"])
    if kind == "l1":
        return L1Reg(params["lam"])
    if kind == "box":
        return BoxReg(params["lo"], params["hi"])
    if kind == "ball":
        return BallReg(params["radius"])
    raise ParameterError(f"unknown regularizer kind '{kind}'")


def prox(reg: Regularizer, eta: float, x):
    """Proximal map argmin_y r(y) + ||y - x||^2 / (2 eta)."""
    return reg.prox(eta, x)


def prox_optimality_residual(reg: Regularizer, eta: float, x, p) -> float:
    """First-order optimality residual of the prox subproblem at its output p.

    On differentiable pieces this is || r'(p) + (p - x)/eta ||; for indicator
    kinds it checks feasibility plus the variational inequality along the
    active constraint. Used by invariant tests; zero for an exact prox.
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    g = (p - x) / eta
    if isinstance(reg, ZeroReg):
        return float(np.linalg.norm(g))
    if isinstance(reg, SquaredNormReg):
        return float(np.linalg.norm(reg.mu * p + g))
    if isinstance(reg, L1Reg):
        res = 0.0
        for pi, gi in zip(p, g):
            if pi != 0.0:
                res = max(res, abs(reg.lam * np.sign(pi) + gi))
            else:
                res = max(res, max(abs(gi) - reg.lam, 0.0))
        return res
    if isinstance(reg, BoxReg):
        lo = np.broadcast_to(reg.lo, p.shape)
        hi = np.broadcast_to(reg.hi, p.shape)
        res = 0.0
        for pi, gi, l, h in zip(p, g, lo, hi):
            if pi < l - 1e-12 or pi > h + 1e-12:
                return float("inf")
            if l < pi < h:
                res = max(res, abs(gi))
            elif pi <= l:
                res = max(res, max(-gi, 0.0))  # need g >= 0 at the lower bound
            else:
                res = max(res, max(gi, 0.0))   # need g <= 0 at the upper bound
        return res
    if isinstance(reg, BallReg):
        nrm = float(np.linalg.norm(p))
        if nrm > reg.radius + 1e-12:
            return float("inf")
        if nrm < reg.radius - 1e-12:
            return float(np.linalg.norm(g))
        phat = p / max(nrm, 1e-300)
        radial = float(np.dot(x - p, phat))
        tangential = np.linalg.norm((x - p) - radial * phat)
        return float(max(tangential, max(-radial, 0.0)))
    raise UnsupportedOperationError(f"no residual check for {reg.kind}")


# ---------------------------------------------------------------------------
# Wasserstein-1 between equal-size 1-d empirical measures
# ---------------------------------------------------------------------------


def w1_empirical_1d(a, b) -> float:
    """W1 between two equal-size sorted 1-d sample lists.

    Equals the mean absolute difference of order statistics (the optimal
    coupling matches sorted samples). Symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0:
        raise ParameterError("inputs must be non-empty 1-d sample lists")
    if a.size != b.size:
        raise ParameterError(
            f"sample lists must have equal length ({a.size} vs {b.size}); "
            "resample to a common size first"
        )
    if np.any(np.diff(a) < 0) or np.any(np.diff(b) < 0):
        raise ParameterError("sample lists must be sorted ascending")
    return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------------------
# Weight products and averaging
# ---------------------------------------------------------------------------


def gamma_products(deltas):
    """Partial products G_t = prod_{i<=t} (1 - delta_i) and the identity residual.

    The weights satisfy sum_{i<=t} delta_i / G_i + 1 = 1 / G_t exactly; the
    returned residual is |lhs - rhs|, which should stay below 1e-10 / G_t.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        return np.empty(0), 0.0
    if np.any(deltas <= 0.0) or np.any(deltas >= 1.0):
        raise ParameterError("all weights must lie strictly inside (0, 1)")
    gammas = np.cumprod(1.0 - deltas)
    lhs = float(np.sum(deltas / gammas)) + 1.0
    residual = abs(lhs - 1.0 / gammas[-1])
    return gammas, residual


@dataclass
class ScheduleState:
    """Running averaging state: weights, their products, and the average point.

    The products are kept in log space so that ten thousand and more updates
    do not underflow; ``gamma`` / ``gamma_hat`` expose exp(log product).
    Single-owner mutable: updates modify the state in place.
    """

    avg_point: np.ndarray
    t: int = 0
    delta_t: float = 0.0
    delta_hat_t: float = 0.0
    log_gamma: float = 0.0
    log_gamma_hat: float = 0.0

    @classmethod
    def start(cls, x0) -> "ScheduleState":
        return cls(avg_point=as_point(x0).copy())

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    @property
    def gamma_hat(self) -> float:
        return math.exp(self.log_gamma_hat)


def averaging_update(state: ScheduleState, x_t, c1: float, c2: float, delta_t: float) -> ScheduleState:
    """Advance the averaging state by one iterate.

    Applies the augmented weight  dhat = delta (c1 + c2) / (1 + c2 delta)  and
    the convex-combination recursion  avg <- (1 - dhat) avg + dhat x_t.
    Raises ParameterError naming the violated weight constraint.
    """
    if not c1 + c2 > 0:
        raise ParameterError(f"weight constraint c1 + c2 > 0 violated (c1+c2={c1 + c2})")
    if not 1.0 - c1 * delta_t > 0:
        raise ParameterError(f"weight constraint 1 - c1*delta > 0 violated (value={1.0 - c1 * delta_t})")
    if not 1.0 + c2 * delta_t > 0:
        raise ParameterError(f"weight constraint 1 + c2*delta > 0 violated (value={1.0 + c2 * delta_t})")
    delta_hat = delta_t * (c1 + c2) / (1.0 + c2 * delta_t)
    x_t = np.asarray(x_t, dtype=np.float64)
    state.t += 1
    state.delta_t = float(delta_t)
    state.delta_hat_t = float(delta_hat)
    state.log_gamma += math.log1p(-delta_t) if delta_t < 1.0 else -math.inf
    state.log_gamma_hat += math.log1p(-delta_hat)
    state.avg_point = (1.0 - delta_hat) * state.avg_point + delta_hat * x_t
    return state
