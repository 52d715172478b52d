"""Linear maps, Lipschitz maps, proximity operators and resolvents.

Conventions
-----------
``Proximable.prox(gamma, x)`` returns ``argmin_y f(y) + ||y - x||^2 / (2 gamma)``.
For separable functions ``gamma`` may be an array broadcastable to ``x``,
which is how diagonal metrics are handled.

``ResolventOperator.resolvent(gamma, U, x)`` returns ``J_{gamma U A}(x)``, the
resolvent of ``gamma U A`` where ``U`` is a :class:`MetricOperator`.  For
``A = df`` this is the proximity operator of ``gamma f`` in the metric
``U^{-1}``, i.e. ``argmin_y gamma f(y) + ||y - x||^2_{U^{-1}} / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .metric_algebra import MetricError, MetricOperator

__all__ = [
    "LinearMap",
    "LipschitzMap",
    "Proximable",
    "ResolventOperator",
    "soft_threshold",
    "prox_box01",
    "prox_l1_conj",
    "prox_l1_translated",
    "project_tv_dual_ball",
    "project_tv_dual_ball_scaled",
    "grad_quadratic",
    "quadratic_gradient",
    "prox_with_metric",
    "prox_with_metric_scaled",
    "resolvent_of_inverse",
    "power_iteration_norm",
    "box01",
    "l1_conj",
    "l1_translated",
    "abs_value",
    "tv_dual_ball",
    "zero_function",
    "conjugate",
]


# ---------------------------------------------------------------------------
# Linear and Lipschitz maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearMap:
    """Bounded linear map with its adjoint and an upper bound on its norm."""

    apply: Callable[[np.ndarray], np.ndarray]
    adjoint_apply: Callable[[np.ndarray], np.ndarray]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    norm_bound: float
    name: str = "L"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)

    @property
    def T(self) -> "LinearMap":
        return LinearMap(
            self.adjoint_apply, self.apply, self.out_shape, self.in_shape, self.norm_bound, self.name + "*"
        )

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))

    @classmethod
    def identity(cls, shape) -> "LinearMap":
        shape = tuple(np.atleast_1d(shape).tolist()) if not isinstance(shape, tuple) else shape
        return cls(lambda x: np.array(x, dtype=float), lambda y: np.array(y, dtype=float), shape, shape, 1.0, "Id")

    @classmethod
    def from_matrix(cls, matrix, norm_bound: float | None = None, name: str = "M") -> "LinearMap":
        """Wrap a dense matrix.  Without ``norm_bound`` the spectral norm is used."""
        m = np.array(matrix, dtype=float)
        if norm_bound is None:
            norm_bound = float(np.linalg.norm(m, 2)) * (1 + 1e-12)
        return cls(lambda x: m @ x, lambda y: m.T @ y, (m.shape[1],), (m.shape[0],), norm_bound, name)

    def to_matrix(self) -> np.ndarray:
        """Materialize as a dense ``out_dim x in_dim`` matrix (for small tests)."""
        cols = []
        for j in range(self.in_dim):
            e = np.zeros(self.in_dim)
            e[j] = 1.0
            cols.append(np.ravel(self.apply(e.reshape(self.in_shape))))
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class LipschitzMap:
    """Single-valued monotone map ``B`` with Lipschitz constant ``beta``."""

    apply: Callable[[np.ndarray], np.ndarray]
    beta: float
    name: str = "B"

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"Lipschitz constant must be finite and >= 0, got {self.beta}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)

    @classmethod
    def zero(cls) -> "LipschitzMap":
        return cls(lambda x: np.zeros_like(x, dtype=float), 0.0, "0")

    @classmethod
    def from_matrix(cls, matrix, beta: float | None = None, name: str = "B") -> "LipschitzMap":
        """Affine-free linear map ``x -> M x``; monotone iff the symmetric part of M is PSD."""
        m = np.array(matrix, dtype=float)
        if beta is None:
            beta = float(np.linalg.norm(m, 2)) * (1 + 1e-12)
        return cls(lambda x: m @ x, beta, name)


# ---------------------------------------------------------------------------
# Closed-form proximity operators
# ---------------------------------------------------------------------------


def soft_threshold(t, gamma):
    """``sign(t) * max(|t| - gamma, 0)`` with ``sign(0) = 0``."""
    t = np.asarray(t, dtype=float)
    return np.sign(t) * np.maximum(np.abs(t) - gamma, 0.0)


def prox_box01(x) -> np.ndarray:
    """Projection onto ``[0, 1]^n``; the prox of the box indicator for every step."""
    return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)


def prox_l1_conj(p, gamma, b) -> np.ndarray:
    """Prox of ``gamma g*`` for ``g = ||. - b||_1``: clamp ``p - gamma b`` to ``[-1, 1]``."""
    p = np.asarray(p, dtype=float)
    b = np.asarray(b, dtype=float)
    if p.shape != b.shape:
        raise ValueError(f"dimension mismatch: p has shape {p.shape}, b has shape {b.shape}")
    return np.clip(p - gamma * b, -1.0, 1.0)


def prox_l1_translated(y, gamma, b) -> np.ndarray:
    """Prox of ``gamma ||. - b||_1``."""
    y = np.asarray(y, dtype=float)
    b = np.asarray(b, dtype=float)
    if y.shape != b.shape:
        raise ValueError(f"dimension mismatch: y has shape {y.shape}, b has shape {b.shape}")
    return b + soft_threshold(y - b, gamma)


def _pixel_magnitude(field: np.ndarray) -> np.ndarray:
    return np.sqrt(field[0] ** 2 + field[1] ** 2)


def project_tv_dual_ball(field, lam: float) -> np.ndarray:
    """Pixelwise radial projection of a ``(2, M, N)`` field onto ``{|(p, q)| <= lam}``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    field = np.asarray(field, dtype=float)
    return lam * field / np.maximum(lam, _pixel_magnitude(field))


def project_tv_dual_ball_scaled(field, lam: float, sigma: float) -> np.ndarray:
    """The scaled dual-ball formula ``(p, q) / max(1, |(p/sigma, q/sigma)| / lam)``.

    This is ``sigma * P_S(field / sigma)``, i.e. projection onto the ball of
    radius ``sigma * lam``.  It coincides with :func:`project_tv_dual_ball`
    only for ``sigma = 1``; kept for reproducing runs that used it.
    """
    field = np.asarray(field, dtype=float)
    mag = np.sqrt((field[0] / sigma) ** 2 + (field[1] / sigma) ** 2)
    return field / np.maximum(1.0, mag / lam)


def grad_quadratic(x, lam: float) -> np.ndarray:
    """Gradient ``2 lam x`` of ``lam ||x||^2``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return 2.0 * lam * np.asarray(x, dtype=float)


def quadratic_gradient(lam: float) -> LipschitzMap:
    return LipschitzMap(lambda x: grad_quadratic(x, lam), 2.0 * lam, f"grad({lam}|.|^2)")


@dataclass(frozen=True)
class Proximable:
    """A closed proper convex function known through its proximity operator.

    ``value`` is optional and returns ``inf`` outside the domain.
    """

    prox: Callable[[float | np.ndarray, np.ndarray], np.ndarray]
    descriptor: str
    separable: bool = True
    value: Callable[[np.ndarray], float] | None = None


def zero_function() -> Proximable:
    return Proximable(lambda g, x: np.array(x, dtype=float), "zero", True, lambda x: 0.0)


def box01() -> Proximable:
    def value(x):
        x = np.asarray(x)
        return 0.0 if np.all((x >= 0) & (x <= 1)) else math.inf

    return Proximable(lambda g, x: prox_box01(x), "box01", True, value)


def abs_value() -> Proximable:
    return Proximable(lambda g, x: soft_threshold(x, g), "l1", True, lambda x: float(np.abs(x).sum()))


def l1_translated(b) -> Proximable:
    b = np.array(b, dtype=float)
    return Proximable(
        lambda g, y: prox_l1_translated(y, g, b), "l1_translated", True, lambda y: float(np.abs(y - b).sum())
    )


def l1_conj(b) -> Proximable:
    """Conjugate of ``||. - b||_1``: ``iota_[-1,1]^n(p) + <p, b>``."""
    b = np.array(b, dtype=float)

    def value(p):
        p = np.asarray(p)
        return float(np.vdot(p, b)) if np.all(np.abs(p) <= 1) else math.inf

    return Proximable(lambda g, p: prox_l1_conj(p, g, b), "l1_conj", True, value)


def tv_dual_ball(lam: float) -> Proximable:
    """Indicator of the pixelwise dual ball of radius ``lam`` (conjugate of ``lam ||.||_x``)."""

    def value(field):
        return 0.0 if np.all(_pixel_magnitude(np.asarray(field)) <= lam * (1 + 1e-12)) else math.inf

    return Proximable(lambda g, f: project_tv_dual_ball(f, lam), "tv_dual_ball", False, value)


def conjugate(f: Proximable) -> Proximable:
    """The conjugate ``f*`` through the Moreau decomposition."""
    return Proximable(
        lambda g, x: resolvent_of_inverse(f, g, x), f"conj({f.descriptor})", f.separable, None
    )


def prox_with_metric(fprox: Proximable, gamma: float, tau: float, x) -> np.ndarray:
    """Prox of ``gamma f`` relative to the metric ``(tau Id)^{-1}``.

    ``argmin_y gamma f(y) + ||y - x||^2 / (2 tau)`` which is ``prox_{tau gamma f}(x)``.
    """
    if gamma <= 0 or tau <= 0:
        raise ValueError("gamma and tau must be positive")
    return fprox.prox(tau * gamma, x)


def prox_with_metric_scaled(fprox: Proximable, gamma: float, tau: float, x) -> np.ndarray:
    """``tau * prox_{tau gamma f}(x / tau)``.

    Agrees with :func:`prox_with_metric` only at ``tau = 1``; for indicator
    functions it rescales the constraint set.  Provided for comparison runs.
    """
    if gamma <= 0 or tau <= 0:
        raise ValueError("gamma and tau must be positive")
    return tau * fprox.prox(tau * gamma, np.asarray(x, dtype=float) / tau)


def resolvent_of_inverse(bprox: Proximable, gamma, x) -> np.ndarray:
    """``J_{gamma (dg)^{-1}}(x) = prox_{gamma g*}(x) = x - gamma prox_{g/gamma}(x/gamma)``."""
    x = np.asarray(x, dtype=float)
    return x - gamma * bprox.prox(1.0 / gamma, x / gamma)


# ---------------------------------------------------------------------------
# Resolvents in a metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResolventOperator:
    """Maximally monotone ``A`` given through ``(gamma, U, x) -> J_{gamma U A}(x)``."""

    resolvent: Callable[[float, MetricOperator, np.ndarray], np.ndarray]
    descriptor: str = "A"

    def __call__(self, gamma: float, U: MetricOperator, x: np.ndarray) -> np.ndarray:
        return self.resolvent(gamma, U, x)

    @classmethod
    def zero(cls) -> "ResolventOperator":
        return cls(lambda gamma, U, x: np.array(x, dtype=float), "0")

    @classmethod
    def subdifferential(cls, f: Proximable) -> "ResolventOperator":
        """``A = df``; ``J_{gamma U df} = prox^{U^{-1}}_{gamma f}``.

        Scalar metrics reduce to a plain prox with step ``tau gamma``.  Diagonal
        metrics need a separable ``f`` (elementwise steps).
        """

        def resolvent(gamma, U, x):
            if U.kind == "scalar":
                return f.prox(U.data * gamma, x)
            if U.kind == "diagonal" and f.separable:
                x = np.asarray(x, dtype=float)
                return f.prox(gamma * U.data.reshape(x.shape), x)
            raise MetricError(
                f"no closed-form resolvent of {f.descriptor} in a {U.kind} metric; supply a custom ResolventOperator"
            )

        return cls(resolvent, f"d({f.descriptor})")

    @classmethod
    def inverse_subdifferential(cls, g: Proximable) -> "ResolventOperator":
        """``A = (dg)^{-1} = dg*``, evaluated through the Moreau decomposition."""
        return cls.subdifferential(conjugate(g))


# ---------------------------------------------------------------------------
# Norm estimation
# ---------------------------------------------------------------------------


def power_iteration_norm(L: LinearMap, iters: int = 100, seed: int = 0, tol: float = 1e-12) -> float:
    """Estimate ``||L||`` by power iteration on ``L* L``.

    The returned value is the largest Rayleigh quotient seen, so it is
    nondecreasing in ``iters``.  Stops early when the quotient stagnates to
    relative ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(L.in_shape)
    x /= np.linalg.norm(x)
    best = 0.0
    for _ in range(iters):
        Lx = L.apply(x)
        rq = float(np.vdot(Lx, Lx))
        if rq > best:
            stagnated = best > 0 and (rq - best) <= tol * rq
            best = rq
        else:
            stagnated = True
        if stagnated:
            break
        y = L.adjoint_apply(Lx)
        ny = np.linalg.norm(y)
        if ny == 0:
            break
        x = y / ny
    return math.sqrt(best)
