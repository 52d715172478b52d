"""TV-regularized deblurring: image operators, degradation model and problem assembly.

The reconstruction problem is::

    minimize_{x in [0,1]^n}  ||A x - b||_1 + lam * (TV_iso(x) + ||x||^2)

with ``A`` a normalized Gaussian blur and ``b`` the degraded observation.
Images are ``(M, N)`` float arrays; gradient fields are ``(2, M, N)`` arrays
holding the vertical and horizontal differences.

Dual blocks are numbered 1 = blur / l1 term (dual in ``R^n``) and
2 = TV term (dual in ``R^n x R^n``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fbf_solver import ErrorSchedule, SolverConfig, StepsizeReport, validate_stepsize
from .metric_algebra import MetricError, MetricSchedule, scalar_rule
from .operators import (
    LinearMap,
    Proximable,
    ResolventOperator,
    box01,
    l1_conj,
    l1_translated,
    prox_with_metric_scaled,
    quadratic_gradient,
    tv_dual_ball,
)
from .primal_dual import Block, PrimalDualProblem, ProductState, common_mu, initial_state, lipschitz_aggregate

__all__ = [
    "discrete_gradient",
    "gradient_adjoint",
    "gradient_operator",
    "cross_norm",
    "tv_iso",
    "gaussian_kernel_1d",
    "gaussian_blur",
    "isnr",
    "box_muller",
    "add_gaussian_noise",
    "synthetic_phantom",
    "error_sequence",
    "ERROR_RULES",
    "GAMMA_RULES",
    "DeblurConfig",
    "DeblurSetup",
    "degrade",
    "build_deblur_problem",
    "assemble_deblur",
    "objective_value",
]


# ---------------------------------------------------------------------------
# Discrete gradient and total variation
# ---------------------------------------------------------------------------


def discrete_gradient(img) -> np.ndarray:
    """Forward differences with a zero last row (vertical) and last column (horizontal)."""
    x = np.asarray(img, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    g = np.zeros((2,) + x.shape)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def gradient_adjoint(field) -> np.ndarray:
    """Adjoint of :func:`discrete_gradient`, i.e. minus the discrete divergence."""
    w = np.asarray(field, dtype=float)
    if w.ndim != 3 or w.shape[0] != 2:
        raise ValueError(f"expected a (2, M, N) field, got shape {w.shape}")
    p, q = w[0], w[1]
    out = np.zeros(p.shape)
    out[:-1, :] -= p[:-1, :]
    out[1:, :] += p[:-1, :]
    out[:, :-1] -= q[:, :-1]
    out[:, 1:] += q[:, :-1]
    return out


def gradient_operator(shape) -> LinearMap:
    """The discrete gradient as a :class:`LinearMap` with ``||L|| <= sqrt(8)``."""
    shape = tuple(int(s) for s in shape)
    return LinearMap(discrete_gradient, gradient_adjoint, shape, (2,) + shape, math.sqrt(8.0), "grad")


def cross_norm(field) -> float:
    """Sum over pixels of the Euclidean norm of the pair ``(p_ij, q_ij)``."""
    w = np.asarray(field, dtype=float)
    return float(np.sqrt(w[0] ** 2 + w[1] ** 2).sum())


def tv_iso(img) -> float:
    """Isotropic total variation; the last row and column contribute one-sided terms."""
    return cross_norm(discrete_gradient(img))


# ---------------------------------------------------------------------------
# Blur
# ---------------------------------------------------------------------------


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ValueError("kernel sigma must be positive")
    t = np.arange(size) - size // 2
    k = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric extension: ... c b a | a b c ... z | z y x ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def _folded_matrix(kernel: np.ndarray, n: int) -> np.ndarray:
    """Matrix of 1-D convolution with symmetric boundary extension."""
    r = kernel.size // 2
    m = np.zeros((n, n))
    rows = np.arange(n)
    for k, w in zip(range(-r, r + 1), kernel):
        np.add.at(m, (rows, _reflect(rows + k, n)), w)
    return m


def gaussian_blur(shape, kernel_size: int = 9, kernel_sigma: float = 4.0) -> LinearMap:
    """Convolution with the normalized ``kernel_size x kernel_size`` Gaussian.

    The 2-D kernel is separable, so the operator is ``X -> R X C^T`` with the
    1-D convolution matrices ``R`` and ``C`` folded by symmetric extension.
    For a symmetric kernel both are symmetric with unit row sums, hence the
    operator is self-adjoint with norm at most 1.
    """
    M, N = (int(s) for s in shape)
    k = gaussian_kernel_1d(kernel_size, kernel_sigma)
    R = _folded_matrix(k, M)
    C = R if N == M else _folded_matrix(k, N)

    def apply(x):
        return R @ np.asarray(x, dtype=float) @ C.T

    def adjoint(y):
        return R.T @ np.asarray(y, dtype=float) @ C

    return LinearMap(apply, adjoint, (M, N), (M, N), 1.0, f"blur{kernel_size}s{kernel_sigma:g}")


# ---------------------------------------------------------------------------
# Quality, noise, test images
# ---------------------------------------------------------------------------


def isnr(original, observed, current) -> float:
    """``10 log10(||x - b||^2 / ||x - x_n||^2)`` in decibels; ``inf`` on exact recovery."""
    x = np.asarray(original, dtype=float)
    num = float(np.sum((x - np.asarray(observed, dtype=float)) ** 2))
    den = float(np.sum((x - np.asarray(current, dtype=float)) ** 2))
    if den == 0.0:
        return math.inf
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def box_muller(rng: np.random.Generator, count: int) -> np.ndarray:
    """Standard normals from uniforms.

    Draws ``2 * ceil(count / 2)`` uniforms ``u`` in one call; pair ``j`` uses
    ``u[2j]`` for the radius and ``u[2j+1]`` for the angle, producing the
    cosine sample then the sine sample.  The tail is truncated to ``count``.
    """
    pairs = (count + 1) // 2
    u = rng.random(2 * pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    angle = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:count]


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    x = np.asarray(img, dtype=float)
    if sigma == 0:
        return x.copy()
    noise = box_muller(np.random.default_rng(seed), x.size).reshape(x.shape)
    return x + sigma * noise


def synthetic_phantom(size: int) -> np.ndarray:
    """Deterministic piecewise-constant test image in ``[0, 1]``."""
    if size < 4:
        raise ValueError("phantom size must be >= 4")
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    img = np.full((size, size), 0.1)
    img[(yy > 0.15) & (yy < 0.55) & (xx > 0.1) & (xx < 0.45)] = 0.8
    img[(yy - 0.65) ** 2 + (xx - 0.65) ** 2 < 0.22 ** 2] = 0.5
    img[(yy > 0.2) & (yy < 0.35) & (xx > 0.6) & (xx < 0.85)] = 1.0
    img[(yy > 0.75) & (yy < 0.9) & (xx > 0.15) & (xx < 0.3)] = 0.0
    return img


# ---------------------------------------------------------------------------
# Error and stepsize rules
# ---------------------------------------------------------------------------


_ERROR_SEQ: dict[str, tuple[Callable[[int], float], float]] = {
    "inv_k2": (lambda k: 1.0 / k ** 2, math.pi ** 2 / 6.0),
    "inv_k5": (lambda k: 1.0 / k ** 5, 1.0369277551433699),  # zeta(5)
    "inv_kk": (lambda k: (1.0 / k) ** k, 1.2912859970626636),  # sum k^-k
    "half_pow_k": (lambda k: 0.5 ** k, 1.0),
}

ERROR_RULES = ("none",) + tuple(_ERROR_SEQ)
GAMMA_RULES = ("error_free", "with_error")


def error_sequence(rule: str, k: int) -> float:
    """Value of a summable error rule at ``k >= 1``."""
    if rule not in _ERROR_SEQ:
        raise ValueError(f"unknown error rule {rule!r}; expected one of {', '.join(_ERROR_SEQ)}")
    if k < 1:
        raise ValueError("error sequences are indexed from k = 1")
    return _ERROR_SEQ[rule][0](k)


def error_schedule(rule: str) -> ErrorSchedule:
    """``a_n = b_n = c_n = e(n + 1)`` on every coordinate, with its summability certificate."""
    if rule == "none":
        return ErrorSchedule.none()
    if rule not in _ERROR_SEQ:
        raise ValueError(f"unknown error rule {rule!r}; expected one of {', '.join(ERROR_RULES)}")
    seq, total = _ERROR_SEQ[rule]
    return ErrorSchedule.from_sequence(seq, total, rule)


def gamma_from_rule(rule: str, beta: float, mu: float = 1.0) -> float:
    """``1/(2 beta + 0.1)`` for ``error_free``, ``1/(sqrt(10) mu (beta + 1))`` for ``with_error``."""
    if rule == "error_free":
        return 1.0 / (2.0 * beta + 0.1)
    if rule == "with_error":
        return 1.0 / (math.sqrt(10.0) * mu * (beta + 1.0))
    raise ValueError(f"unknown gamma rule {rule!r}; expected one of {', '.join(GAMMA_RULES)}")


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeblurConfig:
    """Parameters of the deblurring experiment.

    ``metric_prox`` selects how dual proxes act in a scaled metric
    ``sigma Id``: ``"exact"`` evaluates ``prox_{sigma gamma g*}`` directly,
    ``"scaled"`` uses ``sigma prox_{sigma gamma g*}(. / sigma)``.  The two
    agree whenever every ``sigma_n = 1``.
    """

    lambda_reg: float = 0.003
    kernel_size: int = 9
    kernel_sigma: float = 4.0
    noise_sigma: float = 1e-3
    noise_seed: int = 0
    tau: str = "const:1"
    sigma1: str = "const:1"
    sigma2: str = "const:1"
    gamma_rule: str = "error_free"
    error_rule: str = "none"
    init_scalar: float = 0.466
    metric_prox: str = "exact"

    def __post_init__(self):
        if not self.lambda_reg > 0:
            raise ValueError("lambda_reg must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.gamma_rule not in GAMMA_RULES:
            raise ValueError(f"gamma_rule must be one of {GAMMA_RULES}")
        if self.error_rule not in ERROR_RULES:
            raise ValueError(f"error_rule must be one of {ERROR_RULES}")
        if self.metric_prox not in ("exact", "scaled"):
            raise ValueError("metric_prox must be 'exact' or 'scaled'")
        for rule in (self.tau, self.sigma1, self.sigma2):
            scalar_rule(rule)

    def with_(self, **changes) -> "DeblurConfig":
        return replace(self, **changes)


def degrade(original, cfg: DeblurConfig) -> np.ndarray:
    """Blur, add seeded Gaussian noise, clip to ``[0, 1]``."""
    x = np.asarray(original, dtype=float)
    blurred = gaussian_blur(x.shape, cfg.kernel_size, cfg.kernel_sigma)(x)
    return np.clip(add_gaussian_noise(blurred, cfg.noise_sigma, cfg.noise_seed), 0.0, 1.0)


def _scaled_dual(g_conj: Proximable) -> ResolventOperator:
    def resolvent(gamma, U, x):
        if U.kind != "scalar":
            raise MetricError("scaled metric prox needs a scalar metric")
        return prox_with_metric_scaled(g_conj, gamma, U.data, x)

    return ResolventOperator(resolvent, f"scaled d({g_conj.descriptor})")


@dataclass(frozen=True)
class DeblurSetup:
    """Assembled problem together with the data needed to run and score it.

    Unpacks as ``(problem, observed)``.
    """

    problem: PrimalDualProblem
    observed: np.ndarray
    original: np.ndarray | None
    blur: LinearMap
    cfg: DeblurConfig
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.problem, self.observed))

    @property
    def beta(self) -> float:
        return lipschitz_aggregate(self.problem)

    @property
    def mu(self) -> float:
        return common_mu(self.problem)

    @property
    def gamma(self) -> float:
        return gamma_from_rule(self.cfg.gamma_rule, self.beta, self.mu)

    @property
    def errors(self) -> ErrorSchedule:
        return error_schedule(self.cfg.error_rule)

    def solver_config(self, max_iters: int = 1000, **kwargs) -> SolverConfig:
        return SolverConfig(gamma=self.gamma, errors=self.errors, max_iters=max_iters, **kwargs)

    def stepsize_report(self, config: SolverConfig | None = None) -> StepsizeReport:
        config = config or self.solver_config()
        return validate_stepsize(config, self.beta, self.mu)

    def initial_state(self) -> ProductState:
        """``x_0 = p_{1,-1} = c 1``, dual starts ``v_{i,0} = 0``, ``p_{2,i,-1} = c 1`` in each dual space."""
        c = self.cfg.init_scalar
        shape = self.problem.shape
        x0 = np.full(shape, c)
        p2 = [np.full(b.shape, c) for b in self.problem.blocks]
        return initial_state(self.problem, x0, None, x0.copy(), p2)

    def objective(self, x) -> float:
        return objective_value(self, x)

    def fval(self, x) -> float:
        """Objective at the box projection of ``x``; equal to :meth:`objective` for feasible ``x``."""
        return objective_value(self, np.clip(x, 0.0, 1.0))

    def isnr(self, x) -> float:
        if self.original is None:
            raise ValueError("ISNR needs the original image")
        return isnr(self.original, self.observed, x)


def build_deblur_problem(observed, cfg: DeblurConfig, original=None) -> DeblurSetup:
    """Assemble the primal-dual problem for an already degraded image."""
    b = np.asarray(observed, dtype=float)
    if b.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {b.shape}")
    blur = gaussian_blur(b.shape, cfg.kernel_size, cfg.kernel_sigma)
    grad = gradient_operator(b.shape)
    g1_conj, g2_conj = l1_conj(b), tv_dual_ball(cfg.lambda_reg)
    if cfg.metric_prox == "exact":
        r1, r2 = ResolventOperator.subdifferential(g1_conj), ResolventOperator.subdifferential(g2_conj)
    else:
        r1, r2 = _scaled_dual(g1_conj), _scaled_dual(g2_conj)
    blocks = (
        Block(blur, r1, None, scalar_rule(cfg.sigma1), l1_translated(b), "blur"),
        Block(grad, r2, None, scalar_rule(cfg.sigma2), None, "tv"),
    )
    prob = PrimalDualProblem.minimization(
        box01(), quadratic_gradient(cfg.lambda_reg), blocks, b.shape, metric_schedule=scalar_rule(cfg.tau)
    )
    orig = None if original is None else np.asarray(original, dtype=float)
    return DeblurSetup(prob, b, orig, blur, cfg)


def assemble_deblur(original, cfg: DeblurConfig | None = None) -> DeblurSetup:
    """Degrade ``original`` and build the reconstruction problem for the result."""
    cfg = cfg or DeblurConfig()
    x = np.asarray(original, dtype=float)
    return build_deblur_problem(degrade(x, cfg), cfg, x)


def objective_value(setup: DeblurSetup, x) -> float:
    """``||A x - b||_1 + lam (TV_iso(x) + ||x||^2)``, ``inf`` outside ``[0, 1]^n``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1):
        return math.inf
    lam = setup.cfg.lambda_reg
    fidelity = float(np.abs(setup.blur(x) - setup.observed).sum())
    return fidelity + lam * (tv_iso(x) + float(np.sum(x * x)))
