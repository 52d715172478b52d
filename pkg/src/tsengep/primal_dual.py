"""m-block primal-dual iterations and their product-space reduction.

Solves ``z in A x + sum_i L_i^* B_i(L_i x - r_i) + C x`` together with its
dual, or for ``A = df``, ``B_i = dg_i``, ``C = grad h`` the composite problem::

    minimize  f(x) + sum_i g_i(L_i x - r_i) + h(x) - <x, z>

:func:`step_blocks` runs the block iteration directly.
:func:`build_product_inclusion` rewrites the same problem as a single
inclusion on ``H + G_1 + ... + G_m`` so that :func:`fbf_solver.step_tseng_ep`
can run it; the two paths agree to the last bit, which the tests exploit.

Error terms for block problems are given through an
:class:`~tsengep.fbf_solver.ErrorSchedule` whose rules return either a scalar
(applied to every coordinate of every block) or a sequence
``[primal, dual_1, ..., dual_m]``.  Dual errors enter with the signs written
in the block iteration, ``y_2 = v + gamma U (L p + a_2)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .fbf_solver import (
    ErrorSchedule,
    InclusionProblem,
    NonFiniteError,
    RunResult,
    SolverConfig,
    StepsizeError,
    StopReason,
    TraceRecord,
    _stop_check,
    validate_stepsize,
)
from .metric_algebra import MetricOperator, MetricSchedule
from .operators import LinearMap, LipschitzMap, Proximable, ResolventOperator

__all__ = [
    "Block",
    "PrimalDualProblem",
    "ProductState",
    "ProductInclusion",
    "CertificateReport",
    "lipschitz_aggregate",
    "common_mu",
    "build_product_inclusion",
    "initial_state",
    "step_blocks",
    "run_blocks",
    "recover_certificates",
]


@dataclass(frozen=True)
class Block:
    """One composite term ``L_i^* B_i(L_i . - r_i)``.

    ``dual_resolvent`` evaluates ``J_{gamma U B_i^{-1}}``.  For minimization
    problems build blocks with :meth:`from_conjugate` (prox of ``g_i^*``
    known in closed form) or :meth:`from_function` (prox of ``g_i``, dualized
    through the Moreau decomposition).
    """

    L: LinearMap
    dual_resolvent: ResolventOperator
    r: np.ndarray | None = None
    metric_schedule: MetricSchedule = field(default_factory=MetricSchedule.identity)
    g: Proximable | None = None
    name: str = "block"

    @classmethod
    def from_conjugate(cls, L: LinearMap, g_conj: Proximable, *, r=None, metric_schedule=None,
                       g: Proximable | None = None, name: str = "block") -> "Block":
        return cls(L, ResolventOperator.subdifferential(g_conj), _opt_array(r),
                   metric_schedule or MetricSchedule.identity(), g, name)

    @classmethod
    def from_function(cls, L: LinearMap, g: Proximable, *, r=None, metric_schedule=None,
                      name: str = "block") -> "Block":
        return cls(L, ResolventOperator.inverse_subdifferential(g), _opt_array(r),
                   metric_schedule or MetricSchedule.identity(), g, name)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.L.out_shape)


def _opt_array(v):
    return None if v is None else np.array(v, dtype=float)


@dataclass(frozen=True)
class PrimalDualProblem:
    """Primal resolvent ``A`` (or ``f``), Lipschitz ``C`` with constant ``v0``, shift ``z`` and blocks."""

    A: ResolventOperator
    C: LipschitzMap
    blocks: tuple[Block, ...]
    shape: tuple[int, ...]
    z: np.ndarray | None = None
    metric_schedule: MetricSchedule = field(default_factory=MetricSchedule.identity)
    f: Proximable | None = None
    h: Callable[[np.ndarray], float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "shape", tuple(self.shape))
        for blk in self.blocks:
            if tuple(blk.L.in_shape) != self.shape:
                raise ValueError(f"block {blk.name}: L maps from {blk.L.in_shape}, primal shape is {self.shape}")
            if blk.r is not None and blk.r.shape != blk.shape:
                raise ValueError(f"block {blk.name}: r has shape {blk.r.shape}, expected {blk.shape}")
            if blk.L.norm_bound == 0:
                raise ValueError(f"block {blk.name}: L must be nonzero")
        if self.z is not None and np.shape(self.z) != self.shape:
            raise ValueError(f"z has shape {np.shape(self.z)}, expected {self.shape}")

    @classmethod
    def minimization(cls, f: Proximable, grad_h: LipschitzMap, blocks: Sequence[Block], shape,
                     *, z=None, metric_schedule: MetricSchedule | None = None,
                     h: Callable[[np.ndarray], float] | None = None) -> "PrimalDualProblem":
        return cls(ResolventOperator.subdifferential(f), grad_h, tuple(blocks), tuple(shape), _opt_array(z),
                   metric_schedule or MetricSchedule.identity(), f, h)

    @property
    def v0(self) -> float:
        return self.C.beta

    @property
    def m(self) -> int:
        return len(self.blocks)

    def forward(self, p1: np.ndarray, p2: Sequence[np.ndarray]) -> np.ndarray:
        """``C p1 + sum_i L_i^* p2_i`` accumulated in block order."""
        out = self.C(p1)
        for blk, v in zip(self.blocks, p2):
            out = out + blk.L.T(v)
        return out


def lipschitz_aggregate(prob: PrimalDualProblem) -> float:
    """``v0 + sqrt(sum_i ||L_i||^2)``, the Lipschitz constant of the product operator."""
    return prob.v0 + math.sqrt(sum(blk.L.norm_bound ** 2 for blk in prob.blocks))


def common_mu(prob: PrimalDualProblem) -> float:
    return max([prob.metric_schedule.mu] + [blk.metric_schedule.mu for blk in prob.blocks])


# ---------------------------------------------------------------------------
# State and errors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductState:
    """Primal ``x_n``, duals ``v_{i,n}``, previous resolvent outputs and cached forward terms."""

    x: np.ndarray
    v: tuple[np.ndarray, ...]
    p1_prev: np.ndarray
    p2_prev: tuple[np.ndarray, ...]
    n: int = 0
    F_prev: np.ndarray | None = None
    Lp_prev: tuple[np.ndarray, ...] | None = None


def initial_state(prob: PrimalDualProblem, x0, v0=None, p1_init=None, p2_init=None) -> ProductState:
    """Defaults: ``v_{i,0} = 0``, ``p_{1,-1} = x0``, ``p_{2,i,-1} = v_{i,0}``."""
    x0 = np.array(x0, dtype=float).reshape(prob.shape)
    v = tuple(np.zeros(b.shape) for b in prob.blocks) if v0 is None else tuple(
        np.array(vi, dtype=float).reshape(b.shape) for vi, b in zip(v0, prob.blocks))
    p1 = x0.copy() if p1_init is None else np.array(p1_init, dtype=float).reshape(prob.shape)
    p2 = tuple(vi.copy() for vi in v) if p2_init is None else tuple(
        np.array(pi, dtype=float).reshape(b.shape) for pi, b in zip(p2_init, prob.blocks))
    return ProductState(x0, v, p1, p2, 0)


def _split_error(e, m: int):
    if e is None:
        return None, (None,) * m
    if np.ndim(e) == 0 and not isinstance(e, (list, tuple)):
        return e, (e,) * m
    e = list(e)
    if len(e) != m + 1:
        raise ValueError(f"block error must have {m + 1} components, got {len(e)}")
    return e[0], tuple(e[1:])


def _add(v, e):
    return v if e is None else v + e


def _finite(value, line, block, n):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value in line '{line}' ({block}) at iteration n={n}")
    return value


# ---------------------------------------------------------------------------
# Block iteration
# ---------------------------------------------------------------------------


def _step(prob: PrimalDualProblem, state: ProductState, gamma: float, errors: tuple, forward=None):
    n, m = state.n, prob.m
    a1, a2 = _split_error(errors[0], m)
    b1, b2 = _split_error(errors[1], m)
    c1, c2 = _split_error(errors[2], m)
    forward = forward or prob.forward
    U = prob.metric_schedule(n)
    Ui = [blk.metric_schedule(n) for blk in prob.blocks]

    F_prev = state.F_prev if state.F_prev is not None else forward(state.p1_prev, state.p2_prev)
    Lp_prev = state.Lp_prev if state.Lp_prev is not None else tuple(
        blk.L(state.p1_prev) for blk in prob.blocks)

    d1 = _finite(gamma * U.apply(_add(F_prev, a1)), "y_1 = x - gamma U (C p1 + sum L* p2 + a1)", "primal", n)
    y1 = state.x - d1

    e, y2, p2 = [], [], []
    for i, blk in enumerate(prob.blocks):
        ei = _finite(gamma * Ui[i].apply(_add(Lp_prev[i], a2[i])), "y_2 = v + gamma U_i (L p1 + a2)", blk.name, n)
        y2i = state.v[i] + ei
        arg = y2i if blk.r is None else y2i - gamma * Ui[i].apply(blk.r)
        p2i = _finite(_add(blk.dual_resolvent(gamma, Ui[i], arg), b2[i]), "p_2 = J(y_2 - gamma U_i r) + b2", blk.name, n)
        e.append(ei)
        y2.append(y2i)
        p2.append(p2i)

    arg = y1 if prob.z is None else y1 + gamma * U.apply(prob.z)
    p1 = _finite(_add(prob.A(gamma, U, arg), b1), "p_1 = J(y_1 + gamma U z) + b1", "primal", n)

    Lp, q2, v_next = [], [], []
    for i, blk in enumerate(prob.blocks):
        Lpi = blk.L(p1)
        q2i = _finite(p2[i] + gamma * Ui[i].apply(_add(Lpi, c2[i])), "q_2 = p_2 + gamma U_i (L p1 + c2)", blk.name, n)
        Lp.append(Lpi)
        q2.append(q2i)
        v_next.append(q2i - e[i])

    F = forward(p1, p2)
    q1 = _finite(p1 - gamma * U.apply(_add(F, c1)), "q_1 = p_1 - gamma U (C p1 + sum L* p2 + c1)", "primal", n)
    x_next = d1 + q1

    new = ProductState(x_next, tuple(v_next), p1, tuple(p2), n + 1, F, tuple(Lp))
    return new, (y1, tuple(y2)), (p1, tuple(p2)), (q1, tuple(q2))


def step_blocks(prob: PrimalDualProblem, state: ProductState, config: SolverConfig) -> ProductState:
    """One iteration of the block scheme, lines in the order of the algorithm."""
    n = state.n
    return _step(prob, state, config.gamma_at(n), config.errors.at(n))[0]


def _product_norm(primal, duals) -> float:
    total = float(np.vdot(primal, primal)) + sum(float(np.vdot(d, d)) for d in duals)
    return math.sqrt(total)


def _diff(a, b):
    return a[0] - b[0], tuple(x - y for x, y in zip(a[1], b[1]))


def run_blocks(
    prob: PrimalDualProblem,
    config: SolverConfig,
    state: ProductState,
    objective: Callable[[np.ndarray], float] | None = None,
    extras: dict[str, Callable[[np.ndarray], float]] | None = None,
    callback: Callable[[int, ProductState], None] | None = None,
) -> RunResult:
    """Iterate :func:`step_blocks`.

    The trace's ``step_norm`` is the primal ``||x_n - x_{n+1}||``; ``residual``
    and ``yq_residual`` are product-space norms of ``x_n - p_n`` and
    ``y_n - q_n``.  ``objective`` and ``extras`` are evaluated at ``p_{1,n}``,
    which is also the returned solution.
    """
    beta = lipschitz_aggregate(prob)
    mu = common_mu(prob)
    dim = int(np.prod(prob.shape)) + sum(int(np.prod(b.shape)) for b in prob.blocks)
    if not config.errors.is_zero and not config.allow_nonsummable:
        config.errors.check(dim)
    if not config.allow_unsafe_stepsize and beta > 0:
        report = validate_stepsize(config, beta, mu)
        if not report.ok:
            raise StepsizeError(report.message)
    if config.stop_rule is not None and config.stop_rule.kind is StopReason.FVAL_GAP and objective is None:
        raise ValueError("fval_gap stopping needs an objective callback")

    calls = [0]

    def forward(p1, p2):
        calls[0] += 1
        return prob.forward(p1, p2)

    extras = extras or {}
    trace: list[TraceRecord] = []
    solution = state.p1_prev
    reason = StopReason.BUDGET
    start = time.perf_counter()
    n_done = 0
    for n in range(config.max_iters):
        new, y, p, q = _step(prob, state, config.gamma_at(n), config.errors.at(n), forward)
        step_norm = float(np.linalg.norm(np.ravel(state.x - new.x)))
        p1 = p[0]
        fval = objective(p1) if objective is not None else math.nan
        if n % config.trace_every == 0:
            xs = (state.x, state.v)
            trace.append(TraceRecord(
                n, step_norm, _product_norm(*_diff(xs, p)), _product_norm(*_diff(y, q)), fval,
                time.perf_counter() - start, {k: fn(p1) for k, fn in extras.items()},
            ))
        solution, state, n_done = p1, new, n + 1
        if callback is not None:
            callback(n, state)
        hit = _stop_check(config.stop_rule, step_norm, p1, fval)
        if hit is not None:
            reason = hit
            break
    return RunResult(solution, trace, reason, n_done, calls[0], state, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Product-space reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductInclusion(InclusionProblem):
    """Inclusion on the flat vector ``(x, v_1, ..., v_m)`` plus the packing helpers."""

    shapes: tuple[tuple[int, ...], ...] = ()
    metric_schedule: MetricSchedule | None = None

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(s)) for s in self.shapes)

    def pack(self, primal, duals=()) -> np.ndarray:
        return np.concatenate([np.ravel(primal)] + [np.ravel(d) for d in duals])

    def unpack(self, w: np.ndarray):
        parts, start = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            parts.append(w[start:start + size].reshape(shape))
            start += size
        return parts[0], tuple(parts[1:])

    def pack_state(self, state: ProductState):
        """``(x_0, p_{-1})`` for :func:`fbf_solver.run` from a block state."""
        return self.pack(state.x, state.v), self.pack(state.p1_prev, state.p2_prev)

    def product_errors(self, errors: ErrorSchedule) -> ErrorSchedule:
        """Block errors rewritten for the product iteration (dual ``a``, ``c`` change sign)."""
        m = len(self.shapes) - 1

        def convert(rule, flip):
            if rule is None:
                return None

            def flat(n):
                e1, e2 = _split_error(rule(n), m)
                pieces = [np.broadcast_to(np.asarray(e1, dtype=float), self.shapes[0])]
                for shape, ei in zip(self.shapes[1:], e2):
                    ei = np.broadcast_to(np.asarray(ei, dtype=float), shape)
                    pieces.append(-ei if flip else ei)
                return self.pack(pieces[0], pieces[1:])

            return flat

        return ErrorSchedule(convert(errors.a, True), convert(errors.b, False), convert(errors.c, True),
                             errors.certificate, errors.name)


def build_product_inclusion(prob: PrimalDualProblem) -> ProductInclusion:
    """The inclusion ``0 in A w + B w`` on ``H + G_1 + ... + G_m``.

    ``B(x, v) = (C x + sum L_i^* v_i, -L_1 x, ..., -L_m x)`` with Lipschitz
    constant :func:`lipschitz_aggregate`; the resolvent splits blockwise with
    the shifts ``+gamma U z`` and ``-gamma U_i r_i``; the metric is block
    diagonal.
    """
    shapes = (prob.shape,) + tuple(b.shape for b in prob.blocks)
    sizes = [int(np.prod(s)) for s in shapes]
    proto = ProductInclusion(ResolventOperator.zero(), LipschitzMap.zero(), (sum(sizes),), shapes)

    def B(w):
        x, v = proto.unpack(w)
        duals = [-blk.L(x) for blk in prob.blocks]
        return proto.pack(prob.forward(x, v), duals)

    def resolvent(gamma, U, w):
        x, v = proto.unpack(np.asarray(w, dtype=float))
        parts = U.parts if U.kind == "block" else (U,) * len(shapes)
        U0 = parts[0]
        arg = x if prob.z is None else x + gamma * U0.apply(prob.z)
        out = [prob.A(gamma, U0, arg)]
        for blk, vi, Ui in zip(prob.blocks, v, parts[1:]):
            argi = vi if blk.r is None else vi - gamma * Ui.apply(blk.r)
            out.append(blk.dual_resolvent(gamma, Ui, argi))
        return proto.pack(out[0], out[1:])

    schedules = [prob.metric_schedule] + [b.metric_schedule for b in prob.blocks]

    def metrics(n):
        if not prob.blocks:
            return prob.metric_schedule(n)
        return MetricOperator.block([s(n) for s in schedules], sizes)

    product_schedule = MetricSchedule(
        metrics,
        mu=max(s.mu for s in schedules),
        alpha=min(s.alpha for s in schedules),
        eta=lambda n: max(s.eta(n) for s in schedules),
        eta_sum_bound=sum(s.eta_sum_bound for s in schedules),
        name="product",
    )
    return replace(
        proto,
        A=ResolventOperator(resolvent, "product A"),
        B=LipschitzMap(B, lipschitz_aggregate(prob), "product B"),
        metric_schedule=product_schedule,
    )


# ---------------------------------------------------------------------------
# Optimality certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertificateReport:
    primal_residual: float
    dual_residuals: tuple[float, ...]

    @property
    def max_residual(self) -> float:
        return max((self.primal_residual,) + self.dual_residuals)


def recover_certificates(prob: PrimalDualProblem, state: ProductState | tuple) -> CertificateReport:
    """Fixed-point residuals of the two optimality inclusions.

    ``z - sum L_j^* v_j - C x in A x`` is measured as
    ``||x - J_A(x + z - sum L_j^* v_j - C x)||`` and ``L_i x - r_i in B_i^{-1} v_i``
    as ``||v_i - J_{B_i^{-1}}(v_i + L_i x - r_i)||``.  ``state`` is a
    :class:`ProductState` (its latest ``p`` values are used) or a pair
    ``(x, [v_1, ..., v_m])``.
    """
    if isinstance(state, ProductState):
        x, v = state.p1_prev, state.p2_prev
    else:
        x, v = state
        x = np.asarray(x, dtype=float)
        v = tuple(np.asarray(vi, dtype=float) for vi in v)
    identity = MetricOperator.identity()
    g = -prob.forward(x, v)
    if prob.z is not None:
        g = g + prob.z
    primal = float(np.linalg.norm(np.ravel(x - prob.A(1.0, identity, x + g))))
    duals = []
    for blk, vi in zip(prob.blocks, v):
        s = blk.L(x) if blk.r is None else blk.L(x) - blk.r
        duals.append(float(np.linalg.norm(np.ravel(vi - blk.dual_resolvent(1.0, identity, vi + s)))))
    return CertificateReport(primal, tuple(duals))
