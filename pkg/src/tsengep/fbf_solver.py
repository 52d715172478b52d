"""Forward-backward-forward iterations for ``0 in A x + B x``.

Two engines are provided:

* :func:`step_tseng_classic` -- Tseng's method, two evaluations of ``B`` per
  iteration.
* :func:`step_tseng_ep` -- the variable-metric scheme with extrapolation from
  the past and additive errors::

      y_n     = x_n - gamma_n U_n (B(p_{n-1}) + a_n)
      p_n     = J_{gamma_n U_n A}(y_n) + b_n
      q_n     = p_n - gamma_n U_n (B(p_n) + c_n)
      x_{n+1} = x_n - y_n + q_n

  ``B(p_{n-1})`` is carried over from the previous step, so each iteration
  needs a single fresh evaluation of ``B``.

:func:`run` drives either engine with stopping rules and a per-iteration trace.
"""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .metric_algebra import MetricOperator, MetricSchedule, weighted_norm
from .operators import LipschitzMap, ResolventOperator

__all__ = [
    "SolverError",
    "StepsizeError",
    "NonFiniteError",
    "InclusionProblem",
    "ErrorSchedule",
    "StopRule",
    "StopReason",
    "SolverConfig",
    "IterateState",
    "TraceRecord",
    "RunResult",
    "StepsizeReport",
    "validate_stepsize",
    "step_tseng_classic",
    "step_tseng_ep",
    "step_ogda_direct",
    "run",
    "run_classic",
    "write_trace_csv",
    "TRACE_COLUMNS",
]


class SolverError(RuntimeError):
    pass


class StepsizeError(SolverError, ValueError):
    """Configuration violates the stepsize or summability hypotheses."""


class NonFiniteError(SolverError, FloatingPointError):
    """An intermediate of the iteration became NaN or infinite."""


def _check_finite(value: np.ndarray, line: str, n: int) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value in line '{line}' at iteration n={n}")
    return value


@dataclass(frozen=True)
class InclusionProblem:
    """Find ``x`` with ``0 in A x + B x``; ``B`` monotone and ``beta``-Lipschitz."""

    A: ResolventOperator
    B: LipschitzMap
    shape: tuple[int, ...]

    @property
    def beta(self) -> float:
        return self.B.beta

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))


# ---------------------------------------------------------------------------
# Errors, stopping rules, configuration
# ---------------------------------------------------------------------------


ErrorRule = Callable[[int], "float | np.ndarray"]


@dataclass(frozen=True)
class ErrorSchedule:
    """Absolutely summable error sequences ``a_n, b_n, c_n``.

    Each rule maps ``n`` to an array or a scalar (broadcast to every
    coordinate); ``None`` means identically zero.  ``certificate(dim)`` is a
    closed-form upper bound on ``sum_n ||e_n||`` for each of the three
    sequences, ``inf`` when no bound is known.
    """

    a: ErrorRule | None = None
    b: ErrorRule | None = None
    c: ErrorRule | None = None
    certificate: Callable[[int], float] = lambda dim: 0.0
    name: str = "none"

    @property
    def is_zero(self) -> bool:
        return self.a is None and self.b is None and self.c is None

    @classmethod
    def none(cls) -> "ErrorSchedule":
        return cls()

    @classmethod
    def from_sequence(cls, seq: Callable[[int], float], series_total: float, name: str = "custom") -> "ErrorSchedule":
        """``a_n = b_n = c_n = seq(n + 1)`` on every coordinate.

        ``series_total`` must bound ``sum_{k>=1} |seq(k)|``.
        """
        rule = lambda n: seq(n + 1)  # noqa: E731
        return cls(rule, rule, rule, lambda dim: series_total * math.sqrt(dim), name)

    def check(self, dim: int, horizon: int = 1000) -> None:
        """Verify the partial sums of the first ``horizon`` terms against the certificate."""
        bound = self.certificate(dim)
        if not math.isfinite(bound):
            raise StepsizeError(f"error schedule {self.name!r} has no finite summability certificate")
        for label, rule in (("a", self.a), ("b", self.b), ("c", self.c)):
            if rule is None:
                continue
            total = 0.0
            for n in range(horizon):
                e = rule(n)
                total += float(np.linalg.norm(e)) * (math.sqrt(dim) if np.ndim(e) == 0 else 1.0)
                if total > bound * (1 + 1e-12):
                    raise StepsizeError(
                        f"partial sum of ||{label}_n|| exceeds the certificate {bound:.6g} at n={n}"
                    )

    def at(self, n: int) -> tuple:
        return tuple(None if r is None else r(n) for r in (self.a, self.b, self.c))


class StopReason(str, enum.Enum):
    STEP_NORM = "step_norm"
    FVAL_GAP = "fval_gap"
    DIST_TO_REF = "dist_to_ref"
    BUDGET = "budget"


@dataclass(frozen=True)
class StopRule:
    """Stop when ``||x_n - x_{n+1}||``, ``|f(p_n) - f_ref|`` or ``||p_n - x_ref||`` drops below ``tol``."""

    kind: StopReason
    tol: float
    reference: float | np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StopReason(self.kind))
        if not self.tol > 0:
            raise ValueError("stopping tolerance must be positive")
        if self.kind in (StopReason.FVAL_GAP, StopReason.DIST_TO_REF) and self.reference is None:
            raise ValueError(f"stop rule {self.kind.value} needs a reference value")
        if self.kind is StopReason.BUDGET:
            raise ValueError("budget is not a tolerance rule; use max_iters")


@dataclass(frozen=True)
class SolverConfig:
    """Stepsizes, metrics, errors and stopping rules for one run.

    ``gamma`` is a constant or a rule ``n -> gamma_n``.  For rules,
    ``lambda_cap`` (an upper bound on every ``gamma_n``) and ``gamma_floor``
    (a positive lower bound on ``liminf gamma_n``) must be declared.
    """

    gamma: float | Callable[[int], float]
    lambda_cap: float | None = None
    gamma_floor: float | None = None
    metric_schedule: MetricSchedule = field(default_factory=MetricSchedule.identity)
    errors: ErrorSchedule = field(default_factory=ErrorSchedule.none)
    max_iters: int = 1000
    stop_rule: StopRule | None = None
    trace_every: int = 1
    allow_unsafe_stepsize: bool = False
    allow_nonsummable: bool = False

    def __post_init__(self):
        if callable(self.gamma):
            if self.lambda_cap is None or self.gamma_floor is None:
                raise ValueError("a gamma rule needs declared lambda_cap and gamma_floor")
        else:
            g = float(self.gamma)
            object.__setattr__(self, "gamma", g)
            if self.lambda_cap is None:
                object.__setattr__(self, "lambda_cap", g)
            if self.gamma_floor is None:
                object.__setattr__(self, "gamma_floor", g)
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")

    def gamma_at(self, n: int) -> float:
        return float(self.gamma(n)) if callable(self.gamma) else self.gamma

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class StepsizeReport:
    ok: bool
    rule: str
    bound: float
    value: float
    message: str

    def __bool__(self) -> bool:
        return self.ok


def validate_stepsize(
    config: SolverConfig, beta: float, mu: float, error_free: bool | None = None, horizon: int = 1000
) -> StepsizeReport:
    """Check the stepsize hypotheses; never raises for a violation.

    With errors: ``gamma_n <= lambda_cap < 1 / (sqrt(10) mu beta)``.  Error
    free: ``sup gamma_n < 1 / (2 mu beta)``.  Both need ``gamma_floor > 0``.
    """
    if not (beta > 0 and mu > 0):
        raise ValueError("beta and mu must be positive")
    if error_free is None:
        error_free = config.errors.is_zero
    cap = float(config.lambda_cap)
    floor = float(config.gamma_floor)
    sup_seen = max(config.gamma_at(n) for n in range(horizon if callable(config.gamma) else 1))
    low_seen = min(config.gamma_at(n) for n in range(horizon if callable(config.gamma) else 1))
    if sup_seen > cap:
        return StepsizeReport(False, "gamma_n <= lambda_cap", cap, sup_seen,
                              f"gamma_n reaches {sup_seen:.6g} above the declared cap {cap:.6g}")
    if not floor > 0 or low_seen < floor:
        return StepsizeReport(False, "liminf gamma_n > 0", floor, low_seen,
                              f"declared lower bound {floor:.6g} is not a positive bound on gamma_n")
    if error_free:
        bound = 1.0 / (2.0 * mu * beta)
        rule = "sup gamma_n < 1/(2 mu beta)"
    else:
        bound = 1.0 / (math.sqrt(10.0) * mu * beta)
        rule = "lambda < 1/(sqrt(10) mu beta)"
    if cap < bound:
        return StepsizeReport(True, rule, bound, cap, f"{cap:.6g} < {bound:.6g}")
    return StepsizeReport(False, rule, bound, cap, f"stepsize cap {cap:.6g} violates {rule} = {bound:.6g}")


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterateState:
    """``x_n``, ``p_{n-1}`` and the cached ``B(p_{n-1})``."""

    x: np.ndarray
    p_prev: np.ndarray
    n: int = 0
    Bp_prev: np.ndarray | None = None


def step_tseng_classic(prob: InclusionProblem, x: np.ndarray, gamma: float) -> np.ndarray:
    """One step of Tseng's method in the identity metric."""
    return _tseng_classic(prob, x, gamma)[0]


def _tseng_classic(prob, x, gamma):
    identity = MetricOperator.identity()
    Bx = prob.B(x)
    y = prob.A(gamma, identity, x - gamma * Bx)
    By = prob.B(y)
    return y + gamma * (Bx - By), y


def _add(v: np.ndarray, e) -> np.ndarray:
    return v if e is None else v + e


def _tseng_ep(prob: InclusionProblem, state: IterateState, gamma: float, U: MetricOperator, errors: tuple):
    n = state.n
    a, b, c = errors
    Bp_prev = state.Bp_prev if state.Bp_prev is not None else prob.B(state.p_prev)
    # x_n - y_n is exactly this correction; reusing it keeps line 4 free of cancellation
    d = _check_finite(gamma * U.apply(_add(Bp_prev, a)), "y_n = x_n - gamma_n U_n (B(p_{n-1}) + a_n)", n)
    y = state.x - d
    p = _check_finite(_add(prob.A(gamma, U, y), b), "p_n = J(y_n) + b_n", n)
    Bp = prob.B(p)
    q = _check_finite(p - gamma * U.apply(_add(Bp, c)), "q_n = p_n - gamma_n U_n (B(p_n) + c_n)", n)
    x_next = d + q
    return IterateState(x_next, p, n + 1, Bp), y, p, q


def step_tseng_ep(prob: InclusionProblem, state: IterateState, config: SolverConfig) -> IterateState:
    """One iteration of the variable-metric scheme; returns ``(x_{n+1}, p_n)``."""
    n = state.n
    return _tseng_ep(prob, state, config.gamma_at(n), config.metric_schedule(n), config.errors.at(n))[0]


def step_ogda_direct(prob: InclusionProblem, p: np.ndarray, p_prev: np.ndarray, gamma: float) -> np.ndarray:
    """``J_{gamma A}(p - 2 gamma B(p) + gamma B(p_prev))`` in the identity metric."""
    Bp = prob.B(p)
    arg = (gamma * prob.B(p_prev) + (p - gamma * Bp)) - gamma * Bp
    return prob.A(gamma, MetricOperator.identity(), arg)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


TRACE_COLUMNS = ("n", "step_norm", "residual", "fval", "elapsed_s")


@dataclass(frozen=True)
class TraceRecord:
    n: int
    step_norm: float
    residual: float
    yq_residual: float = math.nan
    fval: float = math.nan
    elapsed_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self, columns: Sequence[str]) -> list:
        out = []
        for col in columns:
            out.append(getattr(self, col) if hasattr(self, col) else self.extra.get(col, math.nan))
        return out


@dataclass
class RunResult:
    """Solution estimate ``p_n``, trace and why the run stopped.

    Unpacks as ``solution, trace, reason``.
    """

    solution: np.ndarray
    trace: list[TraceRecord]
    reason: StopReason
    iterations: int
    forward_evals: int
    state: object = None
    seconds: float = 0.0

    def __iter__(self):
        return iter((self.solution, self.trace, self.reason))


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.fn(x)


def _stop_check(rule: StopRule | None, step_norm, estimate, fval) -> StopReason | None:
    if rule is None:
        return None
    if rule.kind is StopReason.STEP_NORM:
        hit = step_norm < rule.tol
    elif rule.kind is StopReason.FVAL_GAP:
        hit = abs(fval - rule.reference) < rule.tol
    else:
        hit = float(np.linalg.norm(np.ravel(estimate - rule.reference))) < rule.tol
    return rule.kind if hit else None


def _norm(v) -> float:
    return float(np.linalg.norm(np.ravel(v)))


def run(
    prob: InclusionProblem,
    config: SolverConfig,
    x0,
    p_init=None,
    objective: Callable[[np.ndarray], float] | None = None,
    callback: Callable[[int, IterateState], None] | None = None,
    estimate_map: Callable[[np.ndarray], np.ndarray] | None = None,
) -> RunResult:
    """Iterate :func:`step_tseng_ep` until the stop rule fires or ``max_iters`` is spent.

    ``p_init`` is ``p_{-1}`` and defaults to ``x0``.  The returned solution is
    ``p_n`` from the last step (``p_init`` if no step was taken).  A
    ``dist_to_ref`` rule compares ``estimate_map(p_n)`` (default ``p_n``) with
    the reference, which lets product-space runs stop on one block.
    """
    x0 = np.array(x0, dtype=float)
    p_init = x0.copy() if p_init is None else np.array(p_init, dtype=float)
    _validate(config, prob.beta, config.metric_schedule.mu, x0.size)
    if config.stop_rule is not None and config.stop_rule.kind is StopReason.FVAL_GAP and objective is None:
        raise ValueError("fval_gap stopping needs an objective callback")

    counted = _Counted(prob.B.apply)
    cprob = replace(prob, B=replace(prob.B, apply=counted))
    state = IterateState(x0, p_init, 0, None)
    trace: list[TraceRecord] = []
    solution = p_init
    reason = StopReason.BUDGET
    start = time.perf_counter()
    n_done = 0
    for n in range(config.max_iters):
        new, y, p, q = _tseng_ep(
            cprob, state, config.gamma_at(n), config.metric_schedule(n), config.errors.at(n)
        )
        step_norm = _norm(state.x - new.x)
        fval = objective(p) if objective is not None else math.nan
        if n % config.trace_every == 0:
            trace.append(
                TraceRecord(n, step_norm, _norm(state.x - p), _norm(y - q), fval, time.perf_counter() - start)
            )
        solution = p
        state = new
        n_done = n + 1
        if callback is not None:
            callback(n, state)
        hit = _stop_check(config.stop_rule, step_norm, p if estimate_map is None else estimate_map(p), fval)
        if hit is not None:
            reason = hit
            break
    return RunResult(solution, trace, reason, n_done, counted.calls, state, time.perf_counter() - start)


def run_classic(
    prob: InclusionProblem,
    config: SolverConfig,
    x0,
    objective: Callable[[np.ndarray], float] | None = None,
    estimate_map: Callable[[np.ndarray], np.ndarray] | None = None,
) -> RunResult:
    """Tseng's method with the stepsizes of ``config`` (identity metric, no errors).

    The solution estimate is ``y_n``, the resolvent output.  Requires
    ``gamma_n * beta < 1``.
    """
    if not config.errors.is_zero:
        raise ValueError("classical Tseng runs take no error terms")
    if config.lambda_cap * prob.beta >= 1 and not config.allow_unsafe_stepsize:
        raise StepsizeError(f"classical Tseng needs gamma*beta < 1, got {config.lambda_cap * prob.beta:.6g}")
    counted = _Counted(prob.B.apply)
    cprob = replace(prob, B=replace(prob.B, apply=counted))
    x = np.array(x0, dtype=float)
    solution = x
    trace: list[TraceRecord] = []
    reason = StopReason.BUDGET
    start = time.perf_counter()
    n_done = 0
    for n in range(config.max_iters):
        x_next, y = _tseng_classic(cprob, x, config.gamma_at(n))
        _check_finite(x_next, "x_{n+1} = y_n + gamma (B x_n - B y_n)", n)
        step_norm = _norm(x - x_next)
        fval = objective(y) if objective is not None else math.nan
        if n % config.trace_every == 0:
            trace.append(TraceRecord(n, step_norm, _norm(x - y), math.nan, fval, time.perf_counter() - start))
        x, solution, n_done = x_next, y, n + 1
        hit = _stop_check(config.stop_rule, step_norm, y if estimate_map is None else estimate_map(y), fval)
        if hit is not None:
            reason = hit
            break
    return RunResult(solution, trace, reason, n_done, counted.calls, x, time.perf_counter() - start)


def _validate(config: SolverConfig, beta: float, mu: float, dim: int) -> None:
    if not config.errors.is_zero and not config.allow_nonsummable:
        config.errors.check(dim)
    if config.allow_unsafe_stepsize or beta == 0:
        return
    report = validate_stepsize(config, beta, mu)
    if not report.ok:
        raise StepsizeError(report.message)


def write_trace_csv(path, records: Iterable[TraceRecord], columns: Sequence[str] = TRACE_COLUMNS,
                    timing: bool = True) -> None:
    """Write a trace as CSV; without ``timing`` the ``elapsed_s`` column is left blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            row = rec.row(columns)
            writer.writerow(
                [_fmt(v) if (col != "elapsed_s" or timing) else "" for col, v in zip(columns, row)]
            )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
