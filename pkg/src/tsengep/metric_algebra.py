"""Symmetric positive definite metrics and the schedules built from them.

A metric ``U`` induces the inner product ``<x, y>_U = <U x, y>`` and the norm
``||x||_U = sqrt(<U x, x>)``.  Three storage kinds are supported: a positive
scalar multiple of the identity, a positive diagonal, and a dense SPD matrix.
Product spaces use a fourth, block-diagonal kind assembled from those.
Vectors are plain numpy arrays of any shape; dense metrics act on the
row-major flattening.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

__all__ = [
    "MetricError",
    "MetricOperator",
    "MetricSchedule",
    "weighted_inner",
    "weighted_norm",
    "check_loewner_step",
    "scalar_rule",
    "SCALAR_RULES",
]


class MetricError(ValueError):
    """Raised for invalid metrics, dimension mismatches or broken schedules."""


@dataclass(frozen=True, eq=False)
class MetricOperator:
    """SPD linear operator with ``apply`` and ``apply_inverse``.

    Use the :meth:`scalar`, :meth:`diagonal` and :meth:`dense` constructors
    rather than instantiating directly.
    """

    kind: str
    data: float | np.ndarray
    alpha: float
    norm_bound: float
    _chol: tuple | None = field(default=None, repr=False)

    @classmethod
    def scalar(cls, tau: float) -> "MetricOperator":
        tau = float(tau)
        if not (math.isfinite(tau) and tau > 0):
            raise MetricError(f"scalar metric needs tau > 0, got {tau}")
        return cls("scalar", tau, tau, tau)

    @classmethod
    def identity(cls) -> "MetricOperator":
        return cls.scalar(1.0)

    @classmethod
    def diagonal(cls, d) -> "MetricOperator":
        d = np.array(d, dtype=float)
        if d.size == 0 or not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise MetricError("diagonal metric needs finite, strictly positive entries")
        d.setflags(write=False)
        return cls("diagonal", d, float(d.min()), float(d.max()))

    @classmethod
    def dense(cls, matrix, alpha: float, norm_bound: float, *, probes: int = 16) -> "MetricOperator":
        """Dense SPD metric.

        ``alpha`` and ``norm_bound`` are taken as given; they are spot-checked
        with ``probes`` seeded random Rayleigh quotients, not computed.
        """
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise MetricError("dense metric must be a square matrix")
        if not np.all(np.isfinite(m)):
            raise MetricError("dense metric has non-finite entries")
        scale = max(1.0, float(np.abs(m).max()))
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * scale):
            raise MetricError("dense metric is not symmetric")
        if not (alpha > 0 and norm_bound >= alpha):
            raise MetricError("dense metric needs 0 < alpha <= norm_bound")
        rng = np.random.default_rng(0)
        for _ in range(probes):
            x = rng.standard_normal(m.shape[0])
            rq = x @ m @ x / (x @ x)
            if rq < alpha * (1 - 1e-12) or rq > norm_bound * (1 + 1e-12):
                raise MetricError(
                    f"Rayleigh quotient {rq:.6g} outside [alpha, norm_bound] = [{alpha}, {norm_bound}]"
                )
        try:
            chol = cho_factor(m, lower=True)
        except np.linalg.LinAlgError as exc:
            raise MetricError("dense metric is not positive definite") from exc
        m.setflags(write=False)
        return cls("dense", m, float(alpha), float(norm_bound), chol)

    @classmethod
    def block(cls, parts: list["MetricOperator"], sizes: list[int]) -> "MetricOperator":
        """Block-diagonal metric on a concatenation of flat segments of the given sizes."""
        if len(parts) != len(sizes) or not parts:
            raise MetricError("block metric needs one size per part")
        for part, size in zip(parts, sizes):
            if part.dim is not None and part.dim != size:
                raise MetricError(f"block part has {part.dim} coordinates, segment has {size}")
        return cls(
            "block",
            (tuple(parts), tuple(int(s) for s in sizes)),
            min(p.alpha for p in parts),
            max(p.norm_bound for p in parts),
        )

    @property
    def parts(self) -> tuple["MetricOperator", ...]:
        return self.data[0] if self.kind == "block" else (self,)

    @property
    def dim(self) -> int | None:
        """Number of coordinates, or ``None`` for scalar metrics (any size)."""
        if self.kind == "scalar":
            return None
        if self.kind == "diagonal":
            return int(self.data.size)
        if self.kind == "block":
            return int(sum(self.data[1]))
        return int(self.data.shape[0])

    def _blockwise(self, x: np.ndarray, method: str) -> np.ndarray:
        parts, sizes = self.data
        flat = x.ravel()
        out, start = [], 0
        for part, size in zip(parts, sizes):
            out.append(getattr(part, method)(flat[start:start + size]))
            start += size
        return np.concatenate(out).reshape(x.shape)

    def _check(self, x: np.ndarray) -> None:
        dim = self.dim
        if dim is not None and x.size != dim:
            raise MetricError(f"dimension mismatch: metric has {dim} coordinates, vector has {x.size}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "scalar":
            return self.data * x
        self._check(x)
        if self.kind == "diagonal":
            return self.data.reshape(x.shape) * x
        if self.kind == "block":
            return self._blockwise(x, "apply")
        return (self.data @ x.ravel()).reshape(x.shape)

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "scalar":
            return x / self.data
        self._check(x)
        if self.kind == "diagonal":
            return x / self.data.reshape(x.shape)
        if self.kind == "block":
            return self._blockwise(x, "apply_inverse")
        return cho_solve(self._chol, x.ravel()).reshape(x.shape)

    def as_matrix(self, dim: int) -> np.ndarray:
        if self.kind == "scalar":
            return self.data * np.eye(dim)
        if self.dim != dim:
            raise MetricError(f"dimension mismatch: metric has {self.dim} coordinates, asked for {dim}")
        if self.kind == "diagonal":
            return np.diag(self.data.ravel())
        if self.kind == "block":
            return block_diag(*(p.as_matrix(s) for p, s in zip(*self.data)))
        return np.array(self.data)


def weighted_inner(x, y, U: MetricOperator) -> float:
    """``<U x, y>``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise MetricError(f"dimension mismatch: {x.size} vs {y.size}")
    return float(np.vdot(U.apply(x).ravel(), y.ravel()))


def weighted_norm(x, U: MetricOperator) -> float:
    return math.sqrt(max(weighted_inner(x, x, U), 0.0))


def check_loewner_step(U_next: MetricOperator, U: MetricOperator, eta: float) -> bool:
    """Test ``(1 + eta) U_next >= U`` in the Loewner order.

    Exact for scalar and diagonal metrics.  If either side is dense both are
    promoted to dense and the smallest eigenvalue of the difference is
    compared against a round-off floor.
    """
    if eta < 0:
        raise MetricError("eta must be nonnegative")
    if U_next.dim is not None and U.dim is not None and U_next.dim != U.dim:
        raise MetricError(f"dimension mismatch: {U_next.dim} vs {U.dim}")
    if U_next.kind == "block" and U.kind == "block" and U_next.data[1] == U.data[1]:
        return all(check_loewner_step(a, b, eta) for a, b in zip(U_next.parts, U.parts))
    if U_next.kind in ("scalar", "diagonal") and U.kind in ("scalar", "diagonal"):
        lhs = (1.0 + eta) * np.ravel(U_next.data)
        return bool(np.all(lhs >= np.ravel(U.data)))
    dim = U_next.dim if U_next.dim is not None else U.dim
    diff = (1.0 + eta) * U_next.as_matrix(dim) - U.as_matrix(dim)
    floor = 1e-12 * max(U_next.norm_bound, U.norm_bound)
    return bool(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] >= -floor)


def _zero(n: int) -> float:
    return 0.0


@dataclass(frozen=True)
class MetricSchedule:
    """A rule ``n -> U_n`` with the constants needed by the convergence theory.

    ``eta_sum_bound`` is a closed-form upper bound on ``sum_n eta(n)`` supplied
    by whoever builds the schedule; ``mu`` bounds every ``||U_n||`` and
    ``alpha`` bounds every ``U_n`` from below.
    """

    metrics: Callable[[int], MetricOperator]
    mu: float
    alpha: float
    eta: Callable[[int], float] = _zero
    eta_sum_bound: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        if not (self.alpha > 0 and self.mu >= self.alpha):
            raise MetricError(f"schedule needs 0 < alpha <= mu, got alpha={self.alpha}, mu={self.mu}")
        if not (math.isfinite(self.eta_sum_bound) and self.eta_sum_bound >= 0):
            raise MetricError("schedule needs a finite bound on the sum of eta_n")

    def __call__(self, n: int) -> MetricOperator:
        return self.metrics(n)

    @classmethod
    def constant(cls, U: MetricOperator) -> "MetricSchedule":
        return cls(lambda n: U, mu=U.norm_bound, alpha=U.alpha, name="constant")

    @classmethod
    def identity(cls) -> "MetricSchedule":
        return cls.constant(MetricOperator.identity())

    def validate(self, horizon: int = 1000) -> None:
        """Check the Loewner step condition, eta summability and the bounds for n < horizon."""
        eta_sum = 0.0
        current = self(0)
        for n in range(horizon):
            nxt = self(n + 1)
            eta_n = self.eta(n)
            eta_sum += eta_n
            if eta_sum > self.eta_sum_bound * (1 + 1e-12) + 1e-15:
                raise MetricError(f"partial sum of eta exceeds the certified bound at n={n}")
            if current.norm_bound > self.mu * (1 + 1e-12):
                raise MetricError(f"||U_{n}|| = {current.norm_bound} exceeds mu = {self.mu}")
            if current.alpha < self.alpha * (1 - 1e-12):
                raise MetricError(f"U_{n} lower bound {current.alpha} below alpha = {self.alpha}")
            if not check_loewner_step(nxt, current, eta_n):
                raise MetricError(f"(1+eta_n) U_(n+1) >= U_n fails at n={n}")
            current = nxt


# Sequences use k = n + 2 so that every rule is strictly positive at n = 0.
_SEQUENCES: dict[str, Callable[[int], float]] = {
    "one-minus-inv-k": lambda k: 1.0 - 1.0 / k,
    "one-minus-inv-k2": lambda k: 1.0 - 1.0 / k**2,
    "one-minus-inv-k5": lambda k: 1.0 - 1.0 / k**5,
    "one-minus-inv-kk": lambda k: 1.0 - (1.0 / k) ** k,
    "k-over-k1": lambda k: k / (k + 1.0),
}

SCALAR_RULES = ("const:<v>",) + tuple(_SEQUENCES)


def scalar_rule(rule: str) -> MetricSchedule:
    """Build a scalar metric schedule ``U_n = s_n Id`` from a rule name.

    ``const:<v>`` is the constant ``v``; the others are nondecreasing
    sequences converging to 1, so ``eta_n = 0`` and ``mu = 1``.
    """
    m = re.fullmatch(r"const:(.+)", rule)
    if m:
        try:
            v = float(m.group(1))
        except ValueError as exc:
            raise MetricError(f"bad constant in metric rule {rule!r}") from exc
        U = MetricOperator.scalar(v)
        return MetricSchedule(lambda n: U, mu=v, alpha=v, name=rule)
    if rule not in _SEQUENCES:
        raise MetricError(f"unknown metric rule {rule!r}; expected one of {', '.join(SCALAR_RULES)}")
    seq = _SEQUENCES[rule]
    return MetricSchedule(
        lambda n: MetricOperator.scalar(seq(n + 2)), mu=1.0, alpha=seq(2), name=rule
    )
