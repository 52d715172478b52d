"""Small problems with known solutions, shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fbf_solver import InclusionProblem
from .operators import (
    LinearMap,
    LipschitzMap,
    ResolventOperator,
    abs_value,
    box01,
)
from .primal_dual import Block, PrimalDualProblem

__all__ = ["Toy", "TOYS", "make_toy", "bilinear", "l1quad", "stationary", "interval_abs"]


@dataclass(frozen=True)
class Toy:
    name: str
    problem: InclusionProblem
    solution: np.ndarray
    x0: np.ndarray
    gamma: float


def bilinear() -> Toy:
    """Saddle point of ``x * y``: ``B(x, y) = (y, -x)``, zero at the origin."""
    M = np.array([[0.0, 1.0], [-1.0, 0.0]])
    prob = InclusionProblem(ResolventOperator.zero(), LipschitzMap(lambda w: M @ w, 1.0, "bilinear"), (2,))
    return Toy("bilinear", prob, np.zeros(2), np.array([1.0, 1.0]), 0.3)


def l1quad() -> Toy:
    """``0 in d|x| + (x - 1)``; the unique zero is ``x = 0``."""
    prob = InclusionProblem(
        ResolventOperator.subdifferential(abs_value()),
        LipschitzMap(lambda x: x - 1.0, 1.0, "x-1"),
        (1,),
    )
    return Toy("l1quad", prob, np.zeros(1), np.array([5.0]), 0.3)


def stationary() -> Toy:
    """``A = B = 0``: every point is a zero, so iterates never move."""
    prob = InclusionProblem(ResolventOperator.zero(), LipschitzMap.zero(), (3,))
    x0 = np.array([0.25, -1.0, 2.0])
    return Toy("stationary", prob, x0.copy(), x0, 0.3)


TOYS = {"bilinear": bilinear, "l1quad": l1quad, "stationary": stationary}


def make_toy(name: str) -> Toy:
    try:
        return TOYS[name]()
    except KeyError:
        raise ValueError(f"unknown toy {name!r}; expected one of {', '.join(TOYS)}") from None


def interval_abs(z: float = 0.5) -> PrimalDualProblem:
    """``min_{x in [0,1]} |x| - z x`` as a one-block primal-dual problem."""
    block = Block.from_function(LinearMap.identity((1,)), abs_value(), name="abs")
    return PrimalDualProblem.minimization(
        box01(), LipschitzMap.zero(), [block], (1,), z=np.array([z]),
        h=lambda x: 0.0,
    )

