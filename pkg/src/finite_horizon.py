# src/finite_horizon.py
"""
Finite-horizon impulse control with an impulse budget.

w^0(t) accumulates the reward backwards; for budget n,
    w^n(T) = M~w^{n-1}(T),   w^n(t) = min(M~w^{n-1}(t), ln Q e^{w^n(t + delta)})
with M~h = min(Mh, h) applied once per grid time.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from src.cost_model import CostTable, apply_M
from src.errors import ModelError, VerificationError
from src.semigroup_mpe import tilted_operator
from src.state_models import StepKernel, dyadic_ladder
from src.stopping_solver import finite_horizon_stopping
from src.utils import log_apply, steps_for_horizon

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-9
STABLE_TOL = 1e-10
BOUND_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FiniteHorizonValue:
    n: int
    m: Optional[int]
    T: float
    times: np.ndarray
    surfaces: np.ndarray

    @property
    def surface(self) -> np.ndarray:
        """w^n on the time grid, shape (N + 1, n_states)."""
        return self.surfaces[self.n]

    def initial_values(self, budget: Optional[int] = None) -> np.ndarray:
        return self.surfaces[self.n if budget is None else budget, 0]

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for b in range(self.n + 1):
            for j, t in enumerate(self.times):
                for x, value in enumerate(self.surfaces[b, j]):
                    out.append({"n": b, "m": -1 if self.m is None else self.m, "t": float(t),
                                "state_index": x, "value": float(value)})
        return out


@dataclass(frozen=True)
class BudgetReport:
    values: List[float]
    n_star: int
    bound: int
    within_bound: bool


@dataclass(frozen=True)
class GridReport:
    levels: List[int]
    values: Dict[int, float]
    gaps: Dict[int, float]
    ratios: Dict[int, float]
    monotone: bool


def modified_M(h: np.ndarray, cost: CostTable) -> np.ndarray:
    """M~h = min(Mh, h) for one time slice."""
    return np.minimum(apply_M(h, cost).values, h)


def solve_finite_horizon(k: StepKernel, cost: CostTable, T: float, n: int) -> FiniteHorizonValue:
    """Nested backward induction for budgets 0..n.

    Raises:
        ModelError: T is not a multiple of the kernel step or n < 0.
        VerificationError: budget monotonicity or the T ||f|| bound fails.
    """
    if n < 0:
        raise ModelError(f"impulse budget must be nonnegative, got {n}")
    if cost.n_states != k.n_states:
        raise ModelError(f"cost table has {cost.n_states} states, kernel has {k.n_states}")
    steps = steps_for_horizon(T, k.delta)
    Q = tilted_operator(k, cost.f)
    surfaces = np.empty((n + 1, steps + 1, k.n_states))

    surfaces[0, steps] = 0.0
    for j in range(steps - 1, -1, -1):
        surfaces[0, j] = log_apply(Q, surfaces[0, j + 1])

    for b in range(1, n + 1):
        previous = surfaces[b - 1]
        surfaces[b, steps] = modified_M(previous[steps], cost)
        for j in range(steps - 1, -1, -1):
            surfaces[b, j] = np.minimum(modified_M(previous[j], cost), log_apply(Q, surfaces[b, j + 1]))

    _check_surfaces(surfaces, T, cost)
    logger.debug("Finite horizon solved: level=%s, T=%g, budget=%d", k.level, T, n)
    return FiniteHorizonValue(n=n, m=k.level, T=float(T), times=np.arange(steps + 1) * k.delta,
                              surfaces=surfaces)


def _check_surfaces(surfaces: np.ndarray, T: float, cost: CostTable) -> None:
    bound = T * cost.f_norm + BOUND_TOL
    worst = float(np.max(np.abs(surfaces)))
    if worst > bound:
        raise VerificationError(f"finite-horizon value {worst:.12g} exceeds T ||f|| = {T * cost.f_norm:.12g}")
    if surfaces.shape[0] > 1:
        increase = float(np.max(surfaces[1:] - surfaces[:-1]))
        if increase > MONOTONE_TOL:
            raise VerificationError(f"larger impulse budget increased the value by {increase:.3e}")


def budget_convergence(k: StepKernel, cost: CostTable, T: float, n_max: int, state: int = 0) -> BudgetReport:
    """w^n(0, state) for n = 0..n_max and n*, the first budget whose successor improves by <= 1e-10.

    n* = n_max when every successive difference exceeds the tolerance.
    """
    solved = solve_finite_horizon(k, cost, T, n_max)
    values = [float(v) for v in solved.surfaces[:, 0, state]]
    if any(b > a + MONOTONE_TOL for a, b in zip(values, values[1:])):
        raise VerificationError(f"budget sequence is not monotone: {values}")
    n_star = next((b for b in range(n_max) if values[b] - values[b + 1] <= STABLE_TOL), n_max)
    bound = math.ceil(2.0 * T * cost.f_norm / cost.c0) + 1
    within = n_star <= bound
    if n_max >= bound and not within:
        raise VerificationError(f"budget stabilized at n*={n_star}, beyond the bound {bound}")
    return BudgetReport(values=values, n_star=n_star, bound=bound, within_bound=within)


def grid_convergence(finest: StepKernel, cost: CostTable, T: float, n: int,
                     m_min: int = 0, state: int = 0) -> GridReport:
    """w^n_m(0, state) along the squared ladder; finer levels may only lower the value.

    Raises:
        VerificationError: some level-(m+1) surface exceeds the level-m one at a common time.
    """
    ladder = dyadic_ladder(finest, m_min)
    levels = sorted(ladder)
    solved = {m: solve_finite_horizon(ladder[m], cost, T, n) for m in levels}
    for coarse, fine in zip(levels, levels[1:]):
        coarse_surface = solved[coarse].surface
        fine_surface = solved[fine].surface[::2]
        excess = float(np.max(fine_surface - coarse_surface))
        if excess > MONOTONE_TOL:
            raise VerificationError(f"level {fine} value exceeds level {coarse} by {excess:.3e}")

    values = {m: float(solved[m].surface[0, state]) for m in levels}
    gaps = {m: values[m] - values[m + 1] for m in levels[:-1]}
    ratios = {m: gaps[m] / gaps[m + 1] for m in levels[:-2] if gaps[m + 1] > 0}
    return GridReport(levels=levels, values=values, gaps=gaps, ratios=ratios, monotone=True)


def stopping_crosscheck(k: StepKernel, cost: CostTable, value: FiniteHorizonValue) -> float:
    """Max |w^n - ln u| where u solves the finite-horizon stopping problem with
    running cost f and stopping reward M~w^{n-1}."""
    if value.n < 1:
        raise ModelError("the stopping formulation needs a budget of at least 1")
    previous = value.surfaces[value.n - 1]
    G = np.stack([modified_M(row, cost) for row in previous])
    surface = finite_horizon_stopping(k, cost.f, G, value.T)
    return float(np.max(np.abs(np.log(surface.u) - value.surface)))


__all__ = [
    "FiniteHorizonValue",
    "BudgetReport",
    "GridReport",
    "modified_M",
    "solve_finite_horizon",
    "budget_convergence",
    "grid_convergence",
    "stopping_crosscheck",
]
