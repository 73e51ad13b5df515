# src/cost_model.py
"""
Running reward f, shift cost c(x, xi) and the one-impulse operator
Mw(x) = min over xi in U of c(x, xi) + w(xi).

Cost tables are certified on construction: floor c >= c0 and the triangle
inequality c(x, y) <= c(x, z) + c(z, y) for x in E and y, z in U.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from src.errors import CostError
from src.state_models import StateGrid

logger = logging.getLogger(__name__)

COST_KINDS = ("metric_capped", "rational", "logistic", "explicit_table", "separable")
CERTIFICATE_TOL = 1e-12

_H_FAMILIES = {
    "metric_capped": lambda rho, cap: np.minimum(rho, cap),
    "rational": lambda rho, cap: rho / (1.0 + rho),
    "logistic": lambda rho, cap: expit(rho),
}


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Declarative shift-cost family.

    kind:
        metric_capped  c = min(rho, cap) + c0
        rational       c = rho / (1 + rho) + c0
        logistic       c = 1 / (1 + exp(-rho)) + c0
        explicit_table c given per (state, target) in ``table`` (shape n x |U|)
        separable      c = c0 + departure[x] + arrival[xi], both nonnegative
    """

    kind: str
    c0: float
    cap: float = math.inf
    table: Optional[np.ndarray] = None
    departure: Optional[np.ndarray] = None
    arrival: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.kind not in COST_KINDS:
            raise CostError(f"unknown cost kind {self.kind!r}; expected one of {COST_KINDS}")
        if not (math.isfinite(self.c0) and self.c0 > 0):
            raise CostError(f"cost floor c0 must be a positive real, got {self.c0}")
        if not self.cap >= 0:
            raise CostError(f"cap K must be nonnegative, got {self.cap}")
        if self.kind == "explicit_table" and self.table is None:
            raise CostError("explicit_table cost needs a table")
        if self.kind == "separable" and (self.departure is None or self.arrival is None):
            raise CostError("separable cost needs departure and arrival terms")


@dataclass(frozen=True, eq=False)
class CostTable:
    c: np.ndarray
    f: np.ndarray
    c0: float
    targets: Tuple[int, ...]
    f_norm: float
    c_norm: float

    @property
    def n_states(self) -> int:
        return int(self.c.shape[0])

    @property
    def target_array(self) -> np.ndarray:
        return np.asarray(self.targets, dtype=np.int64)

    def column_of(self, target: int) -> int:
        """Column of ``target`` in ``c``."""
        try:
            return self.targets.index(int(target))
        except ValueError:
            raise CostError(f"state {target} is not an impulse target") from None

    def shift_cost(self, x: int, target: int) -> float:
        return float(self.c[int(x), self.column_of(target)])

    def with_reward(self, f) -> "CostTable":
        """Same shift costs, different running reward."""
        f = _checked_reward(f, self.n_states)
        return CostTable(self.c, f, self.c0, self.targets, float(np.max(np.abs(f))), self.c_norm)


@dataclass(frozen=True, eq=False)
class MResult:
    values: np.ndarray
    argmin_shift: np.ndarray


def _checked_reward(f, n_states: int) -> np.ndarray:
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n_states, float(arr))
    if arr.shape != (n_states,):
        raise CostError(f"reward must have {n_states} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise CostError(f"reward is not finite at state {int(np.argmin(np.isfinite(arr)))}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def _raw_costs(spec: CostSpec, grid: StateGrid) -> np.ndarray:
    targets = list(grid.impulse_indices)
    if spec.kind in _H_FAMILIES:
        rho = grid.metric[:, targets]
        return _H_FAMILIES[spec.kind](rho, spec.cap) + spec.c0
    if spec.kind == "separable":
        departure = np.asarray(spec.departure, dtype=float)
        arrival = np.asarray(spec.arrival, dtype=float)
        if departure.shape != (grid.size,) or arrival.shape != (len(targets),):
            raise CostError(
                f"separable cost needs {grid.size} departure and {len(targets)} arrival terms"
            )
        if np.any(departure < 0) or np.any(arrival < 0):
            raise CostError("separable cost terms must be nonnegative")
        return spec.c0 + departure[:, None] + arrival[None, :]
    table = np.asarray(spec.table, dtype=float)
    if table.shape != (grid.size, len(targets)):
        raise CostError(f"cost table must have shape ({grid.size}, {len(targets)}), got {table.shape}")
    return table.copy()


def triangle_witness(c: np.ndarray, targets: Tuple[int, ...]) -> Optional[Tuple[int, int, int, float]]:
    """Worst (x, y, z, excess) with c(x,y) - c(x,z) - c(z,y) > tol, else None."""
    cu = c[list(targets), :]
    # excess[x, jz, jy] = c(x, y) - c(x, z) - c(z, y)
    excess = c[:, None, :] - c[:, :, None] - cu[None, :, :]
    worst = np.unravel_index(int(np.argmax(excess)), excess.shape)
    tol = CERTIFICATE_TOL * max(1.0, float(np.max(np.abs(c))))
    if excess[worst] > tol:
        x, jz, jy = (int(i) for i in worst)
        return x, targets[jy], targets[jz], float(excess[worst])
    return None


def build_cost(spec: CostSpec, grid: StateGrid, f) -> CostTable:
    """Evaluate the cost family on the grid and certify floor and triangle inequality.

    Raises:
        CostError: non-finite reward, floor violation or triangle violation (with the
            witnessing triple x, y, z).
    """
    f_arr = _checked_reward(f, grid.size)
    c = _raw_costs(spec, grid)
    if not np.all(np.isfinite(c)):
        raise CostError("cost table contains non-finite entries")

    below = c < spec.c0 - CERTIFICATE_TOL
    if np.any(below):
        x, j = (int(i) for i in np.argwhere(below)[0])
        raise CostError(
            f"cost floor violated: c({x},{grid.impulse_indices[j]}) = {c[x, j]:.6g} < c0 = {spec.c0:g}",
            witness=(x, grid.impulse_indices[j], grid.impulse_indices[j]),
        )

    witness = triangle_witness(c, grid.impulse_indices)
    if witness is not None:
        x, y, z, excess = witness
        raise CostError(
            f"triangle inequality violated: c({x},{y}) exceeds c({x},{z}) + c({z},{y}) by {excess:.6g}",
            witness=(x, y, z),
        )

    c.setflags(write=False)
    table = CostTable(
        c=c,
        f=f_arr,
        c0=float(spec.c0),
        targets=tuple(grid.impulse_indices),
        f_norm=float(np.max(np.abs(f_arr))),
        c_norm=float(np.max(c)),
    )
    logger.debug("Cost table built: kind=%s, |U|=%d, ||c||=%.4g", spec.kind, len(table.targets), table.c_norm)
    return table


def apply_M(w, cost: CostTable) -> MResult:
    """Mw(x) = min over xi in U of c(x, xi) + w(xi); ties go to the smallest index."""
    w = np.asarray(w, dtype=float)
    if w.shape != (cost.n_states,):
        raise CostError(f"w must have {cost.n_states} entries, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise CostError(f"w is not finite at state {int(np.argmin(np.isfinite(w)))}")
    candidates = cost.c + w[cost.target_array][None, :]
    best = np.argmin(candidates, axis=1)
    values = candidates[np.arange(cost.n_states), best]
    return MResult(values=values, argmin_shift=cost.target_array[best])


def impulse_chain_gap(w, cost: CostTable) -> float:
    """min over x of [min_xi c(x, xi) + Mw(xi)] - Mw(x); nonnegative under the triangle inequality."""
    Mw = apply_M(w, cost).values
    chained = np.min(cost.c + Mw[cost.target_array][None, :], axis=1)
    return float(np.min(chained - Mw))


def describe(cost: CostTable) -> Dict[str, float]:
    return {"c0": cost.c0, "c_norm": cost.c_norm, "f_norm": cost.f_norm, "n_targets": float(len(cost.targets))}


__all__ = [
    "COST_KINDS",
    "CostSpec",
    "CostTable",
    "MResult",
    "build_cost",
    "apply_M",
    "triangle_witness",
    "impulse_chain_gap",
    "describe",
]
