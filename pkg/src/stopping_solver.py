# src/stopping_solver.py
"""
Risk-sensitive optimal stopping on dyadic grids.

Infinite horizon: u = min(Q_g u, e^G) where Q_g is the tilted operator of the
kernel under running cost g, solved by monotone iteration from u_0 = e^G.
Finite horizon: backward induction on the time grid with time-dependent g and G.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple, Union

import numpy as np

from src.errors import ModelError, SolverError, VerificationError
from src.semigroup_mpe import tilted_operator
from src.state_models import StepKernel, dyadic_ladder
from src.utils import as_state_vector, steps_for_horizon

logger = logging.getLogger(__name__)

STOP_REGION_TOL = 1e-9
FIXED_POINT_TOL = 1e-12
MONOTONE_TOL = 1e-12
MAX_ITERS = 1_000_000

TimeProfile = Union[np.ndarray, Callable[[float], np.ndarray], float]


@dataclass(frozen=True, eq=False)
class StoppingSolution:
    u: np.ndarray
    stop_region: np.ndarray
    iterations: int
    residual: float
    max_increase: float

    @property
    def stop_states(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.stop_region))


@dataclass(frozen=True, eq=False)
class StoppingSurface:
    times: np.ndarray
    u: np.ndarray
    stop: np.ndarray


@dataclass(frozen=True, eq=False)
class StoppingLadder:
    values: Dict[int, np.ndarray]
    monotone: bool
    gaps: Dict[int, float]


def _stop_mask(u: np.ndarray, G: np.ndarray) -> np.ndarray:
    return np.abs(np.log(u) - G) <= STOP_REGION_TOL


def solve_dyadic_stopping(k: StepKernel, g, G, max_iters: int = MAX_ITERS) -> StoppingSolution:
    """Fixed point of u = min(Q_g u, e^G) by iteration from e^G.

    Raises:
        ModelError: min g <= 0 or G < 0 somewhere.
        SolverError: no convergence within max_iters.
    """
    g = as_state_vector(g, k.n_states, "g")
    G = as_state_vector(G, k.n_states, "G")
    if g.min() <= 0:
        raise ModelError(f"running cost g must be bounded below by a positive constant, min g = {g.min():g}")
    if G.min() < 0:
        raise ModelError(f"terminal cost G must be nonnegative, min G = {G.min():g}")

    Qg = tilted_operator(k, g)
    cap = np.exp(G)
    scale = max(1.0, float(cap.max()))
    u = cap.copy()
    max_increase = -np.inf
    for iteration in range(1, max_iters + 1):
        nxt = np.minimum(Qg @ u, cap)
        step = nxt - u
        max_increase = max(max_increase, float(step.max()))
        u = nxt
        if float(np.max(np.abs(step))) <= 0.1 * FIXED_POINT_TOL * scale:
            break
    else:
        raise SolverError("stopping iteration did not converge", {"iterations": max_iters})

    residual = float(np.max(np.abs(np.minimum(Qg @ u, cap) - u)))
    if residual > FIXED_POINT_TOL * scale:
        raise SolverError("stopping fixed point residual above tolerance", {"residual": f"{residual:.3e}"})
    stop = _stop_mask(u, G)
    logger.debug("Stopping solved at level %s: %d iterations, %d stop states", k.level, iteration, int(stop.sum()))
    u.setflags(write=False)
    return StoppingSolution(u=u, stop_region=stop, iterations=iteration, residual=residual,
                            max_increase=max_increase)


def _time_profile(profile: TimeProfile, times: np.ndarray, n_states: int, name: str) -> np.ndarray:
    """Evaluate g or G on the given times as an array of shape (len(times), n_states)."""
    if callable(profile):
        values = np.stack([np.asarray(profile(float(t)), dtype=float) for t in times])
    else:
        arr = np.asarray(profile, dtype=float)
        if arr.ndim == 2:
            values = arr
        else:
            values = np.tile(as_state_vector(arr, n_states, name), (len(times), 1))
    if values.shape != (len(times), n_states):
        raise ModelError(f"{name}: expected shape ({len(times)}, {n_states}), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ModelError(f"{name}: non-finite value on the time grid")
    return values


def finite_horizon_stopping(k: StepKernel, g: TimeProfile, G: TimeProfile, T: float) -> StoppingSurface:
    """Backward induction u(T) = e^{G(T)}, u(t) = min(e^{G(t)}, continuation from t).

    ``g`` is read on the finest grid the kernel was squared from (shape
    (N * substeps + 1, n) when given as a table), ``G`` on the kernel's own grid
    (shape (N + 1, n)); either may also be a per-state vector or a callable of t.
    """
    steps = steps_for_horizon(T, k.delta)
    times = np.arange(steps + 1) * k.delta
    fine_times = np.arange(steps * k.substeps + 1) * k.base_delta
    g_values = _time_profile(g, fine_times, k.n_states, "g")
    G_values = _time_profile(G, times, k.n_states, "G")

    u = np.empty((steps + 1, k.n_states))
    u[steps] = np.exp(G_values[steps])
    for j in range(steps - 1, -1, -1):
        h = u[j + 1]
        for i in range(k.substeps - 1, -1, -1):
            h = np.exp(g_values[j * k.substeps + i] * k.base_delta) * (k.base_rows @ h)
        u[j] = np.minimum(np.exp(G_values[j]), h)
    stop = np.abs(np.log(u) - G_values) <= STOP_REGION_TOL
    return StoppingSurface(times=times, u=u, stop=stop)


def verify_stopping_martingale(sol: StoppingSolution, k: StepKernel, g) -> Tuple[float, float]:
    """(submartingale defect, martingale defect on the continuation set)."""
    continuation = tilted_operator(k, g) @ sol.u
    sub_defect = float(max(0.0, np.max(sol.u - continuation)))
    cont = ~sol.stop_region
    mart_defect = float(np.max(np.abs(continuation[cont] - sol.u[cont]))) if cont.any() else 0.0
    return sub_defect, mart_defect


def stopping_ladder(finest: StepKernel, g, G, m_min: int = 0) -> StoppingLadder:
    """Solve the stopping problem on every level of the squared ladder.

    Raises:
        VerificationError: a finer level has a larger value somewhere.
    """
    ladder = dyadic_ladder(finest, m_min)
    values = {m: solve_dyadic_stopping(kernel, g, G).u for m, kernel in sorted(ladder.items())}
    levels: List[int] = sorted(values)
    monotone = all(
        np.all(values[b] <= values[a] + MONOTONE_TOL * max(1.0, float(values[a].max())))
        for a, b in zip(levels, levels[1:])
    )
    if not monotone:
        raise VerificationError("stopping values increase under grid refinement")
    gaps = {m: float(np.max(values[m] - values[m + 1])) for m in levels[:-1]}
    return StoppingLadder(values=values, monotone=monotone, gaps=gaps)


__all__ = [
    "StoppingSolution",
    "StoppingSurface",
    "StoppingLadder",
    "solve_dyadic_stopping",
    "finite_horizon_stopping",
    "verify_stopping_martingale",
    "stopping_ladder",
]
