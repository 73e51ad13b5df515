# src/dyadic_solver.py
"""
Dyadic Bellman equation for long-run risk-sensitive impulse control.

For a kernel at level m with tilted operator Q and Lu = ln Q e^u, the solver finds
(w, lambda) with

    w = min(Lw - lambda * delta, Mw)

through the two-branch operator (Tu)(x) = min(Lu(x), min_xi c(x, xi) + Lu(xi)), whose
eigen-equation Tw = w + lambda * delta is equivalent under the triangle inequality.
Relative value iteration is the primary method; a damped bisection on lambda takes
over when it does not settle.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.cost_model import CostTable, apply_M
from src.errors import ModelError, SolverError, VerificationError
from src.mc_simulation import ImpulsePolicy
from src.semigroup_mpe import semigroup_type, tilted_operator
from src.state_models import StepKernel, dyadic_ladder, minorization_constant
from src.utils import log_apply, span, sup_norm

IMPULSIVE = "Impulsive"
NO_IMPULSE = "NoImpulse"

LADDER_MONOTONE_TOL = 1e-8
R_F_SLACK = 1e-8
EQUIVALENCE_TOL = 1e-9
CONTINUATION_TOL = 1e-10
SUBMARTINGALE_TOL = 1e-12
_POLISH_ITERS = 200


@dataclass(frozen=True)
class SolverOptions:
    tol_span: float = 1e-12
    max_iters: int = 100_000
    reference_index: int = 0
    case_gap_tol: float = 1e-6
    residual_tol: float = 1e-10
    region_tol: float = 1e-9
    damping: float = 0.5
    bisection_steps: int = 200
    inner_iters: int = 20_000

    @classmethod
    def from_config(cls, solver_cfg: Optional[Mapping[str, Any]]) -> "SolverOptions":
        cfg = dict(solver_cfg or {})
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class DyadicSolution:
    level: Optional[int]
    delta: float
    lam: float
    w: np.ndarray
    Mw: np.ndarray
    impulse_region: np.ndarray
    shift_map: Dict[int, int]
    residual: float
    equivalence_defect: float
    iterations: int
    method: str
    minorization: float
    reference_index: int = 0

    @property
    def region_states(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.impulse_region))


@dataclass(frozen=True)
class LevelRecord:
    m: int
    delta: float
    lam: float
    residual: float
    iterations: int


@dataclass(frozen=True, eq=False)
class LambdaLadder:
    levels: List[LevelRecord]
    lambda_limit: float
    richardson: Optional[float]
    r_f: float
    case: str
    solutions: Dict[int, DyadicSolution] = field(default_factory=dict)

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"m": rec.m, "delta": rec.delta, "lambda_m": rec.lam, "r_f": self.r_f, "case": self.case}
            for rec in self.levels
        ]


def bellman_operator(u: np.ndarray, Q: np.ndarray, cost: CostTable) -> np.ndarray:
    """(Tu)(x) = min(Lu(x), min over xi of c(x, xi) + Lu(xi)) with Lu = ln Q e^u."""
    Lu = log_apply(Q, u)
    return np.minimum(Lu, apply_M(Lu, cost).values)


def _bellman_residual(w: np.ndarray, lam: float, Q: np.ndarray, delta: float,
                      cost: CostTable) -> Tuple[float, float, np.ndarray]:
    Z = log_apply(Q, w) - lam * delta
    Mw = apply_M(w, cost).values
    residual = sup_norm(np.minimum(Z, Mw) - w)
    equivalence = sup_norm(apply_M(Z, cost).values - Mw)
    return residual, equivalence, Mw


class DyadicBellmanSolver:
    """Relative value iteration with a damped-bisection fallback, one kernel at a time."""

    def __init__(self, options: Optional[SolverOptions] = None, logger: Optional[logging.Logger] = None):
        self.options = options or SolverOptions()
        self.log = logger or logging.getLogger(__name__)

    def _rvi(self, Q: np.ndarray, cost: CostTable, ref: int) -> Optional[Tuple[np.ndarray, float, int]]:
        opts = self.options
        u = np.zeros(Q.shape[0])
        best = np.inf
        polishing = 0
        for iteration in range(1, opts.max_iters + 1):
            Tu = bellman_operator(u, Q, cost)
            diff = Tu - u
            gap = span(diff)
            lam_delta = float(diff[ref])
            u = Tu - Tu[ref]
            if gap <= opts.tol_span:
                # keep going while the span still shrinks, down to the rounding floor
                if gap < best and polishing < _POLISH_ITERS:
                    best = gap
                    polishing += 1
                    continue
                return u, lam_delta, iteration
            best = min(best, gap)
        return None

    def _bisection(self, Q: np.ndarray, cost: CostTable, delta: float, ref: int,
                   upper: float) -> Tuple[np.ndarray, float, int]:
        opts = self.options
        theta = opts.damping
        lo, hi = -cost.f_norm - 1e-9, upper + 1e-9
        u = np.zeros(Q.shape[0])
        total = 0
        for _ in range(opts.bisection_steps):
            mid = 0.5 * (lo + hi)
            settled = False
            for _ in range(opts.inner_iters):
                total += 1
                drift = bellman_operator(u, Q, cost) - u - mid * delta
                if drift.min() > 0:
                    lo = mid
                    break
                if drift.max() < 0:
                    hi = mid
                    break
                if span(drift) <= opts.tol_span:
                    settled = True
                    break
                u = u + theta * drift
                u = u - u[ref]
            if settled or hi - lo <= opts.tol_span / delta:
                drift = bellman_operator(u, Q, cost) - u
                return u, float(drift[ref]), total
        drift = bellman_operator(u, Q, cost) - u
        return u, float(drift[ref]), total

    def solve(self, k: StepKernel, cost: CostTable) -> DyadicSolution:
        """Solve the dyadic Bellman equation on one kernel.

        Raises:
            ModelError: kernel and cost tables disagree on the state count.
            SolverError: neither method reaches the residual tolerance.
        """
        opts = self.options
        if cost.n_states != k.n_states:
            raise ModelError(f"cost table has {cost.n_states} states, kernel has {k.n_states}")
        ref = int(opts.reference_index)
        if not 0 <= ref < k.n_states:
            raise ModelError(f"reference index {ref} out of range")

        a = minorization_constant(k)
        if a == 0:
            self.log.warning("Kernel at level %s has no global minorization (a = 0); RVI may not contract",
                             k.level)
        Q = tilted_operator(k, cost.f)

        method = "rvi"
        outcome = self._rvi(Q, cost, ref)
        candidate = None
        if outcome is not None:
            u, lam_delta, iterations = outcome
            candidate = self._finish(u, lam_delta / k.delta, Q, k, cost)
        if candidate is None or candidate[1] > opts.residual_tol:
            self.log.warning("RVI did not settle at level %s (minorization a=%.3g); falling back to bisection",
                             k.level, a)
            method = "bisection"
            upper = float(np.log(np.max(np.abs(np.linalg.eigvals(Q))))) / k.delta
            u, lam_delta, iterations = self._bisection(Q, cost, k.delta, ref, upper)
            candidate = self._finish(u, lam_delta / k.delta, Q, k, cost)
        w, residual, equivalence, Mw, lam = candidate
        if residual > opts.residual_tol:
            raise SolverError(
                "Bellman residual above tolerance after RVI and bisection",
                {"level": k.level, "residual": f"{residual:.3e}", "minorization": f"{a:.3g}"},
            )

        gap = w - Mw
        region = gap >= -opts.region_tol
        raw_targets = apply_M(w, cost).argmin_shift
        shift_map = {int(x): self._continuation_target(int(x), raw_targets, region)
                     for x in np.flatnonzero(region)}
        self._check_bounds(w, Mw, lam, cost)

        w.setflags(write=False)
        self.log.info("Level %s solved by %s: lambda=%.12g, iterations=%d, residual=%.2e, |region|=%d",
                      k.level, method, lam, iterations, residual, int(region.sum()))
        return DyadicSolution(
            level=k.level,
            delta=k.delta,
            lam=lam,
            w=w,
            Mw=Mw,
            impulse_region=region,
            shift_map=shift_map,
            residual=residual,
            equivalence_defect=equivalence,
            iterations=iterations,
            method=method,
            minorization=a,
            reference_index=ref,
        )

    @staticmethod
    def _finish(u: np.ndarray, lam: float, Q: np.ndarray, k: StepKernel, cost: CostTable):
        w = u - np.min(u[cost.target_array])
        residual, equivalence, Mw = _bellman_residual(w, lam, Q, k.delta, cost)
        return w, residual, equivalence, Mw, lam

    @staticmethod
    def _continuation_target(x: int, raw_targets: np.ndarray, region: np.ndarray) -> int:
        """Follow argmin targets until one lands outside the impulse region."""
        target = int(raw_targets[x])
        for _ in range(region.size):
            if not region[target]:
                return target
            target = int(raw_targets[target])
        raise SolverError("impulse targets form a cycle inside the impulse region", {"state": x})

    @staticmethod
    def _check_bounds(w: np.ndarray, Mw: np.ndarray, lam: float, cost: CostTable) -> None:
        tol = 1e-9
        on_U = w[cost.target_array]
        if on_U.min() < -tol or on_U.max() > cost.c_norm + tol:
            raise SolverError("bias outside [0, ||c||] on the impulse set",
                              {"min": float(on_U.min()), "max": float(on_U.max())})
        if Mw.min() < -tol or Mw.max() > 2 * cost.c_norm + tol:
            raise SolverError("Mw outside [0, 2||c||]", {"min": float(Mw.min()), "max": float(Mw.max())})
        if not -cost.f_norm - tol <= lam <= cost.f_norm + tol:
            raise SolverError("lambda outside [-||f||, ||f||]", {"lambda": lam})


def solve_dyadic_bellman(k: StepKernel, cost: CostTable, opts: Optional[SolverOptions] = None) -> DyadicSolution:
    return DyadicBellmanSolver(opts).solve(k, cost)


def verify_fixed_point(sol: DyadicSolution, k: StepKernel, cost: CostTable) -> Tuple[float, float]:
    """(max |min(Lw - lambda delta, Mw) - w|, max |min_xi c + (Lw - lambda delta)(xi) - Mw|)."""
    Q = tilted_operator(k, cost.f)
    residual, equivalence, _ = _bellman_residual(np.asarray(sol.w, dtype=float), sol.lam, Q, k.delta, cost)
    return residual, equivalence


def extract_policy(sol: DyadicSolution, k: StepKernel, cost: CostTable,
                   case: Optional[str] = None) -> ImpulsePolicy:
    """Hitting-set policy of the solution, checked against the one-step martingale identities.

    Raises:
        VerificationError: the continuation identity or the everywhere inequality fails.
    """
    if case == NO_IMPULSE or not sol.impulse_region.any():
        return ImpulsePolicy.empty(sol.level)
    Q = tilted_operator(k, cost.f)
    Z = log_apply(Q, np.asarray(sol.w, dtype=float)) - sol.lam * k.delta
    excess = Z - sol.w
    continuation = ~sol.impulse_region
    if continuation.any() and np.max(np.abs(excess[continuation])) > CONTINUATION_TOL:
        raise VerificationError(
            f"martingale identity fails on continuation states (defect {np.max(np.abs(excess[continuation])):.3e})"
        )
    if excess.min() < -(SUBMARTINGALE_TOL + sol.residual):
        raise VerificationError(f"submartingale inequality fails (defect {-excess.min():.3e})")
    region = frozenset(int(x) for x in np.flatnonzero(sol.impulse_region))
    return ImpulsePolicy(region, dict(sol.shift_map), sol.level)


def lambda_ladder(
    finest: StepKernel,
    cost: CostTable,
    m_min: int = 0,
    opts: Optional[SolverOptions] = None,
    workers: int = 1,
) -> LambdaLadder:
    """lambda_m for every level m_min..finest.level of the squared ladder.

    Raises:
        VerificationError: lambda_m increases with m beyond 1e-8, leaves
            [-||f||, r(f) + 1e-8], or a level below r(f) coexists with a NoImpulse verdict.
    """
    opts = opts or SolverOptions()
    log = logging.getLogger(__name__)
    ladder = dyadic_ladder(finest, m_min)
    levels = sorted(ladder)
    solver = DyadicBellmanSolver(opts, log)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            solved = list(pool.map(lambda m: solver.solve(ladder[m], cost), levels))
    else:
        solved = [solver.solve(ladder[m], cost) for m in levels]
    solutions = dict(zip(levels, solved))

    r_f = semigroup_type(finest, cost.f, opts.reference_index)
    records = [LevelRecord(m, ladder[m].delta, s.lam, s.residual, s.iterations) for m, s in solutions.items()]
    for rec in records:
        if rec.lam > r_f + R_F_SLACK or rec.lam < -cost.f_norm - R_F_SLACK:
            raise VerificationError(f"lambda_{rec.m}={rec.lam:.12g} outside [-||f||, r(f)={r_f:.12g}]")
    for coarse, fine in zip(records, records[1:]):
        if fine.lam > coarse.lam + LADDER_MONOTONE_TOL:
            raise VerificationError(
                f"lambda ladder increases from level {coarse.m} ({coarse.lam:.12g}) to {fine.m} ({fine.lam:.12g})"
            )

    top = records[-1]
    case = NO_IMPULSE if top.lam >= r_f - opts.case_gap_tol else IMPULSIVE
    below = [rec.m for rec in records if rec.lam < r_f - opts.case_gap_tol]
    if case == NO_IMPULSE and below:
        raise VerificationError(f"NoImpulse verdict but levels {below} lie below r(f)")
    for rec in records:
        log.info("Level %d: lambda=%.12g (%s r_f)", rec.m, rec.lam,
                 "below" if rec.m in below else "at")
    richardson = 2.0 * top.lam - records[-2].lam if len(records) > 1 else None
    return LambdaLadder(
        levels=records,
        lambda_limit=top.lam,
        richardson=richardson,
        r_f=r_f,
        case=case,
        solutions=solutions,
    )


__all__ = [
    "IMPULSIVE",
    "NO_IMPULSE",
    "SolverOptions",
    "DyadicSolution",
    "LevelRecord",
    "LambdaLadder",
    "DyadicBellmanSolver",
    "bellman_operator",
    "solve_dyadic_bellman",
    "verify_fixed_point",
    "extract_policy",
    "lambda_ladder",
]
