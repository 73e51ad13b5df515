# src/mc_simulation.py
"""
Controlled-path simulation and risk-sensitive cost estimation.

A policy is a hitting set (impulse region) with a shift target per region state.
Decisions are taken on the kernel's grid t_0..t_{N-1}; between decisions the path is
advanced through the finest substeps of the ladder, where the running reward is
accumulated, so sample exponents have exactly the law the tilted operator describes.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from src.cost_model import CostTable
from src.errors import ModelError, VerificationError
from src.semigroup_mpe import MPESolution, tilted_operator
from src.state_models import StepKernel, cumulative_rows, draw_indices, sample_step
from src.utils import as_state_vector, log_apply, span, steps_for_horizon

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1024
ESS_WARNING_FRACTION = 0.01
JENSEN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ImpulsePolicy:
    impulse_region: FrozenSet[int]
    shift_map: Mapping[int, int]
    level: Optional[int] = None

    def __post_init__(self) -> None:
        region = frozenset(int(x) for x in self.impulse_region)
        shifts = {int(x): int(t) for x, t in dict(self.shift_map).items()}
        missing = sorted(region - set(shifts))
        if missing:
            raise ModelError(f"impulse region states without a shift target: {missing}")
        extra = sorted(set(shifts) - region)
        if extra:
            raise ModelError(f"shift targets given for states outside the impulse region: {extra}")
        inside = sorted(x for x, t in shifts.items() if t in region)
        if inside:
            raise ModelError(f"shift target inside the impulse region for states {inside}")
        object.__setattr__(self, "impulse_region", region)
        object.__setattr__(self, "shift_map", shifts)

    @classmethod
    def empty(cls, level: Optional[int] = None) -> "ImpulsePolicy":
        return cls(frozenset(), {}, level)

    @property
    def is_empty(self) -> bool:
        return not self.impulse_region

    def check_targets(self, cost: CostTable) -> None:
        """Raise ModelError unless every state is in range and every target is in U."""
        targets = set(cost.targets)
        for x, t in self.shift_map.items():
            if not 0 <= x < cost.n_states:
                raise ModelError(f"impulse region state {x} out of range")
            if t not in targets:
                raise ModelError(f"shift target {t} of state {x} is not in U")

    def target_vector(self, n_states: int) -> np.ndarray:
        """Shift target per state, -1 for continuation states."""
        targets = np.full(n_states, -1, dtype=np.int64)
        for x, t in self.shift_map.items():
            targets[x] = t
        return targets

    def describe(self) -> str:
        if self.is_empty:
            return "no-impulse"
        return ";".join(f"{x}->{t}" for x, t in sorted(self.shift_map.items()))


@dataclass(frozen=True, eq=False)
class PathRecord:
    states: np.ndarray
    fine_states: np.ndarray
    impulse_times: np.ndarray
    impulse_from: np.ndarray
    impulse_targets: np.ndarray
    f_part: float
    c_part: float
    exponent: float

    @property
    def n_impulses(self) -> int:
        return int(self.impulse_times.size)


@dataclass(frozen=True, eq=False)
class BatchRecord:
    exponents: np.ndarray
    f_parts: np.ndarray
    c_parts: np.ndarray
    impulse_counts: np.ndarray
    T: float
    seed: Optional[int] = None


@dataclass(frozen=True)
class SimulationReport:
    n_paths: int
    T: float
    estimate: float
    std_error: float
    ess: float
    mean_exponent: float
    impulse_stats: Dict[str, float] = field(default_factory=dict)
    seed: Optional[int] = None

    def to_row(self, model_id: str, policy_id: str, level: Optional[int]) -> Dict[str, object]:
        return {
            "model_id": model_id,
            "policy_id": policy_id,
            "m": -1 if level is None else int(level),
            "T": self.T,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "mean_impulses": self.impulse_stats.get("mean", 0.0),
        }


@dataclass(frozen=True)
class ValidationReport:
    """Monte Carlo estimate next to its deterministic references.

    ``within_three_sigma`` compares the estimate with the exact finite-horizon rate it
    estimates; ``offset_within_bound`` checks the deterministic gap between that
    rate and the long-run reference against ``bias_bound``. Neither tolerance is added
    to the other.
    """

    simulation: SimulationReport
    reference_rate: float
    exact_rate: float
    bias_bound: float
    within_three_sigma: bool
    offset_within_bound: bool
    agrees: bool

    @property
    def gap(self) -> float:
        return abs(self.simulation.estimate - self.reference_rate)

    @property
    def sampling_gap(self) -> float:
        return abs(self.simulation.estimate - self.exact_rate)

    @property
    def offset(self) -> float:
        return abs(self.exact_rate - self.reference_rate)


@dataclass(frozen=True)
class DriftReport:
    estimate_T: float
    estimate_2T: float
    std_error_T: float
    std_error_2T: float
    within: bool


def policy_operator(k: StepKernel, cost: CostTable, policy: ImpulsePolicy) -> np.ndarray:
    """Tilted operator of the controlled chain: row x is e^{c(x, xi)} Q[xi] on the region."""
    policy.check_targets(cost)
    Q = tilted_operator(k, cost.f)
    if policy.is_empty:
        return Q
    controlled = Q.copy()
    for x, t in policy.shift_map.items():
        controlled[x] = np.exp(cost.shift_cost(x, t)) * Q[t]
    return controlled


def policy_rate(k: StepKernel, cost: CostTable, policy: ImpulsePolicy) -> float:
    """Per-unit-time log spectral radius of the controlled tilted operator."""
    rho = float(np.max(np.abs(np.linalg.eigvals(policy_operator(k, cost, policy)))))
    return float(np.log(rho)) / k.delta


def policy_log_moment(k: StepKernel, cost: CostTable, policy: ImpulsePolicy, T: float) -> np.ndarray:
    """ln E_x[exp(accumulated reward + shift costs)] over [0, T] per starting state, exactly."""
    steps = steps_for_horizon(T, k.delta)
    controlled = policy_operator(k, cost, policy)
    h = np.zeros(k.n_states)
    for _ in range(steps):
        h = log_apply(controlled, h)
    return h


def _full_costs(cost: CostTable) -> np.ndarray:
    """Shift costs indexed by (state, target state); NaN off U."""
    full = np.full((cost.n_states, cost.n_states), np.nan)
    full[:, cost.target_array] = cost.c
    return full


def simulate_controlled(
    k: StepKernel,
    policy: ImpulsePolicy,
    cost: CostTable,
    x0: int,
    T: float,
    rng: np.random.Generator,
) -> PathRecord:
    """One controlled path on [0, T]; the shift at a decision time precedes the step."""
    policy.check_targets(cost)
    if not 0 <= int(x0) < k.n_states:
        raise ModelError(f"initial state {x0} out of range")
    steps = steps_for_horizon(T, k.delta)
    cum = cumulative_rows(k.base_rows)
    targets = policy.target_vector(k.n_states)

    states = np.empty(steps + 1, dtype=np.int64)
    fine = np.empty(steps * k.substeps + 1, dtype=np.int64)
    times: List[float] = []
    origins: List[int] = []
    landed: List[int] = []
    shift_costs: List[float] = []

    x = int(x0)
    for j in range(steps):
        states[j] = x
        if targets[x] >= 0:
            times.append(j * k.delta)
            origins.append(x)
            landed.append(int(targets[x]))
            shift_costs.append(cost.shift_cost(x, int(targets[x])))
            x = int(targets[x])
        for i in range(k.substeps):
            fine[j * k.substeps + i] = x
            x = sample_step(k, x, rng, cum)
    states[steps] = x
    fine[-1] = x

    f_part = float(np.sum(cost.f[fine[:-1]])) * k.base_delta
    c_part = float(np.sum(shift_costs)) if shift_costs else 0.0
    return PathRecord(
        states=states,
        fine_states=fine,
        impulse_times=np.asarray(times, dtype=float),
        impulse_from=np.asarray(origins, dtype=np.int64),
        impulse_targets=np.asarray(landed, dtype=np.int64),
        f_part=f_part,
        c_part=c_part,
        exponent=f_part + c_part,
    )


def recompute_exponent(record: PathRecord, k: StepKernel, cost: CostTable) -> float:
    """Exponent rebuilt from the recorded path and impulses."""
    f_part = float(np.sum(cost.f[record.fine_states[:-1]])) * k.base_delta
    shift_costs = [cost.shift_cost(x, t) for x, t in zip(record.impulse_from, record.impulse_targets)]
    c_part = float(np.sum(shift_costs)) if shift_costs else 0.0
    return f_part + c_part


def _simulate_chunk(
    cum: np.ndarray,
    f: np.ndarray,
    targets: np.ndarray,
    jump_costs: np.ndarray,
    x0: int,
    steps: int,
    substeps: int,
    base_delta: float,
    n_paths: int,
    seed_seq: np.random.SeedSequence,
):
    rng = np.random.default_rng(seed_seq)
    states = np.full(n_paths, int(x0), dtype=np.int64)
    f_sum = np.zeros(n_paths)
    c_part = np.zeros(n_paths)
    counts = np.zeros(n_paths, dtype=np.int64)
    for _ in range(steps):
        shifting = targets[states] >= 0
        if shifting.any():
            origin = states[shifting]
            states[shifting] = targets[origin]
            c_part[shifting] += jump_costs[origin]
            counts += shifting
        for _ in range(substeps):
            f_sum += f[states]
            states = draw_indices(cum, states, rng.random(n_paths))
    f_part = f_sum * base_delta
    return f_part, c_part, counts


def simulate_batch(
    k: StepKernel,
    policy: ImpulsePolicy,
    cost: CostTable,
    x0: int,
    T: float,
    n_paths: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> BatchRecord:
    """Vectorized simulation of ``n_paths`` controlled paths.

    Chunks of ``chunk_size`` paths draw from the streams
    ``np.random.SeedSequence(seed).spawn(n_chunks)`` in chunk order, so the result is
    independent of ``workers``.
    """
    policy.check_targets(cost)
    if not 0 <= int(x0) < k.n_states:
        raise ModelError(f"initial state {x0} out of range")
    if n_paths < 1:
        raise ModelError("n_paths must be positive")
    steps = steps_for_horizon(T, k.delta)
    cum = cumulative_rows(k.base_rows)
    targets = policy.target_vector(k.n_states)
    full = _full_costs(cost)
    jump_costs = np.zeros(k.n_states)
    for x, t in policy.shift_map.items():
        jump_costs[x] = full[x, t]

    sizes = [min(chunk_size, n_paths - start) for start in range(0, n_paths, chunk_size)]
    streams = np.random.SeedSequence(int(seed)).spawn(len(sizes))

    def run(index: int):
        return _simulate_chunk(cum, cost.f, targets, jump_costs, x0, steps, k.substeps,
                               k.base_delta, sizes[index], streams[index])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]

    f_parts = np.concatenate([p[0] for p in parts])
    c_parts = np.concatenate([p[1] for p in parts])
    counts = np.concatenate([p[2] for p in parts])
    logger.debug("Simulated %d paths over T=%g at level %s (%d chunks)", n_paths, T, k.level, len(sizes))
    return BatchRecord(
        exponents=f_parts + c_parts,
        f_parts=f_parts,
        c_parts=c_parts,
        impulse_counts=counts,
        T=float(T),
        seed=int(seed),
    )


def estimate_cost_rate(
    paths: Union[BatchRecord, Sequence[PathRecord]], T: float, seed: Optional[int] = None
) -> SimulationReport:
    """(logsumexp(exponents) - ln n) / T with a delta-method standard error.

    Raises:
        ModelError: fewer than 2 paths.
        VerificationError: the estimate falls below mean(exponents) / T.
    """
    if isinstance(paths, BatchRecord):
        exponents = np.asarray(paths.exponents, dtype=float)
        counts = np.asarray(paths.impulse_counts, dtype=float)
        seed = paths.seed if seed is None else seed
    else:
        exponents = np.asarray([p.exponent for p in paths], dtype=float)
        counts = np.asarray([p.n_impulses for p in paths], dtype=float)
    n = exponents.size
    if n < 2:
        raise ModelError(f"estimate_cost_rate needs at least 2 paths, got {n}")
    if not T > 0:
        raise ModelError(f"horizon must be positive, got {T}")

    estimate = float(logsumexp(exponents) - np.log(n)) / T
    weights = np.exp(exponents - exponents.max())
    mean_weight = float(weights.mean())
    std_error = float(np.std(weights, ddof=1) / (np.sqrt(n) * mean_weight)) / T
    ess = float(weights.sum() ** 2 / np.sum(weights ** 2))
    mean_exponent = float(np.mean(exponents))

    if estimate < mean_exponent / T - JENSEN_TOL * max(1.0, abs(mean_exponent / T)):
        raise VerificationError(
            f"log-mean-exp estimate {estimate:.12g} below the mean exponent rate {mean_exponent / T:.12g}"
        )
    if ess < ESS_WARNING_FRACTION * n:
        logger.warning("Effective sample size %.1f is below %.0f%% of %d paths", ess,
                       100 * ESS_WARNING_FRACTION, n)
    stats = {
        "mean": float(counts.mean()) if counts.size else 0.0,
        "max": float(counts.max()) if counts.size else 0.0,
        "std": float(counts.std()) if counts.size else 0.0,
    }
    return SimulationReport(
        n_paths=int(n),
        T=float(T),
        estimate=estimate,
        std_error=std_error,
        ess=ess,
        mean_exponent=mean_exponent,
        impulse_stats=stats,
        seed=seed,
    )


def _compare(report: SimulationReport, reference: float, exact: float, bias: float,
             absolute_tol: Optional[float] = None) -> ValidationReport:
    within = abs(report.estimate - exact) <= 3.0 * report.std_error
    offset_ok = abs(exact - reference) <= bias + 1e-9
    agrees = within and offset_ok
    if absolute_tol is not None:
        agrees = agrees and abs(report.estimate - reference) <= absolute_tol
    return ValidationReport(report, float(reference), exact, bias, bool(within), bool(offset_ok), bool(agrees))


def validate_no_impulse(
    k: StepKernel,
    f,
    T: float,
    n_paths: int,
    mpe: MPESolution,
    seed: int = 0,
    x0: Optional[int] = None,
    workers: int = 1,
) -> ValidationReport:
    """Uncontrolled Monte Carlo rate against r(f) and against the exact ln E e^{int f} / T."""
    f = as_state_vector(f, k.n_states, "f")
    x0 = mpe.reference_index if x0 is None else int(x0)
    reward_only = CostTable(
        c=np.ones((k.n_states, 1)),
        f=f,
        c0=1.0,
        targets=(0,),
        f_norm=float(np.max(np.abs(f))),
        c_norm=1.0,
    )
    batch = simulate_batch(k, ImpulsePolicy.empty(k.level), reward_only, x0, T, n_paths, seed, workers)
    report = estimate_cost_rate(batch, T)
    exact = float(policy_log_moment(k, reward_only, ImpulsePolicy.empty(k.level), T)[x0]) / T
    bias = span(mpe.v) / T
    logger.info("No-impulse check: estimate=%.6f +/- %.2e, r_f=%.6f, exact=%.6f, bias bound=%.2e",
                report.estimate, report.std_error, mpe.r_f, exact, bias)
    return _compare(report, mpe.r_f, exact, bias)


def validate_policy(
    k: StepKernel,
    cost: CostTable,
    policy: ImpulsePolicy,
    lam: float,
    w,
    T: float,
    n_paths: int,
    seed: int = 0,
    x0: int = 0,
    workers: int = 1,
    absolute_tol: float = 0.05,
) -> ValidationReport:
    """Policy-following Monte Carlo rate against the solver's lambda and the exact finite-T rate."""
    batch = simulate_batch(k, policy, cost, x0, T, n_paths, seed, workers)
    report = estimate_cost_rate(batch, T)
    exact = float(policy_log_moment(k, cost, policy, T)[int(x0)]) / T
    bias = span(w) / T
    logger.info("Policy check: estimate=%.6f +/- %.2e, lambda=%.6f, exact=%.6f, bias bound=%.2e",
                report.estimate, report.std_error, lam, exact, bias)
    return _compare(report, lam, exact, bias, absolute_tol)


def drift_check(
    k: StepKernel,
    policy: ImpulsePolicy,
    cost: CostTable,
    x0: int,
    T: float,
    n_paths: int,
    seed: int = 0,
    slack: float = 0.02,
    workers: int = 1,
) -> DriftReport:
    """Estimates at T and 2T should differ by at most 2 (se_T + se_2T) + slack."""
    first = estimate_cost_rate(simulate_batch(k, policy, cost, x0, T, n_paths, seed, workers), T)
    second = estimate_cost_rate(simulate_batch(k, policy, cost, x0, 2 * T, n_paths, seed + 1, workers), 2 * T)
    within = abs(first.estimate - second.estimate) <= 2.0 * (first.std_error + second.std_error) + slack
    return DriftReport(first.estimate, second.estimate, first.std_error, second.std_error, bool(within))


__all__ = [
    "ImpulsePolicy",
    "PathRecord",
    "BatchRecord",
    "SimulationReport",
    "ValidationReport",
    "DriftReport",
    "policy_operator",
    "policy_rate",
    "policy_log_moment",
    "simulate_controlled",
    "recompute_exponent",
    "simulate_batch",
    "estimate_cost_rate",
    "validate_no_impulse",
    "validate_policy",
    "drift_check",
]
