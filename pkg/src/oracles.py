# src/oracles.py
"""
Brute-force references for the solvers.

Everything here is exponential in the instance size and only meant for small models:
stationary-policy enumeration, stopping-region enumeration, recursions over the full
history tree, explicit path sums and one-step Monte Carlo samplers of the reference
processes.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from src.cost_model import CostTable
from src.errors import ModelError
from src.mc_simulation import ImpulsePolicy, policy_rate
from src.semigroup_mpe import tilted_operator
from src.state_models import StepKernel, cell_edges, snap_to_grid
from src.utils import as_state_vector, steps_for_horizon

logger = logging.getLogger(__name__)

MAX_POLICY_STATES = 8
MAX_REGION_STATES = 12
MAX_TREE_STATES = 4
MAX_TREE_STEPS = 6


@dataclass(frozen=True)
class PolicyOracleResult:
    rate: float
    policy: ImpulsePolicy
    runner_up: float
    n_policies: int

    @property
    def separation(self) -> float:
        return self.runner_up - self.rate


def enumerate_policies(cost: CostTable, level: Optional[int] = None) -> Iterator[ImpulsePolicy]:
    """Every stationary hitting-set policy whose shift targets are continuation states."""
    n = cost.n_states
    for mask in range(1 << n):
        region = [x for x in range(n) if mask >> x & 1]
        options = [t for t in cost.targets if not mask >> t & 1]
        if region and not options:
            continue
        for choice in itertools.product(options, repeat=len(region)):
            yield ImpulsePolicy(frozenset(region), dict(zip(region, choice)), level)


def policy_enumeration_oracle(k: StepKernel, cost: CostTable) -> PolicyOracleResult:
    """Minimum over stationary policies of the controlled log-Perron rate."""
    if k.n_states > MAX_POLICY_STATES:
        raise ModelError(f"policy enumeration limited to {MAX_POLICY_STATES} states")
    best: Optional[Tuple[float, ImpulsePolicy]] = None
    runner_up = np.inf
    count = 0
    for policy in enumerate_policies(cost, k.level):
        rate = policy_rate(k, cost, policy)
        count += 1
        if best is None or rate < best[0]:
            if best is not None:
                runner_up = min(runner_up, best[0])
            best = (rate, policy)
        else:
            runner_up = min(runner_up, rate)
    assert best is not None
    logger.debug("Enumerated %d policies; best rate %.12g", count, best[0])
    return PolicyOracleResult(rate=best[0], policy=best[1], runner_up=float(runner_up), n_policies=count)


def stopping_region_oracle(k: StepKernel, g, G) -> np.ndarray:
    """Pointwise minimum over stopping regions S of the value of the first entry to S."""
    n = k.n_states
    if n > MAX_REGION_STATES:
        raise ModelError(f"region enumeration limited to {MAX_REGION_STATES} states")
    Qg = tilted_operator(k, g)
    cap = np.exp(as_state_vector(G, n, "G"))
    best = np.full(n, np.inf)
    for mask in range(1, 1 << n):
        stop = np.array([bool(mask >> x & 1) for x in range(n)])
        cont = ~stop
        value = cap.copy()
        if cont.any():
            inner = Qg[np.ix_(cont, cont)]
            if np.max(np.abs(np.linalg.eigvals(inner))) >= 1.0:
                continue
            rhs = Qg[np.ix_(cont, stop)] @ cap[stop]
            value[cont] = np.linalg.solve(np.eye(int(cont.sum())) - inner, rhs)
        best = np.minimum(best, value)
    return best


def _check_tree(k: StepKernel, steps: int) -> None:
    if k.n_states > MAX_TREE_STATES or steps > MAX_TREE_STEPS:
        raise ModelError(
            f"history trees limited to {MAX_TREE_STATES} states and {MAX_TREE_STEPS} steps, "
            f"got {k.n_states} and {steps}"
        )
    if k.substeps != 1:
        raise ModelError("history trees need a directly built kernel (substeps == 1)")


def stopping_tree_oracle(k: StepKernel, g: np.ndarray, G: np.ndarray, T: float) -> np.ndarray:
    """Optimal stopping over all history-dependent rules; g, G given per grid time.

    ``g`` and ``G`` have shape (N + 1, n_states).
    """
    steps = steps_for_horizon(T, k.delta)
    _check_tree(k, steps)
    g = np.asarray(g, dtype=float)
    G = np.asarray(G, dtype=float)

    def value(history: Tuple[int, ...]) -> float:
        j, x = len(history) - 1, history[-1]
        stop_now = float(np.exp(G[j, x]))
        if j == steps:
            return stop_now
        onward = sum(k.rows[x, y] * value(history + (y,)) for y in range(k.n_states) if k.rows[x, y] > 0)
        return min(stop_now, float(np.exp(g[j, x] * k.delta)) * onward)

    return np.array([value((x,)) for x in range(k.n_states)])


def impulse_tree_oracle(k: StepKernel, cost: CostTable, T: float, budget: int) -> np.ndarray:
    """ln E exp(reward + shift costs) minimized over history-dependent strategies with at
    most ``budget`` impulses, one impulse per grid time, none at T."""
    steps = steps_for_horizon(T, k.delta)
    _check_tree(k, steps)
    Q = tilted_operator(k, cost.f)

    def continuation(history: Tuple[int, ...], x: int, left: int) -> float:
        j = len(history) - 1
        if j == steps:
            return 0.0
        terms = [np.log(Q[x, y]) + value(history + (y,), left) for y in range(k.n_states) if Q[x, y] > 0]
        return float(logsumexp(terms))

    def value(history: Tuple[int, ...], left: int) -> float:
        x = history[-1]
        best = continuation(history, x, left)
        if left > 0 and len(history) - 1 < steps:
            for t in cost.targets:
                best = min(best, cost.shift_cost(x, t) + continuation(history, t, left - 1))
        return best

    return np.array([value((x,), budget) for x in range(k.n_states)])


def path_sum_log_moment(k: StepKernel, cost: CostTable, policy: ImpulsePolicy, steps: int) -> np.ndarray:
    """ln E_x exp(exponent) by summing over every path of the controlled chain."""
    if k.n_states ** steps > 1 << 16:
        raise ModelError("too many paths to enumerate")
    Q = tilted_operator(k, cost.f)
    targets = policy.target_vector(k.n_states)
    out = np.empty(k.n_states)
    for x0 in range(k.n_states):
        total = 0.0
        for path in itertools.product(range(k.n_states), repeat=steps):
            weight, x = 1.0, x0
            for y in path:
                if targets[x] >= 0:
                    weight *= np.exp(cost.shift_cost(x, int(targets[x])))
                    x = int(targets[x])
                weight *= Q[x, y]
                x = y
            total += weight
        out[x0] = np.log(total)
    return out


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))))


def empirical_row(indices: np.ndarray, n_states: int) -> np.ndarray:
    return np.bincount(np.asarray(indices, dtype=np.int64), minlength=n_states) / float(len(indices))


def sample_pdp_step(
    flow: Callable[[np.ndarray, np.ndarray], np.ndarray],
    jump_rate: float,
    shift_map: Callable[[np.ndarray], np.ndarray],
    noise_std: float,
    coords: np.ndarray,
    x0: float,
    delta: float,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Grid indices of the exact process after one step of length delta from x0.

    ``flow`` must broadcast over an array of times. Paths that jumped and end outside
    the grid hull are discarded, matching the truncated jump law of the discretizer.
    """
    edges = cell_edges(coords)
    position = np.full(n_samples, float(x0))
    clock = np.zeros(n_samples)
    jumped = np.zeros(n_samples, dtype=bool)
    active = np.ones(n_samples, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        wait = rng.exponential(1.0 / jump_rate, size=idx.size)
        jumps = clock[idx] + wait < delta
        done = idx[~jumps]
        position[done] = flow(position[done], delta - clock[done])
        active[done] = False
        go = idx[jumps]
        if go.size:
            pre = flow(position[go], wait[jumps])
            position[go] = shift_map(pre) + noise_std * rng.standard_normal(go.size)
            clock[go] += wait[jumps]
            jumped[go] = True
    keep = ~jumped | ((position >= edges[0]) & (position <= edges[-1]))
    return snap_to_grid(position[keep], coords)


def sample_reflected_step(
    diffusion: Callable[[np.ndarray], np.ndarray],
    domain: Tuple[float, float],
    coords: np.ndarray,
    x0: float,
    delta: float,
    n_samples: int,
    rng: np.random.Generator,
    substeps: int = 1,
) -> np.ndarray:
    """Grid indices after one step of an Euler scheme folded back into [l, u]."""
    lower, upper = float(domain[0]), float(domain[1])
    dt = delta / substeps
    position = np.full(n_samples, float(x0))
    for _ in range(substeps):
        scale = np.sqrt(np.asarray(diffusion(position), dtype=float) * dt)
        position = position + scale * rng.standard_normal(n_samples)
        while True:
            below, above = position < lower, position > upper
            if not (below.any() or above.any()):
                break
            position[below] = 2 * lower - position[below]
            position[above] = 2 * upper - position[above]
    return snap_to_grid(position, coords)


def discretizer_distance(rows: np.ndarray, sampler: Callable[[int], np.ndarray],
                         states: List[int]) -> Dict[int, float]:
    """Total variation between kernel rows and empirical rows drawn by ``sampler(state)``."""
    return {x: total_variation(rows[x], empirical_row(sampler(x), rows.shape[1])) for x in states}


__all__ = [
    "PolicyOracleResult",
    "enumerate_policies",
    "policy_enumeration_oracle",
    "stopping_region_oracle",
    "stopping_tree_oracle",
    "impulse_tree_oracle",
    "path_sum_log_moment",
    "total_variation",
    "empirical_row",
    "sample_pdp_step",
    "sample_reflected_step",
    "discretizer_distance",
]
