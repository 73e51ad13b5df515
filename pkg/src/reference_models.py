# src/reference_models.py
"""
Reference suite: small models with known behaviour used by tests, `verify` and the
benchmark script.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from src.cost_model import CostSpec, CostTable, build_cost
from src.state_models import (
    StateGrid,
    StepKernel,
    build_finite_chain,
    build_from_generator,
    discretize_pdp,
    discretize_reflected_diffusion,
)

# Continuous-time rates of the 4-state cheap-shift chain; state 0 is sticky and cheap
CHEAP_SHIFT_RATES = np.array([
    [0.0, 0.005, 0.0025, 0.0025],
    [1.0, 0.0, 0.1, 0.05],
    [0.5, 0.5, 0.0, 0.2],
    [0.3, 0.1, 0.1, 0.0],
])
CHEAP_SHIFT_REWARD = (0.0, 1.0, 2.0, 5.0)


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    name: str
    grid: StateGrid
    kernel: StepKernel
    cost: CostTable


@dataclass(frozen=True)
class PDPParameters:
    flow: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jump_rate: float
    shift_map: Callable[[np.ndarray], np.ndarray]
    noise_std: float


def generator_from_rates(rates) -> np.ndarray:
    """Rate matrix with the diagonal set so rows sum to zero."""
    rates = np.array(rates, dtype=float)
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return rates


def single_state(f0: float = 0.7, c0: float = 0.5, level: int = 3) -> ReferenceModel:
    grid = StateGrid.abstract(1, impulse_indices=[0])
    kernel = build_finite_chain([[1.0]], grid, 2.0 ** -level, level)
    cost = build_cost(CostSpec("metric_capped", c0, cap=1.0), grid, [f0])
    return ReferenceModel("single_state", grid, kernel, cost)


def cheap_shift(level: int = 6, reward=CHEAP_SHIFT_REWARD) -> ReferenceModel:
    """4 states on a line at spacing 0.1, U = {0, 1}, c = 0.2 + 0.1 |i - j|."""
    grid = StateGrid.abstract(4, impulse_indices=[0, 1], reference_index=0, spacing=0.1)
    kernel = build_from_generator(generator_from_rates(CHEAP_SHIFT_RATES), grid, level)
    cost = build_cost(CostSpec("metric_capped", 0.2, cap=1.0), grid, reward)
    return ReferenceModel("cheap_shift", grid, kernel, cost)


def constant_reward(kappa: float = 0.8, level: int = 4) -> ReferenceModel:
    model = cheap_shift(level, reward=[kappa] * 4)
    return ReferenceModel("constant_reward", model.grid, model.kernel, model.cost)


def prohibitive(level: int = 4, c0: float = 50.0) -> ReferenceModel:
    """Cheap-shift chain with bounded reward and costs no horizon of interest can repay."""
    grid = StateGrid.abstract(4, impulse_indices=[0, 1], reference_index=0, spacing=0.1)
    kernel = build_from_generator(generator_from_rates(CHEAP_SHIFT_RATES), grid, level)
    cost = build_cost(CostSpec("metric_capped", c0, cap=1.0), grid, [0.0, 0.3, 0.6, 1.0])
    return ReferenceModel("prohibitive", grid, kernel, cost)


def random_model(seed: int, n_states: int = 6, n_targets: int = 3, level: int = 3,
                 c0: float = 0.1, cap: float = 0.5) -> ReferenceModel:
    """Dense random chain with rewards in [-1, 1] and a random impulse set."""
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.ones(n_states), size=n_states)
    targets = sorted(int(i) for i in rng.choice(n_states, size=n_targets, replace=False))
    grid = StateGrid.from_points(rng.uniform(0.0, 1.0, n_states), targets, reference_index=targets[0])
    kernel = build_finite_chain(rows, grid, 2.0 ** -level, level)
    cost = build_cost(CostSpec("metric_capped", c0, cap=cap), grid, rng.uniform(-1.0, 1.0, n_states))
    return ReferenceModel(f"random_{seed}", grid, kernel, cost)


def pdp_parameters() -> PDPParameters:
    return PDPParameters(
        flow=lambda x, t: np.asarray(x) * np.exp(-np.asarray(t)),
        jump_rate=1.0,
        shift_map=lambda x: 0.5 * np.tanh(x),
        noise_std=1.0,
    )


def pdp_reference(level: int = 2, c0: float = 0.2, post_jump_flow: bool = True) -> ReferenceModel:
    """Linear contraction with unit-rate jumps on 21 points over [-3, 3]; U = {0}."""
    grid = StateGrid.uniform(-3.0, 3.0, 21, impulse_indices=[10])
    params = pdp_parameters()
    kernel = discretize_pdp(params.flow, params.jump_rate, params.shift_map, params.noise_std,
                            grid, 2.0 ** -level, level, post_jump_flow=post_jump_flow)
    cost = build_cost(CostSpec("metric_capped", c0, cap=1.0), grid, np.abs(grid.coordinates) / 3.0)
    return ReferenceModel("pdp", grid, kernel, cost)


def reflected_reference(delta: float = 0.01, level: Optional[int] = None) -> ReferenceModel:
    """Reflected Brownian motion on [0, 1], 11 points, U = {5}."""
    grid = StateGrid.uniform(0.0, 1.0, 11, impulse_indices=[5])
    kernel = discretize_reflected_diffusion(lambda x: 1.0, (0.0, 1.0), grid, delta, level)
    cost = build_cost(CostSpec("metric_capped", 0.2, cap=1.0), grid, grid.coordinates)
    return ReferenceModel("reflected", grid, kernel, cost)


def reference_suite(n_random: int = 10) -> list:
    """Models the `verify` battery runs the Bellman and oracle checks on."""
    suite = [single_state(), constant_reward(), cheap_shift(level=3), prohibitive()]
    suite.extend(random_model(seed) for seed in range(n_random))
    return suite


def ladder_suite(level: int = 6, n_random: int = 10) -> list:
    """The reference models built at ``level`` so the ladder spans m = 0..level."""
    suite = [single_state(level=level), constant_reward(level=level), cheap_shift(level=level),
             prohibitive(level=level)]
    suite.extend(random_model(seed, level=level) for seed in range(n_random))
    return suite


__all__ = [
    "CHEAP_SHIFT_RATES",
    "CHEAP_SHIFT_REWARD",
    "ReferenceModel",
    "PDPParameters",
    "generator_from_rates",
    "single_state",
    "cheap_shift",
    "constant_reward",
    "prohibitive",
    "random_model",
    "pdp_parameters",
    "pdp_reference",
    "reflected_reference",
    "reference_suite",
    "ladder_suite",
]
