# ============================================================================
# BRUTE-FORCE ORACLE TESTS
# ============================================================================
import pytest
import numpy as np

from src.dyadic_solver import DyadicBellmanSolver, extract_policy
from src.errors import ModelError
from src.mc_simulation import ImpulsePolicy, policy_log_moment
from src.oracles import (
    discretizer_distance,
    empirical_row,
    enumerate_policies,
    path_sum_log_moment,
    policy_enumeration_oracle,
    sample_pdp_step,
    sample_reflected_step,
    stopping_region_oracle,
    stopping_tree_oracle,
    total_variation,
)
from src.reference_models import cheap_shift, pdp_parameters, pdp_reference, random_model, reflected_reference
from src.semigroup_mpe import semigroup_type
from src.state_models import StateGrid, build_finite_chain
from src.stopping_solver import finite_horizon_stopping, solve_dyadic_stopping


@pytest.fixture
def symmetric_kernel():
    """Three states, stay probability 0.2, unit step"""
    grid = StateGrid.abstract(3)
    rows = [[0.2, 0.4, 0.4], [0.4, 0.2, 0.4], [0.4, 0.4, 0.2]]
    return build_finite_chain(rows, grid, 1.0, 0)


class TestPolicyEnumeration:
    """Test stationary-policy enumeration"""

    def test_policy_count(self):
        """Test the hitting-set policies of a two-state chain"""
        model = random_model(0, n_states=2, n_targets=2, level=1)
        policies = list(enumerate_policies(model.cost))
        assert len(policies) == 3
        assert ImpulsePolicy.empty().describe() in [p.describe() for p in policies]

    def test_oracle_not_above_no_impulse(self):
        """Test that the best policy is no worse than never shifting"""
        model = random_model(5)
        result = policy_enumeration_oracle(model.kernel, model.cost)
        assert result.rate <= semigroup_type(model.kernel, model.cost.f) + 1e-10
        assert result.separation >= 0.0

    def test_state_limit(self):
        """Test the enumeration size guard"""
        model = random_model(0, n_states=9, n_targets=2)
        with pytest.raises(ModelError):
            policy_enumeration_oracle(model.kernel, model.cost)


class TestStoppingOracles:
    """Test stopping references against the solvers"""

    def test_region_oracle(self, symmetric_kernel):
        """Test region enumeration against the fixed point"""
        G = [0.0, 1.0, 2.0]
        best = stopping_region_oracle(symmetric_kernel, 0.2, G)
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, G)
        assert np.allclose(best, sol.u, atol=1e-10)

    def test_tree_oracle(self, symmetric_kernel):
        """Test history-dependent rules against backward induction"""
        rng = np.random.default_rng(4)
        g = rng.uniform(-0.2, 0.4, size=(5, 3))
        G = rng.uniform(0.0, 1.0, size=(5, 3))
        tree = stopping_tree_oracle(symmetric_kernel, g, G, 4.0)
        surface = finite_horizon_stopping(symmetric_kernel, g, G, 4.0)
        assert np.allclose(tree, surface.u[0], rtol=1e-12)

    def test_tree_limits(self, symmetric_kernel):
        """Test the tree depth guard"""
        with pytest.raises(ModelError):
            stopping_tree_oracle(symmetric_kernel, np.zeros((8, 3)), np.zeros((8, 3)), 7.0)


class TestPathSums:
    """Test explicit path sums"""

    def test_path_sum_matches_operator(self):
        """Test the policy log moment by enumerating paths"""
        model = cheap_shift(level=2)
        sol = DyadicBellmanSolver().solve(model.kernel, model.cost)
        policy = extract_policy(sol, model.kernel, model.cost)
        exact = policy_log_moment(model.kernel, model.cost, policy, 1.0)
        summed = path_sum_log_moment(model.kernel, model.cost, policy, 4)
        assert np.allclose(exact, summed, rtol=1e-12)

    def test_too_many_paths(self):
        """Test the enumeration guard"""
        model = cheap_shift(level=2)
        with pytest.raises(ModelError):
            path_sum_log_moment(model.kernel, model.cost, ImpulsePolicy.empty(), 9)


class TestDiscretizerSamplers:
    """Test one-step samplers against the discretized kernels"""

    def test_total_variation(self):
        """Test the TV helper"""
        assert total_variation([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_empirical_row(self):
        """Test empirical frequencies"""
        assert empirical_row(np.array([0, 2, 2, 2]), 3).tolist() == [0.25, 0.0, 0.75]

    def test_reflected_rows(self):
        """Test reflected-diffusion rows against a folded Euler sampler"""
        model = reflected_reference()
        coords = model.grid.coordinates
        rng = np.random.default_rng(12345)
        distances = discretizer_distance(
            model.kernel.rows,
            lambda x: sample_reflected_step(lambda y: np.ones_like(y), (0.0, 1.0), coords, coords[x],
                                            model.kernel.delta, 200_000, rng),
            [0, 5],
        )
        assert max(distances.values()) <= 0.02

    def test_pdp_rows(self):
        """Test PDP rows at the origin and both edges against exact jump sampling"""
        model = pdp_reference()
        params = pdp_parameters()
        coords = model.grid.coordinates
        rng = np.random.default_rng(12345)
        distances = discretizer_distance(
            model.kernel.rows,
            lambda x: sample_pdp_step(params.flow, params.jump_rate, params.shift_map, params.noise_std,
                                      coords, coords[x], model.kernel.delta, 1_000_000, rng),
            [0, 10, 20],
        )
        assert max(distances.values()) <= 0.02


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
