# ============================================================================
# SEMIGROUP / MULTIPLICATIVE POISSON EQUATION TESTS
# ============================================================================
import pytest
import numpy as np

from src.errors import ModelError
from src.reference_models import cheap_shift, random_model, single_state
from src.semigroup_mpe import (
    change_of_measure_sides,
    semigroup_type,
    solve_mpe,
    tilted_operator,
    tilted_step,
    verify_change_of_measure,
)
from src.state_models import StateGrid, build_finite_chain, dyadic_ladder


@pytest.fixture
def uniform_pair():
    """Two states resampled uniformly each unit step"""
    grid = StateGrid.abstract(2)
    return build_finite_chain([[0.5, 0.5], [0.5, 0.5]], grid, 1.0, 0)


class TestTiltedOperator:
    """Test the tilted one-step operator"""

    def test_direct_kernel(self, uniform_pair):
        """Test e^{f delta} P for a directly built kernel"""
        Q = tilted_operator(uniform_pair, [0.0, 1.0])
        assert np.allclose(Q, [[0.5, 0.5], [0.5 * np.e, 0.5 * np.e]])

    def test_squared_kernel_uses_finest_grid(self):
        """Test the left-endpoint rule on the finest substeps"""
        model = cheap_shift(level=4)
        coarse = dyadic_ladder(model.kernel, 2)[2]
        fine_step = np.exp(model.cost.f * 2.0 ** -4)[:, None] * model.kernel.rows
        expected = np.linalg.matrix_power(fine_step, 4)
        assert np.allclose(tilted_operator(coarse, model.cost.f), expected, rtol=1e-12, atol=0)

    def test_tilted_step_needs_positive_h(self, uniform_pair):
        """Test the positivity requirement on h"""
        with pytest.raises(ModelError):
            tilted_step(uniform_pair, [0.0, 1.0], [1.0, 0.0])


class TestSolveMPE:
    """Test the Perron solver"""

    def test_rank_one_closed_form(self, uniform_pair):
        """Test r(f) and v for a rank-one kernel"""
        mpe = solve_mpe(uniform_pair, [0.0, 1.0])
        assert abs(mpe.r_f - np.log(0.5 * (1.0 + np.e))) < 1e-12
        assert np.allclose(mpe.v, [0.0, 1.0], atol=1e-12)
        assert mpe.residual <= 1e-10
        assert mpe.primitive

    def test_single_state(self):
        """Test r(f) = f(x0) on one state"""
        model = single_state()
        mpe = solve_mpe(model.kernel, model.cost.f)
        assert abs(mpe.r_f - 0.7) < 1e-12
        assert mpe.v.tolist() == [0.0]

    def test_constant_reward(self):
        """Test r(kappa) = kappa"""
        model = cheap_shift(level=3, reward=[0.8] * 4)
        assert abs(semigroup_type(model.kernel, model.cost.f) - 0.8) < 1e-10

    def test_tilted_kernel_stochastic(self):
        """Test row sums of the tilted kernel"""
        for seed in range(3):
            model = random_model(seed)
            mpe = solve_mpe(model.kernel, model.cost.f, model.grid.reference_index)
            assert np.max(np.abs(mpe.tilted_kernel.rows.sum(axis=1) - 1.0)) <= 1e-10
            assert mpe.v[model.grid.reference_index] == 0.0

    def test_semigroup_type_agrees(self):
        """Test semigroup_type against solve_mpe"""
        model = cheap_shift(level=3)
        assert abs(semigroup_type(model.kernel, model.cost.f) - solve_mpe(model.kernel, model.cost.f).r_f) < 1e-12

    def test_reference_out_of_range(self, uniform_pair):
        """Test reference index validation"""
        with pytest.raises(ModelError):
            solve_mpe(uniform_pair, [0.0, 1.0], reference_index=5)


class TestChangeOfMeasure:
    """Test the change-of-measure identity by path enumeration"""

    def test_identity_on_random_instances(self):
        """Test both sides agree on small random chains"""
        for seed in range(3):
            model = random_model(seed, n_states=4, n_targets=2, level=2)
            mpe = solve_mpe(model.kernel, model.cost.f, model.grid.reference_index)
            G = np.linspace(-0.5, 0.5, 4)
            assert verify_change_of_measure(model.kernel, model.cost.f, mpe, G, 0.3, 6) <= 1e-10

    def test_sides_positive(self, uniform_pair):
        """Test that both sides are positive expectations"""
        mpe = solve_mpe(uniform_pair, [0.0, 1.0])
        lhs, rhs = change_of_measure_sides(uniform_pair, [0.0, 1.0], mpe, [0.0, 0.0], 0.0, 3)
        assert np.all(lhs > 0) and np.allclose(lhs, rhs, rtol=1e-10)

    def test_enumeration_limits(self, uniform_pair):
        """Test the horizon limit of the enumeration"""
        mpe = solve_mpe(uniform_pair, [0.0, 1.0])
        with pytest.raises(ModelError):
            change_of_measure_sides(uniform_pair, [0.0, 1.0], mpe, [0.0, 0.0], 0.0, 13)

    @pytest.mark.parametrize("steps", [9, 10])
    def test_enumeration_matches_matrix_power(self, steps):
        """Test the path sums on both sides of the 2**18 enumeration limit"""
        model = random_model(4, n_states=4, n_targets=2, level=2)
        mpe = solve_mpe(model.kernel, model.cost.f, model.grid.reference_index)
        G = np.linspace(-0.5, 0.5, 4)
        lhs, rhs = change_of_measure_sides(model.kernel, model.cost.f, mpe, G, 0.3, steps)
        Q = tilted_operator(model.kernel, model.cost.f)
        expected = np.exp(-0.3 * steps * model.kernel.delta) * np.linalg.matrix_power(Q, steps) @ np.exp(G)
        assert np.allclose(lhs, expected, rtol=1e-10, atol=0)
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
