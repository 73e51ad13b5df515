# ============================================================================
# OPTIMAL STOPPING TESTS
# ============================================================================
import pytest
import numpy as np

from src.errors import ModelError
from src.reference_models import cheap_shift
from src.state_models import StateGrid, build_finite_chain
from src.stopping_solver import (
    StoppingSolution,
    finite_horizon_stopping,
    solve_dyadic_stopping,
    stopping_ladder,
    verify_stopping_martingale,
)

# u on states 1 and 2 of the symmetric instance: e^{0.2} 0.4 / (1 - 0.6 e^{0.2})
SYMMETRIC_VALUE = np.exp(0.2) * 0.4 / (1.0 - 0.6 * np.exp(0.2))


@pytest.fixture
def symmetric_kernel():
    """Three states, stay probability 0.2, unit step"""
    grid = StateGrid.abstract(3)
    rows = [[0.2, 0.4, 0.4], [0.4, 0.2, 0.4], [0.4, 0.4, 0.2]]
    return build_finite_chain(rows, grid, 1.0, 0)


class TestInfiniteHorizon:
    """Test the dyadic stopping fixed point"""

    def test_symmetric_instance(self, symmetric_kernel):
        """Test stop set and values against the closed form"""
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, [0.0, 1.0, 2.0])
        assert sol.stop_states == (0,)
        assert abs(sol.u[0] - 1.0) < 1e-12
        assert np.allclose(sol.u[1:], SYMMETRIC_VALUE, atol=1e-10)
        assert sol.max_increase <= 1e-12

    def test_zero_terminal_cost_stops_at_once(self, symmetric_kernel):
        """Test u = 1 when G = 0"""
        sol = solve_dyadic_stopping(symmetric_kernel, 0.5, 0.0)
        assert np.allclose(sol.u, 1.0)
        assert sol.stop_region.all()

    def test_martingale_defects(self, symmetric_kernel):
        """Test the one-step identities of the solved value"""
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, [0.0, 1.0, 2.0])
        sub, mart = verify_stopping_martingale(sol, symmetric_kernel, 0.2)
        assert sub <= 1e-12
        assert mart <= 1e-12

    def test_perturbation_detected(self, symmetric_kernel):
        """Test that a perturbed value breaks the martingale identity"""
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, [0.0, 1.0, 2.0])
        u = np.array(sol.u)
        u[1] += 0.1
        bad = StoppingSolution(u=u, stop_region=sol.stop_region, iterations=0, residual=0.0, max_increase=0.0)
        sub, mart = verify_stopping_martingale(bad, symmetric_kernel, 0.2)
        assert abs(mart - 0.0756) < 1e-3
        assert sub > 0.07

    def test_nonpositive_running_cost_rejected(self, symmetric_kernel):
        """Test the positivity requirement on g"""
        with pytest.raises(ModelError):
            solve_dyadic_stopping(symmetric_kernel, 0.0, 1.0)

    def test_negative_terminal_cost_rejected(self, symmetric_kernel):
        """Test the nonnegativity requirement on G"""
        with pytest.raises(ModelError):
            solve_dyadic_stopping(symmetric_kernel, 0.2, [-0.1, 0.0, 0.0])

    def test_values_read_only(self, symmetric_kernel):
        """Test immutability of the solved value"""
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, 1.0)
        with pytest.raises(ValueError):
            sol.u[0] = 0.0


class TestFiniteHorizon:
    """Test backward induction with time-dependent data"""

    def test_terminal_row(self, symmetric_kernel):
        """Test u(T) = e^{G(T)}"""
        G = np.array([0.0, 1.0, 2.0])
        surface = finite_horizon_stopping(symmetric_kernel, 0.2, G, 3.0)
        assert np.allclose(surface.u[-1], np.exp(G))
        assert surface.u.shape == (4, 3)
        assert surface.stop[-1].all()

    def test_converges_to_infinite_horizon(self, symmetric_kernel):
        """Test the long-horizon value against the stationary fixed point"""
        G = [0.0, 1.0, 2.0]
        surface = finite_horizon_stopping(symmetric_kernel, 0.2, G, 200.0)
        sol = solve_dyadic_stopping(symmetric_kernel, 0.2, G)
        assert np.allclose(surface.u[0], sol.u, atol=1e-9)

    def test_callable_profiles(self, symmetric_kernel):
        """Test g and G given as functions of time"""
        surface = finite_horizon_stopping(symmetric_kernel, lambda t: np.full(3, -0.1 * t),
                                          lambda t: np.array([t, 1.0, 2.0]), 2.0)
        assert abs(surface.u[-1, 0] - np.exp(2.0)) < 1e-12
        assert np.all(surface.u[0] <= np.exp(np.array([0.0, 1.0, 2.0])) + 1e-12)

    def test_profile_shape_checked(self, symmetric_kernel):
        """Test rejection of a wrong-shaped table"""
        with pytest.raises(ModelError):
            finite_horizon_stopping(symmetric_kernel, np.zeros((2, 3)), 0.0, 3.0)


class TestStoppingLadder:
    """Test monotonicity under grid refinement"""

    def test_finer_grids_stop_no_later(self):
        """Test that values do not increase with the level"""
        model = cheap_shift(level=5)
        ladder = stopping_ladder(model.kernel, 0.5, np.array([0.0, 0.5, 1.0, 2.0]), 2)
        assert ladder.monotone
        assert sorted(ladder.values) == [2, 3, 4, 5]
        assert all(gap >= -1e-10 for gap in ladder.gaps.values())


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
