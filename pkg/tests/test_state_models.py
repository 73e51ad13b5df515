# ============================================================================
# STATE MODEL TESTS
# ============================================================================
import pytest
import numpy as np
from scipy.linalg import expm
from scipy.stats import norm

from src.errors import ModelError
from src.reference_models import CHEAP_SHIFT_RATES, generator_from_rates
from src.state_models import (
    StateGrid,
    build_finite_chain,
    build_from_generator,
    cell_edges,
    check_minorization,
    cumulative_rows,
    discretize_pdp,
    discretize_reflected_diffusion,
    draw_indices,
    dyadic_ladder,
    minorization_constant,
    sample_step,
    sample_steps,
    snap_to_grid,
    square_kernel,
)


@pytest.fixture
def two_state_grid():
    """Two states on a line, both in U"""
    return StateGrid.abstract(2)


@pytest.fixture
def cheap_shift_grid():
    """Four states at spacing 0.1 with U = {0, 1}"""
    return StateGrid.abstract(4, impulse_indices=[0, 1], spacing=0.1)


class TestStateGrid:
    """Test grid validation"""

    def test_abstract_metric(self, cheap_shift_grid):
        """Test the line metric of an abstract grid"""
        assert cheap_shift_grid.size == 4
        assert abs(cheap_shift_grid.metric[0, 3] - 0.3) < 1e-12
        assert cheap_shift_grid.impulse_mask.tolist() == [True, True, False, False]

    def test_triangle_violation_rejected(self):
        """Test a metric breaking the triangle inequality"""
        metric = np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [3.0, 1.0, 0.0]])
        with pytest.raises(ModelError, match="triangle"):
            StateGrid(np.arange(3.0), metric, (0,))

    def test_empty_impulse_set_rejected(self):
        """Test that U must be nonempty"""
        with pytest.raises(ModelError):
            StateGrid.abstract(3, impulse_indices=[])

    def test_uniform_reference_defaults_to_midpoint(self):
        """Test the default reference state of a uniform grid"""
        grid = StateGrid.uniform(-3.0, 3.0, 21)
        assert grid.reference_index == 10
        assert abs(grid.coordinates[10]) < 1e-12

    def test_snap_ties_go_to_smaller_index(self):
        """Test nearest-point snapping on a tie"""
        coords = np.array([0.0, 1.0, 2.0])
        assert snap_to_grid(0.5, coords) == 0
        assert snap_to_grid(1.6, coords) == 2
        assert snap_to_grid(-7.0, coords) == 0


class TestFiniteChain:
    """Test kernel construction from explicit rows"""

    def test_negative_entry_rejected(self, two_state_grid):
        """Test negative transition probability"""
        with pytest.raises(ModelError, match="negative"):
            build_finite_chain([[1.2, -0.2], [0.5, 0.5]], two_state_grid, 1.0, 0)

    def test_bad_row_sum_rejected(self, two_state_grid):
        """Test row sum outside tolerance"""
        with pytest.raises(ModelError, match="sums to"):
            build_finite_chain([[0.5, 0.49], [0.5, 0.5]], two_state_grid, 1.0, 0)

    def test_zero_row_rejected(self, two_state_grid):
        """Test degenerate all-zero row"""
        with pytest.raises(ModelError, match="all-zero"):
            build_finite_chain([[0.0, 0.0], [0.5, 0.5]], two_state_grid, 1.0, 0)

    def test_tiny_drift_renormalized(self, two_state_grid):
        """Test renormalization of rows within tolerance"""
        k = build_finite_chain([[0.5, 0.5 + 1e-11], [0.3, 0.7]], two_state_grid, 0.5, 1)
        assert np.allclose(k.rows.sum(axis=1), 1.0, atol=1e-15)
        assert k.level == 1 and k.substeps == 1

    def test_level_must_match_delta(self, two_state_grid):
        """Test that a dyadic level fixes delta"""
        with pytest.raises(ModelError, match="inconsistent"):
            build_finite_chain([[0.5, 0.5], [0.5, 0.5]], two_state_grid, 0.3, 1)

    def test_rows_are_read_only(self, two_state_grid):
        """Test kernel immutability"""
        k = build_finite_chain([[0.5, 0.5], [0.5, 0.5]], two_state_grid, 1.0, 0)
        with pytest.raises(ValueError):
            k.rows[0, 0] = 1.0


class TestDyadicLadder:
    """Test squaring consistency"""

    def test_generator_ladder_matches_expm(self, cheap_shift_grid):
        """Test that squaring reproduces the matrix exponential at every level"""
        G = generator_from_rates(CHEAP_SHIFT_RATES)
        ladder = dyadic_ladder(build_from_generator(G, cheap_shift_grid, 5), 0)
        for m, k in ladder.items():
            assert np.max(np.abs(k.rows - expm(G * 2.0 ** -m))) < 1e-10
            assert k.substeps == 2 ** (5 - m)
            assert k.level == m

    def test_square_composes_rows(self, two_state_grid):
        """Test one squaring step"""
        k = build_finite_chain([[0.9, 0.1], [0.4, 0.6]], two_state_grid, 0.25, 2)
        sq = square_kernel(k)
        assert np.allclose(sq.rows, k.rows @ k.rows)
        assert sq.level == 1 and sq.delta == 0.5
        assert np.array_equal(sq.base_rows, k.rows)

    def test_square_level_zero_flags_non_dyadic(self, two_state_grid):
        """Test squaring below level 0"""
        k = build_finite_chain([[0.9, 0.1], [0.4, 0.6]], two_state_grid, 1.0, 0)
        assert square_kernel(k).level is None

    def test_generator_rows_must_sum_to_zero(self, two_state_grid):
        """Test generator validation"""
        with pytest.raises(ModelError):
            build_from_generator([[-1.0, 0.5], [1.0, -1.0]], two_state_grid, 2)


class TestMinorization:
    """Test the column-min minorization report"""

    def test_two_state_constant(self, two_state_grid):
        """Test a, nu and the U-charge"""
        k = build_finite_chain([[0.5, 0.5], [0.2, 0.8]], two_state_grid, 1.0, 0)
        report = check_minorization(k, two_state_grid)
        assert abs(report.a - 0.7) < 1e-12
        assert np.allclose(report.nu, [2 / 7, 5 / 7])
        assert report.u_charged
        assert abs(minorization_constant(k) - 0.7) < 1e-12

    def test_permutation_has_no_minorization(self, two_state_grid):
        """Test a = 0 for a deterministic swap"""
        k = build_finite_chain([[0.0, 1.0], [1.0, 0.0]], two_state_grid, 1.0, 0)
        report = check_minorization(k, two_state_grid)
        assert report.a == 0.0
        assert not report.u_charged

    def test_column_min_example(self, two_state_grid):
        """Test a = 0.7 and nu = (4/7, 3/7) for a mixing pair"""
        k = build_finite_chain([[0.7, 0.3], [0.4, 0.6]], two_state_grid, 1.0, 0)
        report = check_minorization(k, two_state_grid)
        assert abs(report.a - 0.7) < 1e-12
        assert np.allclose(report.nu, [4 / 7, 3 / 7], atol=1e-12)
        assert abs(report.nu.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_minorizing_measure_below_every_row(self, seed):
        """Test a * nu(y) <= P(x, y) over every pair of states"""
        rng = np.random.default_rng(seed)
        grid = StateGrid.abstract(5)
        k = build_finite_chain(rng.dirichlet(np.ones(5), size=5), grid, 0.5, 1)
        report = check_minorization(k, grid)
        for x in range(5):
            for y in range(5):
                assert report.a * report.nu[y] <= k.rows[x, y] + 1e-14


class TestDiscretizers:
    """Test the PDP and reflected-diffusion kernels"""

    def test_reflected_rows_symmetric(self):
        """Test mirror symmetry of a constant-diffusion kernel"""
        grid = StateGrid.uniform(0.0, 1.0, 11, impulse_indices=[5])
        k = discretize_reflected_diffusion(lambda x: 1.0, (0.0, 1.0), grid, 0.01)
        assert np.allclose(k.rows.sum(axis=1), 1.0)
        assert np.allclose(k.rows[0], k.rows[10][::-1], atol=1e-12)
        assert k.diagnostics["max_folded_mass"] <= 0.5 + 1e-6

    def test_reflected_large_step_rejected(self):
        """Test the folded-mass rejection rule"""
        grid = StateGrid.uniform(0.0, 1.0, 11, impulse_indices=[5])
        with pytest.raises(ModelError, match="folds"):
            discretize_reflected_diffusion(lambda x: 1.0, (0.0, 1.0), grid, 1.0)

    def test_pdp_rows_stochastic(self):
        """Test PDP kernel shape and stay probability"""
        grid = StateGrid.uniform(-3.0, 3.0, 21, impulse_indices=[10])
        delta = 0.25
        k = discretize_pdp(
            lambda x, t: np.asarray(x) * np.exp(-np.asarray(t)), 1.0,
            lambda x: 0.5 * np.tanh(x), 1.0, grid, delta, 2,
        )
        assert np.allclose(k.rows.sum(axis=1), 1.0)
        # from the origin the flow stays put, so the diagonal carries at least e^{-delta}
        assert k.rows[10, 10] >= np.exp(-delta) - 1e-12
        assert k.diagnostics["hull_exits"] == 0.0

    def test_pdp_vanishing_rate_follows_flow(self):
        """Test that a near-zero jump rate leaves the snapped deterministic flow"""
        grid = StateGrid.uniform(-3.0, 3.0, 21, impulse_indices=[10])
        delta = 0.25
        k = discretize_pdp(
            lambda x, t: np.asarray(x) * np.exp(-np.asarray(t)), 1e-12,
            lambda x: 0.5 * np.tanh(x), 1.0, grid, delta, 2,
        )
        ends = snap_to_grid(grid.coordinates * np.exp(-delta), grid.coordinates)
        for i, j in enumerate(ends):
            assert k.rows[i, j] >= 1.0 - 1e-10

    def test_pdp_fast_jumps_give_gaussian_rows(self):
        """Test that a frozen flow with fast jumps to 0 gives the discretized standard normal"""
        grid = StateGrid.uniform(-3.0, 3.0, 21, impulse_indices=[10])
        k = discretize_pdp(lambda x, t: np.asarray(x, dtype=float), 50.0,
                           lambda x: np.zeros_like(x), 1.0, grid, 1.0, 0)
        masses = np.diff(norm.cdf(cell_edges(grid.coordinates)))
        expected = masses / masses.sum()
        for row in k.rows:
            assert np.max(np.abs(row - expected)) < 1e-10

    def test_pdp_rejects_nonpositive_rate(self):
        """Test jump-rate validation"""
        grid = StateGrid.uniform(-1.0, 1.0, 5)
        with pytest.raises(ModelError):
            discretize_pdp(lambda x, t: x, 0.0, lambda x: x, 1.0, grid, 0.5)


class TestSampling:
    """Test inverse-transform sampling"""

    def test_draw_indices_boundaries(self):
        """Test the u >= cumulative counting rule"""
        cum = np.array([[0.2, 0.5, 1.0]])
        states = np.zeros(3, dtype=np.int64)
        drawn = draw_indices(cum, states, np.array([0.1, 0.2, 0.7]))
        assert drawn.tolist() == [0, 1, 2]

    def test_seeded_sampling_reproducible(self, two_state_grid):
        """Test that equal seeds give equal draws"""
        k = build_finite_chain([[0.5, 0.5], [0.2, 0.8]], two_state_grid, 1.0, 0)
        states = np.array([0, 1] * 50)
        a = sample_steps(k, states, np.random.default_rng(3))
        b = sample_steps(k, states, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_sample_step_frequency(self, two_state_grid):
        """Test the empirical frequency of one row against a binomial interval"""
        k = build_finite_chain([[0.7, 0.3], [0.4, 0.6]], two_state_grid, 1.0, 0)
        rng = np.random.default_rng(2024)
        cum = cumulative_rows(k.rows)
        n = 1_000_000
        hits = sum(sample_step(k, 0, rng, cum) == 0 for _ in range(n))
        assert abs(hits / n - 0.7) <= 0.002

    def test_sample_step_uses_kernel_rows(self, two_state_grid):
        """Test the default rows agree with an explicit cumulative table"""
        k = build_finite_chain([[0.7, 0.3], [0.4, 0.6]], two_state_grid, 1.0, 0)
        a = [sample_step(k, 1, np.random.default_rng(s)) for s in range(20)]
        b = [sample_step(k, 1, np.random.default_rng(s), cumulative_rows(k.rows)) for s in range(20)]
        assert a == b

    def test_sample_step_bad_state(self, two_state_grid):
        """Test rejection of an out-of-range state"""
        k = build_finite_chain([[0.7, 0.3], [0.4, 0.6]], two_state_grid, 1.0, 0)
        with pytest.raises(ModelError):
            sample_step(k, 2, np.random.default_rng(0))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
