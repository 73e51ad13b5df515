# ============================================================================
# MONTE CARLO SIMULATION TESTS
# ============================================================================
import pytest
import numpy as np

from src.dyadic_solver import DyadicBellmanSolver, extract_policy
from src.errors import ModelError
from src.mc_simulation import (
    ImpulsePolicy,
    drift_check,
    estimate_cost_rate,
    policy_log_moment,
    policy_rate,
    recompute_exponent,
    simulate_batch,
    simulate_controlled,
    validate_no_impulse,
    validate_policy,
)
from src.reference_models import cheap_shift, single_state
from src.semigroup_mpe import solve_mpe
from src.state_models import StateGrid, build_finite_chain


@pytest.fixture
def cheap_model():
    """Cheap-shift chain built directly at level 3"""
    return cheap_shift(level=3)


@pytest.fixture
def cheap_policy(cheap_model):
    """Solved hitting-set policy of the cheap-shift chain"""
    sol = DyadicBellmanSolver().solve(cheap_model.kernel, cheap_model.cost)
    return sol, extract_policy(sol, cheap_model.kernel, cheap_model.cost)


class TestImpulsePolicy:
    """Test policy validation"""

    def test_missing_target(self):
        """Test a region state without a shift"""
        with pytest.raises(ModelError, match="without a shift target"):
            ImpulsePolicy(frozenset({3}), {})

    def test_target_inside_region(self):
        """Test a shift landing in the region"""
        with pytest.raises(ModelError, match="inside the impulse region"):
            ImpulsePolicy(frozenset({2, 3}), {2: 3, 3: 0})

    def test_target_outside_U(self, cheap_model):
        """Test a target that is not an impulse destination"""
        policy = ImpulsePolicy(frozenset({3}), {3: 2})
        with pytest.raises(ModelError, match="not in U"):
            policy.check_targets(cheap_model.cost)

    def test_describe(self):
        """Test the compact policy label"""
        assert ImpulsePolicy.empty().describe() == "no-impulse"
        assert ImpulsePolicy(frozenset({3, 2}), {3: 0, 2: 1}).describe() == "2->1;3->0"


class TestSimulation:
    """Test controlled path simulation"""

    def test_single_state_is_deterministic(self):
        """Test estimate = f0 with zero spread on one state"""
        model = single_state()
        batch = simulate_batch(model.kernel, ImpulsePolicy.empty(), model.cost, 0, 5.0, 100, seed=1)
        report = estimate_cost_rate(batch, 5.0)
        assert abs(report.estimate - 0.7) < 1e-12
        assert report.std_error == 0.0
        assert abs(report.ess - 100.0) < 1e-9

    def test_seeded_replay(self, cheap_model, cheap_policy):
        """Test that a seed reproduces every exponent"""
        _, policy = cheap_policy
        a = simulate_batch(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 3000, seed=7)
        b = simulate_batch(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 3000, seed=7)
        assert np.array_equal(a.exponents, b.exponents)

    def test_workers_do_not_change_paths(self, cheap_model, cheap_policy):
        """Test that chunked streams are independent of the worker count"""
        _, policy = cheap_policy
        a = simulate_batch(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 3000, seed=7)
        b = simulate_batch(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 3000, seed=7, workers=3)
        assert np.array_equal(a.exponents, b.exponents)
        assert np.array_equal(a.impulse_counts, b.impulse_counts)

    def test_recompute_exponent(self, cheap_model, cheap_policy):
        """Test that recorded paths reproduce their exponent"""
        _, policy = cheap_policy
        rng = np.random.default_rng(11)
        for _ in range(5):
            record = simulate_controlled(cheap_model.kernel, policy, cheap_model.cost, 3, 20.0, rng)
            assert abs(recompute_exponent(record, cheap_model.kernel, cheap_model.cost) - record.exponent) < 1e-12
            assert record.n_impulses >= 1
            assert record.impulse_times[0] == 0.0

    def test_region_never_occupied_after_shift(self, cheap_model, cheap_policy):
        """Test that decision-time states avoid the region after a shift"""
        _, policy = cheap_policy
        record = simulate_controlled(cheap_model.kernel, policy, cheap_model.cost, 3, 5.0,
                                     np.random.default_rng(2))
        assert record.impulse_from[0] == 3
        assert record.impulse_targets[0] == policy.shift_map[3]

    def test_bad_initial_state(self, cheap_model):
        """Test x0 range check"""
        with pytest.raises(ModelError):
            simulate_batch(cheap_model.kernel, ImpulsePolicy.empty(), cheap_model.cost, 9, 1.0, 10, seed=0)


class TestEstimator:
    """Test the log-mean-exp estimator"""

    def test_needs_two_paths(self, cheap_model):
        """Test rejection of a single path"""
        batch = simulate_batch(cheap_model.kernel, ImpulsePolicy.empty(), cheap_model.cost, 0, 1.0, 1, seed=0)
        with pytest.raises(ModelError):
            estimate_cost_rate(batch, 1.0)

    def test_jensen_lower_bound(self, cheap_model, cheap_policy):
        """Test estimate >= mean exponent / T"""
        _, policy = cheap_policy
        batch = simulate_batch(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 2000, seed=3)
        report = estimate_cost_rate(batch, 10.0)
        assert report.estimate >= report.mean_exponent / 10.0
        assert report.to_row("cheap_shift", "policy", 3)["m"] == 3


class TestExactReferences:
    """Test exact rates of fixed policies"""

    def test_policy_rate_matches_lambda(self, cheap_model, cheap_policy):
        """Test the solved policy attains the Bellman lambda"""
        sol, policy = cheap_policy
        assert abs(policy_rate(cheap_model.kernel, cheap_model.cost, policy) - sol.lam) < 1e-7

    def test_log_moment_growth(self, cheap_model, cheap_policy):
        """Test ln E e^{exponent} / T approaches the rate"""
        sol, policy = cheap_policy
        h = policy_log_moment(cheap_model.kernel, cheap_model.cost, policy, 200.0)
        assert abs(h[0] / 200.0 - sol.lam) <= np.ptp(sol.w) / 200.0 + 1e-9


class TestValidation:
    """Test Monte Carlo agreement with the deterministic solvers"""

    def test_no_impulse_rate(self):
        """Test the uncontrolled estimate on a resampled pair"""
        grid = StateGrid.abstract(2)
        kernel = build_finite_chain([[0.5, 0.5], [0.5, 0.5]], grid, 1.0, 0)
        mpe = solve_mpe(kernel, [0.0, 0.5])
        check = validate_no_impulse(kernel, [0.0, 0.5], 10.0, 10_000, mpe, seed=12345)
        assert abs(check.reference_rate - np.log(0.5 * (1.0 + np.exp(0.5)))) < 1e-12
        assert abs(check.exact_rate - 0.9 * check.reference_rate) < 1e-12
        assert abs(check.bias_bound - 0.05) < 1e-12
        assert check.within_three_sigma
        assert check.offset_within_bound
        assert check.agrees

    def test_three_sigma_is_not_widened_by_bias_bound(self):
        """Test the sampling check ignores the bias bound at a short horizon"""
        grid = StateGrid.abstract(2)
        kernel = build_finite_chain([[0.5, 0.5], [0.5, 0.5]], grid, 1.0, 0)
        mpe = solve_mpe(kernel, [0.0, 0.5])
        check = validate_no_impulse(kernel, [0.0, 0.5], 10.0, 10_000, mpe, seed=12345)
        # the finite-horizon offset alone exceeds three standard errors
        assert check.offset > 3 * check.simulation.std_error
        assert check.gap > 3 * check.simulation.std_error
        assert check.sampling_gap <= 3 * check.simulation.std_error

    def test_policy_rate(self, cheap_model, cheap_policy):
        """Test the policy-following estimate against lambda"""
        sol, policy = cheap_policy
        check = validate_policy(cheap_model.kernel, cheap_model.cost, policy, sol.lam, sol.w,
                                200.0, 10_000, seed=12345)
        assert check.agrees
        assert check.gap <= 0.05
        assert check.offset <= check.bias_bound + 1e-9
        assert check.simulation.impulse_stats["mean"] > 0

    def test_absolute_tolerance_applies(self, cheap_model, cheap_policy):
        """Test that a zero absolute tolerance rejects any estimate"""
        sol, policy = cheap_policy
        check = validate_policy(cheap_model.kernel, cheap_model.cost, policy, sol.lam, sol.w,
                                20.0, 500, seed=1, absolute_tol=0.0)
        assert not check.agrees


class TestDriftCheck:
    """Test the horizon-doubling stability check"""

    def test_cheap_shift_rate_is_stable(self, cheap_model, cheap_policy):
        """Test estimates at T and 2T agree on the cheap-shift chain"""
        _, policy = cheap_policy
        drift = drift_check(cheap_model.kernel, policy, cheap_model.cost, 0, 50.0, 2_000, seed=5)
        assert drift.within
        assert drift.std_error_T > 0 and drift.std_error_2T > 0

    def test_negative_slack_rejects(self, cheap_model, cheap_policy):
        """Test the comparison itself with an impossible slack"""
        _, policy = cheap_policy
        drift = drift_check(cheap_model.kernel, policy, cheap_model.cost, 0, 10.0, 200, seed=5, slack=-1.0)
        assert not drift.within


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
