"""
Impulse Harness - Test Suite
Integration tests across the configuration, the pipelines and the verification battery
"""

from pathlib import Path

import pytest

from src.config import load_experiment
from src.core_logic import HarnessCoreLogic, build_model
from src.main import EXIT_OK, main
from src.table_io import read_csv

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def experiment():
    """The shipped cheap-shift experiment"""
    return load_experiment(str(ROOT / "config.yaml"))


# ============================================================================
# INTEGRATION TESTS
# ============================================================================

class TestIntegration:
    """Integration tests for full pipeline"""

    @pytest.mark.parametrize("name", ["single_state", "constant_reward", "pdp", "reflected"])
    def test_shipped_configs_build(self, name):
        """Test that every shipped experiment resolves and builds"""
        experiment = load_experiment(str(ROOT / "configs" / f"{name}.yaml"))
        model = build_model(experiment)
        assert model.kernel.level == experiment.dyadic["m_max"]
        assert model.cost.n_states == experiment.n_states

    def test_solve_then_ladder(self, experiment, tmp_path):
        """Test that the finest-level solve and the ladder agree"""
        core = HarnessCoreLogic(experiment, tmp_path)
        solved = core.run_solve()
        ladder = core.run_ladder()
        assert abs(solved.summary["lambda"] - ladder.summary["lambda_limit"]) < 1e-10
        assert ladder.summary["case"] == "Impulsive"
        assert solved.summary["impulse_states"] >= 1

    def test_deterministic_battery(self, experiment, tmp_path):
        """Test the verification battery without sampling suites"""
        core = HarnessCoreLogic(experiment, tmp_path)
        result = core.run_verify(mc=False, discretizers=False)
        frame = read_csv(tmp_path / "verify.csv")
        assert result.summary["failed"] == 0
        assert frame["passed"].all()
        assert {"bellman", "policy_oracle", "mpe", "ladder", "stopping", "finite_horizon"} <= set(frame["suite"])
        ladder = frame[frame["suite"] == "ladder"]
        assert "equals_r_f" in set(ladder["check"])
        assert len(set(ladder["model"])) == 14

    def test_full_verify(self, tmp_path):
        """Test the verify subcommand end to end"""
        out = tmp_path / "verify"
        code = main(["verify", "--config", str(ROOT / "config.yaml"), "--out", str(out), "--quiet"])
        assert code == EXIT_OK
        frame = read_csv(out / "verify.csv")
        assert {"monte_carlo", "discretizer"} <= set(frame["suite"])
        assert {"policy_rate_three_sigma", "policy_rate_bias_bound", "policy_drift",
                "no_impulse_rate_three_sigma"} <= set(frame["check"])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
