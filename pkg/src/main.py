"""
Impulse Harness - Main Application Entry Point
Parses the command line, resolves the experiment configuration and runs one pipeline
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from src.config import ExperimentConfig, load_experiment
from src.core_logic import HarnessCoreLogic, RunResult
from src.errors import ConfigError, CostError, ModelError, SolverError, VerificationError
from src.utils import setup_logging

COMMANDS = ("solve", "ladder", "finite-horizon", "simulate", "stopping", "verify")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFICATION = 4


class HarnessApp:
    """Main application class: one resolved configuration, one subcommand per run"""

    def __init__(self, config_path: str = "config.yaml", seed: Optional[int] = None,
                 out: Optional[str] = None, quiet: bool = False):
        """Load and resolve the configuration, then configure logging

        Args:
            config_path: Path to the experiment YAML
            seed: Override for simulation.seed
            out: Override for output.directory
            quiet: Lower console logging to WARNING
        """
        self.experiment: ExperimentConfig = load_experiment(config_path).with_overrides(seed=seed, out=out)
        level = "WARNING" if quiet else self.experiment.system["log_level"]
        setup_logging(log_level=level, log_file=self.experiment.system["log_file"])
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(self.experiment.output["directory"])
        self.core_logic = HarnessCoreLogic(self.experiment, self.out_dir)
        self.logger.info("Harness initialized (config hash %s)", self.experiment.config_hash[:12])

    def run(self, command: str) -> RunResult:
        """Echo the resolved configuration and execute one subcommand pipeline"""
        handlers = {
            "solve": self.core_logic.run_solve,
            "ladder": self.core_logic.run_ladder,
            "finite-horizon": self.core_logic.run_finite_horizon,
            "simulate": self.core_logic.run_simulate,
            "stopping": self.core_logic.run_stopping,
            "verify": self.core_logic.run_verify,
        }
        if command not in handlers:
            raise ConfigError("command", f"unknown subcommand {command!r}; expected one of {COMMANDS}")
        self.experiment.echo(self.out_dir / "resolved_config.yaml")
        self.logger.info("Running '%s'", command)
        result = handlers[command]()
        for key, value in result.summary.items():
            self.logger.info("  %s: %s", key, value)
        self.logger.info("'%s' finished; %d artifacts in %s", command, len(result.artifacts), self.out_dir)
        return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impulse-harness",
        description="Risk-sensitive impulse control: dyadic solvers, ladders and verification",
    )
    parser.add_argument("command", choices=COMMANDS, help="pipeline to run")
    parser.add_argument("--config", default="config.yaml", help="experiment YAML (default: config.yaml)")
    parser.add_argument("--seed", type=int, default=None, help="override simulation.seed")
    parser.add_argument("--out", default=None, help="override output.directory")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Application entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    logger = logging.getLogger(__name__)
    debug = False
    try:
        app = HarnessApp(args.config, seed=args.seed, out=args.out, quiet=args.quiet)
        debug = app.experiment.system["log_level"] == "DEBUG"
        app.run(args.command)
    except (ConfigError, ModelError, CostError, FileNotFoundError, yaml.YAMLError) as e:
        setup_logging()
        logger.error("Configuration error: %s", e, exc_info=debug)
        return EXIT_CONFIG
    except SolverError as e:
        logger.error("Solver failure: %s", e, exc_info=debug)
        return EXIT_SOLVER
    except VerificationError as e:
        logger.error("Verification failure: %s", e, exc_info=debug)
        return EXIT_VERIFICATION
    except (np.linalg.LinAlgError, ArithmeticError) as e:
        logger.error("Numerical failure: %s", e, exc_info=debug)
        return EXIT_SOLVER
    except Exception as e:
        logger.error("Unexpected failure: %s", e, exc_info=True)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
