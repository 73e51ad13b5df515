# scripts/benchmark.py
#!/usr/bin/env python3
import logging
import sys
import time
from pathlib import Path

import psutil

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.dyadic_solver import DyadicBellmanSolver, SolverOptions, extract_policy, lambda_ladder  # noqa: E402
from src.mc_simulation import estimate_cost_rate, simulate_batch  # noqa: E402
from src.oracles import policy_enumeration_oracle  # noqa: E402
from src.reference_models import cheap_shift, random_model  # noqa: E402
from src.state_models import dyadic_ladder  # noqa: E402

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


class PerformanceBenchmark:
    def __init__(self, n_paths: int = 10_000, workers: int = 1) -> None:
        self.n_paths = n_paths
        self.workers = workers
        self.metrics = {}
        self.process = psutil.Process()

    def _timed(self, name: str, task) -> None:
        t0 = time.perf_counter()
        task()
        self.metrics[name] = time.perf_counter() - t0
        logger.info("%-22s %.3f s", name, self.metrics[name])

    def run(self) -> None:
        print("\nImpulse Harness Performance Benchmark")
        print("-" * 50)
        model = cheap_shift(level=6)
        solver = DyadicBellmanSolver(SolverOptions())

        self._timed("solve (m=6)", lambda: solver.solve(model.kernel, model.cost))
        self._timed("ladder (m=0..6)", lambda: lambda_ladder(model.kernel, model.cost, 0, workers=self.workers))
        self._timed("random solves x10", lambda: [
            solver.solve(m.kernel, m.cost) for m in (random_model(seed) for seed in range(10))
        ])
        self._timed("policy oracle x10", lambda: [
            policy_enumeration_oracle(m.kernel, m.cost) for m in (random_model(seed) for seed in range(10))
        ])

        coarse = dyadic_ladder(model.kernel, 3)[3]
        policy = extract_policy(solver.solve(coarse, model.cost), coarse, model.cost)

        def simulate() -> None:
            batch = simulate_batch(coarse, policy, model.cost, 0, 200.0, self.n_paths, 12345, self.workers)
            estimate_cost_rate(batch, 200.0)

        self._timed("simulation (T=200)", simulate)
        self.metrics["cpu_percent"] = self.process.cpu_percent(interval=0.1)
        self.metrics["mem_mb"] = self.process.memory_info().rss / (1024 * 1024)
        self._print_results()

    def _print_results(self) -> None:
        print("\nBenchmark Results")
        print("-" * 50)
        for name, value in self.metrics.items():
            if name == "cpu_percent":
                print(f"{'CPU Usage':<22}: {value:.1f}%")
            elif name == "mem_mb":
                print(f"{'Memory Usage':<22}: {value:.1f} MB")
            else:
                print(f"{name:<22}: {value:.3f} s")
        print("-" * 50)


def main() -> int:
    n_paths = 10_000
    if len(sys.argv) > 1:
        try:
            n_paths = int(sys.argv[1])
        except ValueError:
            logger.warning("Usage: python scripts/benchmark.py [n_paths]")
    PerformanceBenchmark(n_paths=n_paths).run()
    return 0


if __name__ == "__main__":
    sys.exit(main())
