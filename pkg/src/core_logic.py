# src/core_logic.py
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from src.config import ExperimentConfig
from src.cost_model import CostSpec, build_cost
from src.dyadic_solver import (
    NO_IMPULSE,
    DyadicBellmanSolver,
    SolverOptions,
    extract_policy,
    lambda_ladder,
    verify_fixed_point,
)
from src.errors import VerificationError
from src.finite_horizon import budget_convergence, grid_convergence, solve_finite_horizon, stopping_crosscheck
from src.mc_simulation import (
    ValidationReport,
    drift_check,
    estimate_cost_rate,
    simulate_batch,
    validate_no_impulse,
    validate_policy,
)
from src.oracles import (
    discretizer_distance,
    impulse_tree_oracle,
    policy_enumeration_oracle,
    sample_pdp_step,
    sample_reflected_step,
    stopping_region_oracle,
    stopping_tree_oracle,
)
from src.reference_models import (
    ReferenceModel,
    cheap_shift,
    ladder_suite,
    pdp_parameters,
    pdp_reference,
    random_model,
    reference_suite,
    reflected_reference,
)
from src.semigroup_mpe import solve_mpe, verify_change_of_measure
from src.state_models import (
    StateGrid,
    build_finite_chain,
    build_from_generator,
    check_minorization,
    dyadic_ladder,
    discretize_pdp,
    discretize_reflected_diffusion,
)
from src.stopping_solver import (
    finite_horizon_stopping,
    solve_dyadic_stopping,
    stopping_ladder,
    verify_stopping_martingale,
)
from src import table_io


@dataclass
class CheckRecord:
    suite: str
    model: str
    check: str
    value: float
    tolerance: float
    passed: bool


@dataclass
class RunResult:
    """Artifacts written by one subcommand plus a short summary."""

    command: str
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def build_reward(spec: Any, coords: np.ndarray) -> np.ndarray:
    if isinstance(spec, dict):
        if spec["kind"] == "constant":
            return np.full(coords.shape[0], spec["value"])
        if spec["kind"] == "abs":
            return spec["scale"] * np.abs(coords)
        return spec["scale"] * np.tanh(coords)
    return np.asarray(spec, dtype=float)


def build_model(cfg: ExperimentConfig) -> ReferenceModel:
    """Grid, finest kernel (level m_max) and certified cost table of the configured model."""
    model, cost_cfg = cfg.model, cfg.cost
    level = cfg.dyadic["m_max"]
    delta = 2.0 ** -level
    impulse = cost_cfg["impulse_indices"]
    ref = cfg.solver["reference_index"]

    if model["type"] == "finite":
        grid = StateGrid.from_points(model["points"], impulse, ref)
        if "rows" in model:
            kernel = build_finite_chain(model["rows"], grid, delta, level)
        else:
            kernel = build_from_generator(model["generator"], grid, level)
    else:
        g = model["grid"]
        grid = StateGrid.uniform(g["lower"], g["upper"], g["size"], impulse, ref)
        if model["type"] == "pdp":
            rate, scale = model["flow_rate"], model["shift"]["scale"]
            shift = ((lambda x: scale * np.tanh(x)) if model["shift"]["kind"] == "tanh"
                     else (lambda x: scale * np.asarray(x)))
            kernel = discretize_pdp(
                lambda x, t: np.asarray(x) * np.exp(-rate * np.asarray(t)),
                model["jump_rate"], shift, model["noise_std"], grid, delta, level,
                post_jump_flow=model["post_jump_flow"],
            )
        else:
            value = model["diffusion"]
            kernel = discretize_reflected_diffusion(lambda x: value, tuple(model["domain"]), grid, delta, level)

    reward = build_reward(model["reward"], grid.points[:, 0])
    spec = CostSpec(
        kind=cost_cfg["kind"],
        c0=cost_cfg["c0"],
        cap=math.inf if cost_cfg["cap"] is None else cost_cfg["cap"],
        table=None if "table" not in cost_cfg else np.asarray(cost_cfg["table"]),
        departure=None if "departure" not in cost_cfg else np.asarray(cost_cfg["departure"]),
        arrival=None if "arrival" not in cost_cfg else np.asarray(cost_cfg["arrival"]),
    )
    return ReferenceModel(model["name"], grid, kernel, build_cost(spec, grid, reward))


class HarnessCoreLogic:
    """
    Holds the pipelines behind each subcommand: builds the configured model, runs the
    solvers, writes tables and collects the verification battery.
    """

    def __init__(self, config: ExperimentConfig, out_dir: Optional[Path] = None):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.out_dir = Path(out_dir or config.output["directory"])
        self.options = SolverOptions.from_config(config.solver)
        self.workers = int(config.performance.get("workers", 1))
        self._model: Optional[ReferenceModel] = None

    @property
    def model(self) -> ReferenceModel:
        if self._model is None:
            self._model = build_model(self.config)
            self.logger.info("Model '%s' built: %d states, finest level %s",
                             self._model.name, self._model.grid.size, self._model.kernel.level)
        return self._model

    def _csv(self, name: str, rows: List[Dict[str, Any]], result: RunResult) -> None:
        if "csv" in self.config.output["formats"]:
            path = table_io.write_csv(self.out_dir / name, rows, self.config.config_hash,
                                      self.config.simulation["seed"])
            result.artifacts.append(path)

    def _text(self, name: str, text: str, result: RunResult) -> None:
        if "txt" in self.config.output["formats"]:
            result.artifacts.append(table_io.write_text(self.out_dir / name, text))

    def _level_kernel(self, level: int):
        return dyadic_ladder(self.model.kernel, level)[level]

    def _provenance(self) -> str:
        return f"config_hash {self.config.config_hash}\nseed {self.config.simulation['seed']}\n"

    # ------------------------------------------------------------------ subcommands

    def run_solve(self) -> RunResult:
        result = RunResult("solve")
        model = self.model
        kernel = model.kernel
        minorization = check_minorization(kernel, model.grid)
        solution = DyadicBellmanSolver(self.options, self.logger).solve(kernel, model.cost)
        residual, equivalence = verify_fixed_point(solution, kernel, model.cost)
        mpe = solve_mpe(kernel, model.cost.f, self.options.reference_index)
        summary = {
            "model": model.name,
            "m": kernel.level,
            "lambda": solution.lam,
            "r_f": mpe.r_f,
            "residual": residual,
            "equivalence_defect": equivalence,
            "iterations": solution.iterations,
            "method": solution.method,
            "minorization_a": minorization.a,
            "nu_on_U": minorization.nu_on_U,
            "impulse_states": len(solution.region_states),
        }
        result.summary = summary
        self._csv("solution.csv", [summary], result)
        self._text("solution.txt", self._provenance() + table_io.format_solution(solution), result)
        self._text("mpe.txt", self._provenance() + table_io.format_mpe(mpe), result)
        self._text("kernel.txt", table_io.format_kernel(kernel), result)
        if "txt" in self.config.output["formats"]:
            result.artifacts.append(table_io.write_cost(self.out_dir / "cost.txt", model.cost))
        return result

    def run_ladder(self) -> RunResult:
        result = RunResult("ladder")
        ladder = lambda_ladder(self.model.kernel, self.model.cost, self.config.dyadic["m_min"],
                               self.options, self.workers)
        self._csv("ladder.csv", ladder.rows(), result)
        result.summary = {
            "model": self.model.name,
            "lambda_limit": ladder.lambda_limit,
            "richardson": ladder.richardson,
            "r_f": ladder.r_f,
            "case": ladder.case,
        }
        return result

    def run_finite_horizon(self) -> RunResult:
        result = RunResult("finite-horizon")
        fh = self.config.finite_horizon
        model = self.model
        value = solve_finite_horizon(model.kernel, model.cost, fh["T"], fh["budget"])
        ref = self.options.reference_index
        budgets = budget_convergence(model.kernel, model.cost, fh["T"], fh["budget"], ref)
        grid = grid_convergence(model.kernel, model.cost, fh["T"], fh["budget"], self.config.dyadic["m_min"], ref)
        self._csv("finite_horizon.csv", value.rows(), result)
        self._csv("budget_convergence.csv",
                  [{"n": n, "value": v} for n, v in enumerate(budgets.values)], result)
        self._csv("grid_convergence.csv",
                  [{"m": m, "value": grid.values[m], "gap": grid.gaps.get(m, float("nan"))}
                   for m in grid.levels], result)
        result.summary = {
            "model": model.name,
            "value": float(value.surface[0, ref]),
            "n_star": budgets.n_star,
            "n_star_bound": budgets.bound,
        }
        if fh["budget"] >= 1:
            result.summary["stopping_crosscheck"] = stopping_crosscheck(model.kernel, model.cost, value)
        return result

    def run_simulate(self) -> RunResult:
        result = RunResult("simulate")
        sim = self.config.simulation
        model = self.model
        kernel = self._level_kernel(sim["level"])
        x0 = self.options.reference_index if sim["x0"] is None else sim["x0"]
        solution = DyadicBellmanSolver(self.options, self.logger).solve(kernel, model.cost)
        policy = extract_policy(solution, kernel, model.cost)
        batch = simulate_batch(kernel, policy, model.cost, x0, sim["T"], sim["n_paths"], sim["seed"], self.workers)
        report = estimate_cost_rate(batch, sim["T"])
        mpe = solve_mpe(kernel, model.cost.f, self.options.reference_index)
        baseline = validate_no_impulse(kernel, model.cost.f, sim["T"], sim["n_paths"], mpe,
                                       sim["seed"] + 1, x0, self.workers)
        rows = [
            report.to_row(model.name, policy.describe(), kernel.level),
            baseline.simulation.to_row(model.name, "no-impulse", kernel.level),
        ]
        self._csv("simulation.csv", rows, result)
        result.summary = {
            "model": model.name,
            "estimate": report.estimate,
            "std_error": report.std_error,
            "lambda": solution.lam,
            "no_impulse_estimate": baseline.simulation.estimate,
            "r_f": mpe.r_f,
        }
        return result

    def _stopping_data(self, key: str) -> np.ndarray:
        value = self.config.stopping[key]
        return np.asarray(value, dtype=float) if isinstance(value, list) else np.full(self.model.grid.size, value)

    def run_stopping(self) -> RunResult:
        result = RunResult("stopping")
        kernel = self.model.kernel
        g, G = self._stopping_data("g"), self._stopping_data("G")
        T = self.config.stopping["T"]
        if T is None:
            sol = solve_dyadic_stopping(kernel, g, G)
            rows = [{"t": 0.0, "state_index": x, "u": float(u), "stop_flag": int(s)}
                    for x, (u, s) in enumerate(zip(sol.u, sol.stop_region))]
            sub, mart = verify_stopping_martingale(sol, kernel, g)
            result.summary = {"iterations": sol.iterations, "residual": sol.residual,
                              "submartingale_defect": sub, "martingale_defect": mart}
        else:
            surface = finite_horizon_stopping(kernel, g, G, T)
            rows = [{"t": float(t), "state_index": x, "u": float(surface.u[j, x]), "stop_flag": int(surface.stop[j, x])}
                    for j, t in enumerate(surface.times) for x in range(kernel.n_states)]
            result.summary = {"u0_min": float(surface.u[0].min()), "u0_max": float(surface.u[0].max())}
        self._csv("stopping.csv", rows, result)
        return result

    # ------------------------------------------------------------------ verification battery

    def run_verify(self, mc: bool = True, discretizers: bool = True) -> RunResult:
        """Invariant and oracle battery; raises VerificationError after writing the report."""
        result = RunResult("verify")
        checks: List[CheckRecord] = []

        def record(suite: str, model: str, check: str, value: float, tol: float,
                   ok: Optional[bool] = None) -> None:
            passed = bool(value <= tol) if ok is None else bool(ok)
            checks.append(CheckRecord(suite, model, check, float(value), float(tol), passed))
            if not passed:
                self.logger.error("Check failed: %s/%s/%s value=%.3e tol=%.3e", suite, model, check, value, tol)

        def guarded(suite_name: str, model: str, task: Callable[[], None]) -> None:
            try:
                task()
            except VerificationError as exc:
                record(suite_name, model, "raised", 1.0, 0.0, False)
                self.logger.error("%s on %s: %s", suite_name, model, exc)

        suite = reference_suite()
        for model in [self.model] + suite:
            guarded("bellman", model.name, lambda: self._verify_bellman(model, record))
            guarded("mpe", model.name, lambda: self._verify_mpe(model, record))
        for model in ladder_suite():
            guarded("ladder", model.name, lambda: self._verify_ladder(model, record))
        guarded("stopping", "suite", lambda: self._verify_stopping(record))
        guarded("finite_horizon", "suite", lambda: self._verify_finite_horizon(record))
        if mc:
            guarded("monte_carlo", "suite", lambda: self._verify_monte_carlo(record))
        if discretizers:
            guarded("discretizer", "suite", lambda: self._verify_discretizers(record))

        self._csv("verify.csv", [vars(c) for c in checks], result)
        failed = [c for c in checks if not c.passed]
        result.summary = {"checks": len(checks), "failed": len(failed)}
        if failed:
            raise VerificationError(f"{len(failed)} of {len(checks)} checks failed; first: "
                                    f"{failed[0].suite}/{failed[0].model}/{failed[0].check}")
        self.logger.info("Verification passed: %d checks", len(checks))
        return result

    def _verify_bellman(self, model: ReferenceModel, record: Callable) -> None:
        kernel, cost = model.kernel, model.cost
        if kernel.level is not None and kernel.level > 3 and kernel.n_states <= 6:
            kernel = dyadic_ladder(kernel, 3)[3]
        options = SolverOptions(reference_index=model.grid.reference_index)
        sol = DyadicBellmanSolver(options, self.logger).solve(kernel, cost)
        residual, equivalence = verify_fixed_point(sol, kernel, cost)
        record("bellman", model.name, "residual", residual, 1e-10)
        record("bellman", model.name, "equivalence", equivalence, 1e-9)
        extract_policy(sol, kernel, cost)
        if kernel.n_states <= 6 and len(cost.targets) <= 3:
            oracle = policy_enumeration_oracle(kernel, cost)
            record("policy_oracle", model.name, "lambda_gap", abs(oracle.rate - sol.lam), 1e-8)

    def _verify_mpe(self, model: ReferenceModel, record: Callable) -> None:
        kernel = model.kernel
        mpe = solve_mpe(kernel, model.cost.f, model.grid.reference_index)
        record("mpe", model.name, "residual", mpe.residual, 1e-10)
        record("mpe", model.name, "tilted_row_sums", float(np.max(np.abs(mpe.tilted_kernel.rows.sum(axis=1) - 1))), 1e-10)
        if kernel.n_states <= 8 and kernel.n_states ** 4 <= 1 << 18:
            G = np.linspace(0.0, 1.0, kernel.n_states)
            defect = verify_change_of_measure(kernel, model.cost.f, mpe, G, 0.5 * mpe.r_f, 4)
            record("mpe", model.name, "change_of_measure", defect, 1e-10)

    def _verify_ladder(self, model: ReferenceModel, record: Callable) -> None:
        finest = model.kernel
        if finest.level is None:
            return
        options = SolverOptions(reference_index=model.grid.reference_index)
        ladder = lambda_ladder(finest, model.cost, max(0, finest.level - 6), options, self.workers)
        lams = [rec.lam for rec in ladder.levels]
        worst_rise = max([b - a for a, b in zip(lams, lams[1:])] or [0.0])
        record("ladder", model.name, "monotone", worst_rise, 1e-8)
        record("ladder", model.name, "below_r_f", max(lams) - ladder.r_f, 1e-8)
        record("ladder", model.name, "above_minus_f_norm", -model.cost.f_norm - min(lams), 1e-8)
        if np.ptp(model.cost.f) == 0:
            record("ladder", model.name, "constant_reward",
                   max(abs(v - model.cost.f[0]) for v in lams), 1e-10, ladder.case == NO_IMPULSE)
        if model.name == "prohibitive":
            record("ladder", model.name, "equals_r_f", max(abs(v - ladder.r_f) for v in lams), 1e-8)

    def _verify_stopping(self, record: Callable) -> None:
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            n = 8 if seed == 0 else 3
            grid = StateGrid.abstract(n)
            kernel = build_finite_chain(rng.dirichlet(np.ones(n), size=n), grid, 0.5, 1)
            g, G = rng.uniform(0.1, 1.0, n), rng.uniform(0.0, 2.0, n)
            sol = solve_dyadic_stopping(kernel, g, G)
            oracle = stopping_region_oracle(kernel, g, G)
            name = f"stopping_{seed}"
            record("stopping", name, "region_oracle", float(np.max(np.abs(sol.u - oracle))), 1e-9)
            record("stopping", name, "monotone_iteration", sol.max_increase, 1e-12)
            sub, mart = verify_stopping_martingale(sol, kernel, g)
            record("stopping", name, "submartingale", sub, 1e-12)
            record("stopping", name, "martingale", mart, 1e-12)
            if n == 3:
                gt, Gt = rng.uniform(-0.5, 1.0, (5, n)), rng.uniform(-1.0, 1.0, (5, n))
                surface = finite_horizon_stopping(kernel, gt, Gt, 2.0)
                tree = stopping_tree_oracle(kernel, gt, Gt, 2.0)
                record("stopping", name, "tree_oracle", float(np.max(np.abs(surface.u[0] - tree))), 1e-9)
        model = cheap_shift(level=5)
        ladder = stopping_ladder(model.kernel, 0.5, np.array([0.0, 0.5, 1.0, 2.0]), 2)
        record("stopping", model.name, "grid_monotone", 0.0, 0.0, ladder.monotone)

    def _verify_finite_horizon(self, record: Callable) -> None:
        for seed in range(3):
            model = random_model(200 + seed, n_states=3, n_targets=2, level=1)
            for budget in (1, 2):
                value = solve_finite_horizon(model.kernel, model.cost, 1.0, budget)
                tree = impulse_tree_oracle(model.kernel, model.cost, 1.0, budget)
                record("finite_horizon", model.name, f"tree_oracle_n{budget}",
                       float(np.max(np.abs(value.surface[0] - tree))), 1e-9)
                record("finite_horizon", model.name, f"stopping_crosscheck_n{budget}",
                       stopping_crosscheck(model.kernel, model.cost, value), 1e-10)
        model = cheap_shift(level=4)
        budget_convergence(model.kernel, model.cost, 2.0, 4, 0)
        grid_convergence(model.kernel, model.cost, 2.0, 2, 0, 0)
        record("finite_horizon", model.name, "budget_and_grid_monotone", 0.0, 0.0, True)

    @staticmethod
    def _record_validation(record: Callable, name: str, prefix: str, check: ValidationReport,
                           absolute_tol: Optional[float] = None) -> None:
        sim = check.simulation
        record("monte_carlo", name, f"{prefix}_three_sigma", check.sampling_gap, 3 * sim.std_error,
               check.within_three_sigma)
        record("monte_carlo", name, f"{prefix}_bias_bound", check.offset, check.bias_bound,
               check.offset_within_bound)
        if absolute_tol is not None:
            record("monte_carlo", name, f"{prefix}_gap", check.gap, absolute_tol)

    def _verify_monte_carlo(self, record: Callable) -> None:
        seed = int(self.config.simulation["seed"])
        model = cheap_shift(level=6)
        kernel = dyadic_ladder(model.kernel, 3)[3]
        sol = DyadicBellmanSolver(SolverOptions(), self.logger).solve(kernel, model.cost)
        policy = extract_policy(sol, kernel, model.cost)
        check = validate_policy(kernel, model.cost, policy, sol.lam, sol.w, 200.0, 10_000, seed, 0, self.workers)
        self._record_validation(record, model.name, "policy_rate", check, 0.05)
        drift = drift_check(kernel, policy, model.cost, 0, 50.0, 4_000, seed + 2, workers=self.workers)
        record("monte_carlo", model.name, "policy_drift", abs(drift.estimate_T - drift.estimate_2T),
               2 * (drift.std_error_T + drift.std_error_2T) + 0.02, drift.within)
        mixing = random_model(300, n_states=3, n_targets=1, level=3)
        mpe = solve_mpe(mixing.kernel, mixing.cost.f, mixing.grid.reference_index)
        baseline = validate_no_impulse(mixing.kernel, mixing.cost.f, 10.0, 10_000, mpe, seed + 1,
                                       workers=self.workers)
        self._record_validation(record, mixing.name, "no_impulse_rate", baseline)

    def _verify_discretizers(self, record: Callable, n_samples: int = 1_000_000) -> None:
        rng = np.random.default_rng(int(self.config.simulation["seed"]))
        pdp = pdp_reference()
        params = pdp_parameters()
        coords = pdp.grid.coordinates
        distances = discretizer_distance(
            pdp.kernel.rows,
            lambda x: sample_pdp_step(params.flow, params.jump_rate, params.shift_map, params.noise_std,
                                      coords, coords[x], pdp.kernel.delta, n_samples, rng),
            [0, 10, 20],
        )
        record("discretizer", "pdp", "total_variation", max(distances.values()), 0.02)
        reflected = reflected_reference()
        coords = reflected.grid.coordinates
        distances = discretizer_distance(
            reflected.kernel.rows,
            lambda x: sample_reflected_step(lambda y: np.ones_like(y), (0.0, 1.0), coords, coords[x],
                                            reflected.kernel.delta, n_samples, rng),
            [0, 5, 10],
        )
        record("discretizer", "reflected", "total_variation", max(distances.values()), 0.02)
