"""
Impulse Harness - Configuration Management Module
Handles loading, validation, echo and hashing of YAML experiment configurations
"""

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from src.errors import ConfigError

MODEL_TYPES = ("finite", "pdp", "reflected_diffusion")
REWARD_KINDS = ("constant", "abs", "tanh")
SHIFT_KINDS = ("tanh", "linear")
COST_KINDS = ("metric_capped", "rational", "logistic", "explicit_table", "separable")
OUTPUT_FORMATS = ("csv", "txt")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
MAX_LEVEL = 16


class Config:
    """Configuration manager for experiment files"""

    def __init__(self, config_path: str = "config.yaml"):
        """
        Initialize configuration from YAML file

        Args:
            config_path: Path to configuration file

        Raises:
            FileNotFoundError: If config file doesn't exist
            yaml.YAMLError: If config file is invalid
        """
        self.logger = logging.getLogger(__name__)
        self.config_path = Path(config_path)
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file"""
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                config = yaml.safe_load(f)
            self.logger.info(f"Configuration loaded from {self.config_path}")
            return config or {}
        except yaml.YAMLError as e:
            self.logger.error(f"Invalid YAML in config file: {e}")
            raise


def _block(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a mapping")
    return dict(value)


def _number(block: Dict[str, Any], key: str, where: str, default: Any = None, *,
            positive: bool = False, nonnegative: bool = False, integer: bool = False) -> Any:
    value = block.get(key, default)
    if value is None:
        return None
    field_name = f"{where}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field_name, f"expected a number, got {value!r}")
    if integer:
        if float(value) != int(value):
            raise ConfigError(field_name, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(field_name, "must be finite")
    if positive and not value > 0:
        raise ConfigError(field_name, f"must be > 0, got {value}")
    if nonnegative and value < 0:
        raise ConfigError(field_name, f"must be >= 0, got {value}")
    return value


def _float_list(value: Any, field_name: str) -> List[float]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(field_name, "expected a non-empty list of numbers")
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(field_name, f"non-numeric entry {item!r}")
        out.append(float(item))
    return out


def _matrix(value: Any, field_name: str) -> List[List[float]]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(field_name, "expected a non-empty list of rows")
    rows = [_float_list(row, field_name) for row in value]
    if any(len(row) != len(rows[0]) for row in rows):
        raise ConfigError(field_name, "rows have different lengths")
    return rows


def _multiple_of(T: float, level: int) -> bool:
    ratio = T * 2.0 ** level
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated experiment configuration (every block filled with defaults)."""

    model: Dict[str, Any]
    cost: Dict[str, Any]
    dyadic: Dict[str, Any]
    solver: Dict[str, Any]
    simulation: Dict[str, Any]
    finite_horizon: Dict[str, Any]
    stopping: Dict[str, Any]
    output: Dict[str, Any]
    performance: Dict[str, Any] = field(default_factory=dict)
    system: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        """Resolve defaults and validate field by field.

        Raises:
            ConfigError: "<block>.<field>: <message>" for the first offending field.
        """
        raw = copy.deepcopy(raw or {})
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a mapping")
        dyadic = cls._dyadic(_block(raw, "dyadic"))
        model = cls._model(_block(raw, "model"))
        n_states = model["n_states"]
        cost = cls._cost(_block(raw, "cost"), n_states)
        solver = cls._solver(_block(raw, "solver"), n_states)
        m_max = dyadic["m_max"]
        simulation = cls._simulation(_block(raw, "simulation"), dyadic, n_states)
        finite_horizon = cls._finite_horizon(_block(raw, "finite_horizon"), dyadic)
        stopping = cls._stopping(_block(raw, "stopping"), n_states, m_max)
        output = cls._output(_block(raw, "output"))
        performance = _block(raw, "performance")
        workers = _number(performance, "workers", "performance", 1, positive=True, integer=True)
        system = _block(raw, "system")
        log_level = str(system.get("log_level", "INFO")).upper()
        if log_level not in LOG_LEVELS:
            raise ConfigError("system.log_level", f"expected one of {LOG_LEVELS}, got {log_level!r}")
        log_file = system.get("log_file")
        return cls(
            model=model,
            cost=cost,
            dyadic=dyadic,
            solver=solver,
            simulation=simulation,
            finite_horizon=finite_horizon,
            stopping=stopping,
            output=output,
            performance={"workers": workers},
            system={"log_level": log_level, "log_file": None if log_file is None else str(log_file)},
        )

    @classmethod
    def from_config(cls, config: Config) -> "ExperimentConfig":
        return cls.from_dict(config.config)

    @staticmethod
    def _dyadic(block: Dict[str, Any]) -> Dict[str, Any]:
        m_min = _number(block, "m_min", "dyadic", 0, nonnegative=True, integer=True)
        m_max = _number(block, "m_max", "dyadic", 6, nonnegative=True, integer=True)
        if m_max > MAX_LEVEL:
            raise ConfigError("dyadic.m_max", f"must be <= {MAX_LEVEL}, got {m_max}")
        if m_min > m_max:
            raise ConfigError("dyadic.m_min", f"must be <= m_max={m_max}, got {m_min}")
        return {"m_min": m_min, "m_max": m_max}

    @staticmethod
    def _reward(value: Any, n_states: int) -> Any:
        if isinstance(value, dict):
            kind = value.get("kind")
            if kind not in REWARD_KINDS:
                raise ConfigError("model.reward.kind", f"expected one of {REWARD_KINDS}, got {kind!r}")
            key = "value" if kind == "constant" else "scale"
            amount = _number(value, key, "model.reward", 1.0)
            return {"kind": kind, key: amount}
        reward = _float_list(value, "model.reward")
        if len(reward) != n_states:
            raise ConfigError("model.reward", f"expected {n_states} values, got {len(reward)}")
        return reward

    @classmethod
    def _model(cls, block: Dict[str, Any]) -> Dict[str, Any]:
        kind = block.get("type", "finite")
        if kind not in MODEL_TYPES:
            raise ConfigError("model.type", f"expected one of {MODEL_TYPES}, got {kind!r}")
        out: Dict[str, Any] = {"type": kind, "name": str(block.get("name", kind))}
        if kind == "finite":
            has_rows, has_gen = block.get("rows") is not None, block.get("generator") is not None
            if has_rows == has_gen:
                raise ConfigError("model.rows", "finite models need exactly one of rows or generator")
            key = "rows" if has_rows else "generator"
            matrix = _matrix(block[key], f"model.{key}")
            n_states = len(matrix)
            if any(len(row) != n_states for row in matrix):
                raise ConfigError(f"model.{key}", "must be a square matrix")
            out[key] = matrix
            points = block.get("points")
            out["points"] = (_float_list(points, "model.points") if points is not None
                             else [float(i) for i in range(n_states)])
            if len(out["points"]) != n_states:
                raise ConfigError("model.points", f"expected {n_states} coordinates")
        else:
            grid = block.get("grid") or {}
            if not isinstance(grid, dict):
                raise ConfigError("model.grid", "must be a mapping")
            lower = _number(grid, "lower", "model.grid", -3.0 if kind == "pdp" else 0.0)
            upper = _number(grid, "upper", "model.grid", 3.0 if kind == "pdp" else 1.0)
            size = _number(grid, "size", "model.grid", 21 if kind == "pdp" else 11, integer=True)
            if size < 2:
                raise ConfigError("model.grid.size", "must be >= 2")
            if not upper > lower:
                raise ConfigError("model.grid.upper", "must exceed lower")
            out["grid"] = {"lower": lower, "upper": upper, "size": size}
            n_states = size
            if kind == "pdp":
                out["jump_rate"] = _number(block, "jump_rate", "model", 1.0, positive=True)
                out["flow_rate"] = _number(block, "flow_rate", "model", 1.0, nonnegative=True)
                out["noise_std"] = _number(block, "noise_std", "model", 1.0, positive=True)
                out["post_jump_flow"] = bool(block.get("post_jump_flow", True))
                shift = block.get("shift") or {}
                if not isinstance(shift, dict) or shift.get("kind", "tanh") not in SHIFT_KINDS:
                    raise ConfigError("model.shift.kind", f"expected one of {SHIFT_KINDS}")
                out["shift"] = {"kind": shift.get("kind", "tanh"),
                                "scale": _number(shift, "scale", "model.shift", 0.5)}
            else:
                out["diffusion"] = _number(block, "diffusion", "model", 1.0, positive=True)
                domain = block.get("domain", [lower, upper])
                domain = _float_list(domain, "model.domain")
                if len(domain) != 2 or not domain[1] > domain[0]:
                    raise ConfigError("model.domain", "expected [l, u] with l < u")
                if lower < domain[0] or upper > domain[1]:
                    raise ConfigError("model.domain", "grid must lie inside the domain")
                out["domain"] = domain
        out["n_states"] = n_states
        out["reward"] = cls._reward(block.get("reward", {"kind": "abs", "scale": 1.0}), n_states)
        return out

    @staticmethod
    def _cost(block: Dict[str, Any], n_states: int) -> Dict[str, Any]:
        kind = block.get("kind", "metric_capped")
        if kind not in COST_KINDS:
            raise ConfigError("cost.kind", f"expected one of {COST_KINDS}, got {kind!r}")
        c0 = _number(block, "c0", "cost", 0.2, positive=True)
        cap = _number(block, "cap", "cost", None, nonnegative=True)
        indices = block.get("impulse_indices", [0])
        if not isinstance(indices, list) or not indices:
            raise ConfigError("cost.impulse_indices", "expected a non-empty list of state indices")
        for i in indices:
            if isinstance(i, bool) or not isinstance(i, int) or not 0 <= i < n_states:
                raise ConfigError("cost.impulse_indices", f"index {i!r} out of range for {n_states} states")
        out: Dict[str, Any] = {"kind": kind, "c0": c0, "cap": cap, "impulse_indices": sorted(set(indices))}
        if kind == "explicit_table":
            if block.get("table") is None:
                raise ConfigError("cost.table", "explicit_table cost needs a table")
            out["table"] = _matrix(block["table"], "cost.table")
        if kind == "separable":
            for key in ("departure", "arrival"):
                if block.get(key) is None:
                    raise ConfigError(f"cost.{key}", "separable cost needs departure and arrival")
                out[key] = _float_list(block[key], f"cost.{key}")
        return out

    @staticmethod
    def _solver(block: Dict[str, Any], n_states: int) -> Dict[str, Any]:
        ref = _number(block, "reference_index", "solver", 0, nonnegative=True, integer=True)
        if ref >= n_states:
            raise ConfigError("solver.reference_index", f"out of range for {n_states} states")
        return {
            "tol_span": _number(block, "tol_span", "solver", 1e-12, positive=True),
            "max_iters": _number(block, "max_iters", "solver", 100_000, positive=True, integer=True),
            "reference_index": ref,
            "case_gap_tol": _number(block, "case_gap_tol", "solver", 1e-6, positive=True),
            "residual_tol": _number(block, "residual_tol", "solver", 1e-10, positive=True),
        }

    @staticmethod
    def _simulation(block: Dict[str, Any], dyadic: Dict[str, Any], n_states: int) -> Dict[str, Any]:
        level = _number(block, "level", "simulation", dyadic["m_max"], nonnegative=True, integer=True)
        if not dyadic["m_min"] <= level <= dyadic["m_max"]:
            raise ConfigError("simulation.level", f"must lie in [{dyadic['m_min']}, {dyadic['m_max']}]")
        T = _number(block, "T", "simulation", 10.0, positive=True)
        if not _multiple_of(T, level):
            raise ConfigError("simulation.T", f"must be a multiple of 2^-{level}")
        n_paths = _number(block, "n_paths", "simulation", 10_000, integer=True)
        if n_paths < 2:
            raise ConfigError("simulation.n_paths", f"must be >= 2, got {n_paths}")
        seed = _number(block, "seed", "simulation", 12345, nonnegative=True, integer=True)
        x0 = _number(block, "x0", "simulation", None, nonnegative=True, integer=True)
        if x0 is not None and x0 >= n_states:
            raise ConfigError("simulation.x0", f"out of range for {n_states} states")
        return {"T": T, "n_paths": n_paths, "seed": seed, "level": level, "x0": x0}

    @staticmethod
    def _finite_horizon(block: Dict[str, Any], dyadic: Dict[str, Any]) -> Dict[str, Any]:
        T = _number(block, "T", "finite_horizon", 1.0, positive=True)
        if not _multiple_of(T, dyadic["m_min"]):
            raise ConfigError("finite_horizon.T", f"must be a multiple of 2^-{dyadic['m_min']}")
        budget = _number(block, "budget", "finite_horizon", 2, nonnegative=True, integer=True)
        return {"T": T, "budget": budget}

    @staticmethod
    def _stopping(block: Dict[str, Any], n_states: int, m_max: int) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for key, default in (("g", 0.5), ("G", 0.0)):
            value = block.get(key, default)
            if isinstance(value, list):
                values = _float_list(value, f"stopping.{key}")
                if len(values) != n_states:
                    raise ConfigError(f"stopping.{key}", f"expected {n_states} values")
                out[key] = values
            else:
                out[key] = _number(block, key, "stopping", default)
        T = _number(block, "T", "stopping", None, positive=True)
        if T is not None and not _multiple_of(T, m_max):
            raise ConfigError("stopping.T", f"must be a multiple of 2^-{m_max}")
        out["T"] = T
        return out

    @staticmethod
    def _output(block: Dict[str, Any]) -> Dict[str, Any]:
        formats = block.get("formats", list(OUTPUT_FORMATS))
        if not isinstance(formats, list) or any(f not in OUTPUT_FORMATS for f in formats):
            raise ConfigError("output.formats", f"expected a list drawn from {OUTPUT_FORMATS}")
        return {"directory": str(block.get("directory", "results")), "formats": list(formats)}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["model"] = {k: v for k, v in data["model"].items() if k != "n_states"}
        return data

    @property
    def n_states(self) -> int:
        return int(self.model["n_states"])

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["simulation"]["seed"] = int(seed)
        if out is not None:
            data["output"]["directory"] = str(out)
        return ExperimentConfig.from_dict(data)

    def echo(self, path: Path) -> Path:
        """Write the resolved configuration as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=True)
        return path


def load_experiment(config_path: str) -> ExperimentConfig:
    return ExperimentConfig.from_config(Config(config_path))
