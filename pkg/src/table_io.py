# src/table_io.py
"""
Plain-text tables and CSV artifacts.

Kernel table:   `states n delta d level m` then n rows of n probabilities
                (level -1 marks a non-dyadic kernel).
Cost table:     `cost n k c0`, `targets i_1 .. i_k`, `reward f_1 .. f_n`, then n rows of k costs.
Key-value block: one `key value...` line per entry; vectors are written on one line.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.cost_model import CostTable
from src.errors import ModelError
from src.state_models import StateGrid, StepKernel, build_finite_chain

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.17g"


def _fmt(values: Iterable[float]) -> str:
    return " ".join(FLOAT_FORMAT % float(v) for v in values)


def _lines(path: PathLike) -> List[List[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]


def format_kernel(k: StepKernel) -> str:
    level = -1 if k.level is None else k.level
    lines = [f"states {k.n_states} delta {FLOAT_FORMAT % k.delta} level {level}"]
    lines.extend(_fmt(row) for row in k.rows)
    return "\n".join(lines) + "\n"


def write_kernel(path: PathLike, k: StepKernel) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(format_kernel(k), encoding="utf-8")
    return target


def parse_kernel(tokens: Sequence[Sequence[str]], grid: StateGrid) -> StepKernel:
    header = list(tokens[0])
    if len(header) != 6 or header[0] != "states" or header[2] != "delta" or header[4] != "level":
        raise ModelError(f"bad kernel header: {' '.join(header)!r}")
    n = int(header[1])
    delta = float(header[3])
    level = int(header[5])
    rows = [[float(v) for v in line] for line in tokens[1:1 + n]]
    if len(rows) != n:
        raise ModelError(f"kernel table declares {n} rows, found {len(rows)}")
    return build_finite_chain(rows, grid, delta, None if level < 0 else level)


def read_kernel(path: PathLike, grid: StateGrid) -> StepKernel:
    return parse_kernel(_lines(path), grid)


def write_cost(path: PathLike, cost: CostTable) -> Path:
    lines = [
        f"cost {cost.n_states} {len(cost.targets)} {FLOAT_FORMAT % cost.c0}",
        "targets " + " ".join(str(t) for t in cost.targets),
        "reward " + _fmt(cost.f),
    ]
    lines.extend(_fmt(row) for row in cost.c)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


def read_cost(path: PathLike) -> Tuple[np.ndarray, Tuple[int, ...], np.ndarray, float]:
    """(c table, targets, reward, c0) as written; only the dimensions are checked.

    The table is not certified here: pass it to ``build_cost`` with an ``explicit_table``
    spec to check the floor and the triangle inequality.
    """
    tokens = _lines(path)
    header = tokens[0]
    if len(header) != 4 or header[0] != "cost":
        raise ModelError(f"bad cost header: {' '.join(header)!r}")
    n, k, c0 = int(header[1]), int(header[2]), float(header[3])
    if tokens[1][0] != "targets" or tokens[2][0] != "reward":
        raise ModelError("cost table needs `targets` and `reward` lines after the header")
    targets = tuple(int(t) for t in tokens[1][1:])
    reward = np.array([float(v) for v in tokens[2][1:]])
    table = np.array([[float(v) for v in line] for line in tokens[3:3 + n]])
    if len(targets) != k or reward.shape != (n,) or table.shape != (n, k):
        raise ModelError(f"cost table dimensions disagree with header ({n} states, {k} targets)")
    return table, targets, reward, c0


def format_block(scalars: Mapping[str, Any], vectors: Optional[Mapping[str, Iterable]] = None) -> str:
    lines = []
    for key, value in scalars.items():
        lines.append(f"{key} {FLOAT_FORMAT % value}" if isinstance(value, float) else f"{key} {value}")
    for key, values in (vectors or {}).items():
        lines.append(f"{key} " + " ".join(
            FLOAT_FORMAT % v if isinstance(v, (float, np.floating)) else str(v) for v in values
        ))
    return "\n".join(lines) + "\n"


def parse_block(text: str) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {}
    for line in text.splitlines():
        parts = line.split()
        if parts:
            out[parts[0]] = parts[1:]
    return out


def format_mpe(mpe) -> str:
    block = format_block({"r_f": mpe.r_f, "residual": mpe.residual}, {"v": mpe.v})
    return block + format_kernel(mpe.tilted_kernel)


def format_solution(sol) -> str:
    region = "".join("1" if flag else "0" for flag in sol.impulse_region)
    shifts = [f"{x}:{t}" for x, t in sorted(sol.shift_map.items())]
    return format_block(
        {
            "m": -1 if sol.level is None else sol.level,
            "delta": sol.delta,
            "lambda": sol.lam,
            "residual": sol.residual,
            "iterations": sol.iterations,
            "method": sol.method,
            "region": region,
        },
        {"w": sol.w, "shift_map": shifts},
    )


def write_text(path: PathLike, text: str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")
    return target


def write_csv(path: PathLike, rows: Sequence[Mapping[str, Any]], config_hash: str, seed: Optional[int]) -> Path:
    """CSV with provenance columns appended to every row.

    ``seed`` only fills rows that carry no seed of their own; -1 marks an unseeded run.
    """
    frame = pd.DataFrame(list(rows))
    frame["config_hash"] = config_hash
    fallback = -1 if seed is None else int(seed)
    if "seed" in frame.columns:
        frame["seed"] = frame["seed"].fillna(fallback).astype(np.int64)
    else:
        frame["seed"] = fallback
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT)
    logger.debug("Wrote %d rows to %s", len(frame), target)
    return target


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


__all__ = [
    "format_kernel",
    "write_kernel",
    "parse_kernel",
    "read_kernel",
    "write_cost",
    "read_cost",
    "format_block",
    "parse_block",
    "format_mpe",
    "format_solution",
    "write_text",
    "write_csv",
    "read_csv",
]
