# src/utils.py
import logging
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from src.errors import ModelError


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure root logging once with optional file handler.
    - log_level: "DEBUG" | "INFO" | "WARNING" | "ERROR" | "CRITICAL"
    - log_file: path to file or None to disable file logging
    """
    logger = logging.getLogger()
    level = getattr(logging, str(log_level).upper(), logging.INFO)
    # Avoid duplicate handlers if called multiple times
    if not logger.handlers:
        logger.setLevel(level)

        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )

        console = logging.StreamHandler()
        console.setFormatter(formatter)
        logger.addHandler(console)

        if log_file:
            try:
                file_handler = logging.FileHandler(log_file)
                file_handler.setFormatter(formatter)
                logger.addHandler(file_handler)
            except OSError as e:
                logger.warning(f"Failed to attach file handler: {e}")
    else:
        # If handlers exist, still honor a level change
        logger.setLevel(level)

    return logger


def span(values: np.ndarray) -> float:
    """Span seminorm: max - min over states."""
    values = np.asarray(values, dtype=float)
    return float(values.max() - values.min())


def sup_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(values, dtype=float))))


def as_state_vector(values, n_states: int, name: str = "values") -> np.ndarray:
    """Coerce per-state reals to a finite float vector of length n_states."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n_states, float(arr))
    if arr.shape != (n_states,):
        raise ModelError(f"{name}: expected {n_states} per-state values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name}: non-finite entry at index {int(np.argmin(np.isfinite(arr)))}")
    return arr


def log_apply(matrix: np.ndarray, log_h: np.ndarray) -> np.ndarray:
    """ln(matrix @ exp(log_h)) computed row-wise without overflow."""
    exponents = np.where(matrix > 0, log_h[None, :], -np.inf)
    return logsumexp(exponents, axis=1, b=matrix)


def steps_for_horizon(T: float, delta: float, tol: float = 1e-9) -> int:
    """Number of grid steps covering [0, T]; T must be a multiple of delta."""
    if T <= 0:
        raise ModelError(f"horizon must be positive, got {T}")
    ratio = T / delta
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > tol * max(1.0, ratio):
        raise ModelError(f"horizon T={T} is not a multiple of the step {delta}")
    return steps


def is_primitive(matrix: np.ndarray) -> bool:
    """Wielandt test on the support pattern: A^((n-1)^2+1) > 0 entrywise."""
    pattern = (np.asarray(matrix) > 0).astype(np.int64)
    n = pattern.shape[0]
    power = (n - 1) ** 2 + 1
    result = np.eye(n, dtype=np.int64)
    base = pattern
    while power:
        if power & 1:
            result = np.minimum(result @ base, 1)
        base = np.minimum(base @ base, 1)
        power >>= 1
    return bool(np.all(result > 0))


__all__ = [
    "setup_logging",
    "span",
    "sup_norm",
    "as_state_vector",
    "log_apply",
    "steps_for_horizon",
    "is_primitive",
]
