# src/errors.py
"""
Exception hierarchy shared by the solvers and the command-line harness.

Each family maps onto one CLI exit code (see src/main.py).
"""

from typing import Any, Dict, Optional, Tuple


class ImpulseControlError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ImpulseControlError, ValueError):
    """Invalid experiment configuration; message names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ModelError(ImpulseControlError, ValueError):
    """Invalid grid, kernel or discretizer input."""


class CostError(ImpulseControlError, ValueError):
    """Cost table failing a floor or triangle-inequality certificate."""

    def __init__(self, message: str, witness: Optional[Tuple[int, int, int]] = None):
        self.witness = witness
        super().__init__(message)


class SolverError(ImpulseControlError, RuntimeError):
    """Iterative solver failed to converge or to certify its result."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
            message = f"{message} ({details})"
        super().__init__(message)


class VerificationError(ImpulseControlError, AssertionError):
    """A structural invariant or oracle comparison failed."""


__all__ = [
    "ImpulseControlError",
    "ConfigError",
    "ModelError",
    "CostError",
    "SolverError",
    "VerificationError",
]
