"""Risk-sensitive impulse control of Markov processes: dyadic solvers and validation harness."""

__version__ = "1.0.0"
