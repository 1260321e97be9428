"""
Bounded Q-Learning Errors

Exception types shared by the solvers, the learner and the experiment harness.
"""

from typing import Optional


class BoundedQError(Exception):
    """Base class for all errors raised by this package."""


class ConvergenceError(BoundedQError):
    """A fixed-point iteration did not reach its tolerance."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class ModelSetError(BoundedQError):
    """An MDP, model set or observation violates its structural invariants."""


class ConfigError(BoundedQError):
    """Invalid experiment configuration or parameter schedule."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
