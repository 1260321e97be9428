"""
Bounded Q-Learning package.

This package provides Q-learning that explores with Q-function bounds derived
from bounded-parameter MDPs and regularized with observed data.
"""

__version__ = "1.0.0"
