"""
Exploration Module

This module turns Q-function bounds into an exploring policy. It provides:
- The four-case action weights (certain optimum, possible improvement,
  proven dominance, residual uncertainty)
- Probability-of-improvement and expected-improvement weights, assuming each
  Q-value is uniform within its interval
- Weighted action sampling with a uniform fallback
"""

import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Tuple

import numpy as np

from errors import BoundedQError, ConfigError
from interval_model import QBounds, first_per_state, max_of_others

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('Exploration')

# Q_lower == Q_upper is tested with this absolute tolerance
TIGHT_TOL = 1e-9


class BetaKind(str, Enum):
    PROBABILITY_OF_IMPROVEMENT = 'probability_of_improvement'
    EXPECTED_IMPROVEMENT = 'expected_improvement'
    CONSTANT = 'constant'


class WeightCase(IntEnum):
    CERTAIN_OPTIMAL = 1
    MAY_IMPROVE = 2
    DOMINATED = 3
    RESIDUAL = 4


@dataclass(frozen=True)
class ExplorationParams:
    """
    Weights of the exploring policy.

    Attributes:
        xi: Weight of an action certified optimal
        zeta: Weight of an uncertain action that cannot improve on the best
            worst-case value
        beta_kind: How actions that may improve are weighted
        beta_constant: Weight used when beta_kind is CONSTANT
    """

    xi: float = 1.0
    zeta: float = 0.0
    beta_kind: BetaKind = BetaKind.EXPECTED_IMPROVEMENT
    beta_constant: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'beta_kind', BetaKind(self.beta_kind))
        if not (np.isfinite(self.xi) and self.xi > 0):
            raise ConfigError(f"must be positive, got {self.xi}", 'exploration.xi')
        if not (np.isfinite(self.zeta) and self.zeta >= 0):
            raise ConfigError(f"must be nonnegative, got {self.zeta}", 'exploration.zeta')
        if self.beta_kind == BetaKind.CONSTANT and not (np.isfinite(self.beta_constant) and self.beta_constant >= 0):
            raise ConfigError(f"must be nonnegative, got {self.beta_constant}", 'exploration.beta_constant')


@dataclass(frozen=True, eq=False)
class StateWeights:
    """Per-action weights at one state and the case that produced each."""

    weights: np.ndarray
    cases: np.ndarray

    def case(self, action: int) -> WeightCase:
        return WeightCase(int(self.cases[action]))


def improvement(qb: QBounds, state: int, action: int) -> float:
    """
    Possible improvement of an action over the best worst-case value.

    Returns:
        float: max(0, Q_upper(x, u) - V_lower(x))
    """
    v_lower = float(np.max(qb.lower[state]))
    return max(0.0, float(qb.upper[state, action]) - v_lower)


def _beta(upper: np.ndarray, lower: np.ndarray, v_lower: np.ndarray, kind: BetaKind,
          constant: float) -> np.ndarray:
    width = upper - lower
    gain = np.maximum(upper - v_lower, 0.0)
    if kind == BetaKind.PROBABILITY_OF_IMPROVEMENT:
        return np.minimum(gain / width, 1.0)
    if kind == BetaKind.EXPECTED_IMPROVEMENT:
        return gain ** 2 / (2.0 * width)
    return np.full(np.shape(width), float(constant))


def beta_weight(qb: QBounds, state: int, action: int, kind: BetaKind, constant: float = 1.0) -> float:
    """
    Improvement weight of an uncertain action.

    PI is the probability that a value uniform on [Q_lower, Q_upper] exceeds
    V_lower; EI is the expected amount by which it does.

    Args:
        qb: Converged Q-bounds
        state: State index
        action: Action index
        kind: Probability or expected improvement, or a constant
        constant: Value returned for BetaKind.CONSTANT

    Returns:
        float: The weight

    Raises:
        BoundedQError: If the interval of (state, action) is tight
    """
    lower = float(qb.lower[state, action])
    upper = float(qb.upper[state, action])
    if upper - lower <= TIGHT_TOL:
        raise BoundedQError(f"improvement weight requested for a tight interval at ({state}, {action})")
    v_lower = float(np.max(qb.lower[state]))
    return float(_beta(np.float64(upper), np.float64(lower), np.float64(v_lower), BetaKind(kind), constant))


def weight_table(qb: QBounds, params: ExplorationParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exploration weights and case tags for every (state, action).

    Case 1 (weight xi): Q_lower(x,u) >= max over v != u of Q_upper(x,v); only
    the lowest-index such action per state. Case 2 (weight beta): the interval
    is not tight and Q_upper(x,u) > V_lower(x). Case 3 (weight 0): tight and
    Q_upper(x,u) <= V_lower(x). Case 4 (weight zeta): everything else.

    Args:
        qb: Converged Q-bounds
        params: Exploration parameters

    Returns:
        Tuple of the weight table and the case table, both (state, action)
    """
    lower, upper = qb.lower, qb.upper
    v_lower = np.max(lower, axis=1, keepdims=True)
    tight = np.abs(upper - lower) <= TIGHT_TOL
    certain = first_per_state(lower >= max_of_others(upper))
    may_improve = ~certain & ~tight & (upper > v_lower)
    dominated = ~certain & tight & (upper <= v_lower)

    cases = np.full(lower.shape, int(WeightCase.RESIDUAL))
    cases[certain] = int(WeightCase.CERTAIN_OPTIMAL)
    cases[may_improve] = int(WeightCase.MAY_IMPROVE)
    cases[dominated] = int(WeightCase.DOMINATED)

    weights = np.full(lower.shape, float(params.zeta))
    weights[certain] = params.xi
    weights[dominated] = 0.0
    if np.any(may_improve):
        v_rows = np.broadcast_to(v_lower, lower.shape)[may_improve]
        weights[may_improve] = _beta(upper[may_improve], lower[may_improve], v_rows,
                                     params.beta_kind, params.beta_constant)
    return weights, cases


def compute_weights(qb: QBounds, state: int, params: ExplorationParams) -> StateWeights:
    """
    Exploration weights at a single state.

    Args:
        qb: Converged Q-bounds
        state: State index
        params: Exploration parameters

    Returns:
        StateWeights: Weight and case tag for every action
    """
    row = QBounds(qb.lower[state:state + 1], qb.upper[state:state + 1])
    weights, cases = weight_table(row, params)
    return StateWeights(weights[0], cases[0])


def sample_action(weights: StateWeights, rng: np.random.Generator) -> int:
    """
    Draw an action with probability proportional to its weight.

    All-zero weights fall back to a uniform draw over every action.
    """
    w = np.asarray(weights.weights, dtype=float)
    total = float(np.sum(w))
    if total <= 0.0:
        return int(rng.integers(w.size))
    return int(rng.choice(w.size, p=w / total))
