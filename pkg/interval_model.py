"""
Interval Model Module

This module implements bounded-parameter MDP model sets and the Q-function
bounds they induce. It provides:
- IntervalModelSet: elementwise transition and reward bounds
- QBounds: paired pessimistic/optimistic Q-tables
- The exact sorted mass assignment over an interval-constrained simplex
- Coupled lower/upper bound iteration to their fixed points
- Optimality and suboptimality certificates derived from the bounds
"""

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Any, Callable, Dict, FrozenSet, Iterable, Optional, Tuple

import numpy as np

from errors import ConvergenceError, ModelSetError
from tabular_mdp import (
    DEFAULT_MAX_ITERS, DEFAULT_TOL, DENSE_JSON_LIMIT, TabularMdp,
    build_slots, gather_slots, scatter_slots, state_values,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('IntervalModel')

FEASIBILITY_TOL = 1e-9
SENSES = ('min', 'max')

# (slot values, sense) -> slot probabilities for every (state, action)
RowSolver = Callable[[np.ndarray, str], np.ndarray]


def _frozen(array: Any, dtype: Any = float) -> np.ndarray:
    result = np.array(array, dtype=dtype, copy=True)
    result.setflags(write=False)
    return result


@dataclass(frozen=True, eq=False)
class IntervalModelSet:
    """
    A bounded-parameter MDP: transition bounds [lower, upper] per successor slot
    and reward bounds [lower_rewards, upper_rewards] per (state, action).

    Slots with a positive upper bound are the support of the set; padding slots
    carry zero bounds.
    """

    successors: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower_rewards: np.ndarray
    upper_rewards: np.ndarray
    discount: float
    terminal_states: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, 'successors', _frozen(self.successors, np.int64))
        object.__setattr__(self, 'lower', _frozen(self.lower))
        object.__setattr__(self, 'upper', _frozen(self.upper))
        object.__setattr__(self, 'lower_rewards', _frozen(self.lower_rewards))
        object.__setattr__(self, 'upper_rewards', _frozen(self.upper_rewards))
        object.__setattr__(self, 'discount', float(self.discount))
        object.__setattr__(self, 'terminal_states', frozenset(int(s) for s in self.terminal_states))
        self._validate()

    def _validate(self):
        shape = self.successors.shape
        if len(shape) != 3 or self.lower.shape != shape or self.upper.shape != shape:
            raise ModelSetError(f"transition bounds must share the slot shape {shape}")
        if self.lower_rewards.shape != shape[:2] or self.upper_rewards.shape != shape[:2]:
            raise ModelSetError("reward bounds must be (state, action) tables")
        if self.successors.min() < 0 or self.successors.max() >= self.n_states:
            raise ModelSetError("successor index out of range")
        if not 0.0 <= self.discount < 1.0:
            raise ModelSetError(f"discount must lie in [0, 1), got {self.discount}")
        if np.any(self.lower < 0.0) or np.any(self.upper > 1.0) or np.any(self.lower > self.upper):
            raise ModelSetError("transition bounds must satisfy 0 <= lower <= upper <= 1")
        if np.any(self.lower.sum(axis=-1) > 1.0 + FEASIBILITY_TOL) or \
                np.any(self.upper.sum(axis=-1) < 1.0 - FEASIBILITY_TOL):
            raise ModelSetError("empty transition polytope: need sum(lower) <= 1 <= sum(upper) in every row")
        if not (np.all(np.isfinite(self.lower_rewards)) and np.all(np.isfinite(self.upper_rewards))):
            raise ModelSetError("reward bounds must be finite")
        if np.any(self.lower_rewards > self.upper_rewards):
            raise ModelSetError("reward bounds must satisfy lower <= upper")
        if any(not 0 <= s < self.n_states for s in self.terminal_states):
            raise ModelSetError("terminal state out of range")

    @classmethod
    def from_dense(cls, lower: np.ndarray, upper: np.ndarray, lower_rewards: np.ndarray,
                   upper_rewards: np.ndarray, discount: float,
                   terminal_states: Iterable[int] = ()) -> 'IntervalModelSet':
        """
        Build a model set from dense (state, action, next_state) bound tensors.

        Args:
            lower: Lower transition bounds
            upper: Upper transition bounds
            lower_rewards: Lower reward bounds (state, action)
            upper_rewards: Upper reward bounds (state, action)
            discount: Discount factor
            terminal_states: Absorbing terminal states

        Returns:
            IntervalModelSet: The model set in slot layout
        """
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if lower.shape != upper.shape or lower.ndim != 3:
            raise ModelSetError("dense bounds must both be (S, A, S) tensors")
        if np.any(lower > upper):
            raise ModelSetError("transition bounds must satisfy lower <= upper")
        successors, real = build_slots(upper > 0.0)
        return cls(successors, gather_slots(lower, successors, real), gather_slots(upper, successors, real),
                   lower_rewards, upper_rewards, discount, frozenset(terminal_states))

    @classmethod
    def singleton(cls, mdp: TabularMdp) -> 'IntervalModelSet':
        """The degenerate model set containing exactly one MDP."""
        return cls(mdp.successors, mdp.probabilities, mdp.probabilities, mdp.rewards, mdp.rewards,
                   mdp.discount, mdp.terminal_states)

    @property
    def n_states(self) -> int:
        return int(self.lower_rewards.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.lower_rewards.shape[1])

    @cached_property
    def real_slots(self) -> np.ndarray:
        return self.upper > 0.0

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    @cached_property
    def dense_lower(self) -> np.ndarray:
        return scatter_slots(self.lower, self.successors, self.n_states)

    @cached_property
    def dense_upper(self) -> np.ndarray:
        return scatter_slots(self.upper, self.successors, self.n_states)

    @cached_property
    def _slot_keys(self) -> np.ndarray:
        rows = np.arange(self.n_states * self.n_actions).reshape(self.n_states, self.n_actions, 1)
        keys = rows * self.n_states + self.successors
        # padding slots get keys no lookup can hit
        return np.where(self.real_slots, keys, -1)

    def slot_of(self, state: int, action: int, next_state: int) -> int:
        """
        Find the slot holding next_state in the row (state, action).

        Raises:
            ModelSetError: If next_state lies outside the support of the set
        """
        hits = np.flatnonzero((self.successors[state, action] == next_state) & self.real_slots[state, action])
        if hits.size == 0:
            raise ModelSetError(
                f"transition ({state}, {action}) -> {next_state} lies outside the model set support"
            )
        return int(hits[0])

    def align_probabilities(self, mdp: TabularMdp) -> np.ndarray:
        """
        Express an MDP's transition probabilities in this set's slot layout.

        Raises:
            ModelSetError: If the MDP puts mass outside the support of the set
        """
        if (mdp.n_states, mdp.n_actions) != (self.n_states, self.n_actions):
            raise ModelSetError("MDP and model set dimensions differ")
        keys = self._slot_keys.ravel()
        order = np.argsort(keys, kind='stable')
        sorted_keys = keys[order]
        rows = np.arange(mdp.n_states * mdp.n_actions).reshape(mdp.n_states, mdp.n_actions, 1)
        mdp_keys = (rows * self.n_states + mdp.successors)[mdp.probabilities > 0.0]
        mdp_mass = mdp.probabilities[mdp.probabilities > 0.0]
        pos = np.clip(np.searchsorted(sorted_keys, mdp_keys), 0, sorted_keys.size - 1)
        if not np.all(sorted_keys[pos] == mdp_keys):
            raise ModelSetError("MDP puts probability mass outside the model set support")
        aligned = np.zeros(keys.size)
        np.add.at(aligned, order[pos], mdp_mass)
        return aligned.reshape(self.successors.shape)

    def contains(self, mdp: TabularMdp, tol: float = FEASIBILITY_TOL) -> bool:
        """Check that an MDP is a member of the set (transitions and rewards)."""
        try:
            aligned = self.align_probabilities(mdp)
        except ModelSetError:
            return False
        inside = np.all(aligned >= self.lower - tol) and np.all(aligned <= self.upper + tol)
        rewards_inside = np.all(mdp.rewards >= self.lower_rewards - tol) and \
            np.all(mdp.rewards <= self.upper_rewards + tol)
        return bool(inside and rewards_inside)


@dataclass(frozen=True, eq=False)
class QBounds:
    """Pessimistic (lower) and optimistic (upper) Q-tables."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'lower', _frozen(self.lower))
        object.__setattr__(self, 'upper', _frozen(self.upper))
        if self.lower.shape != self.upper.shape:
            raise ModelSetError("lower and upper Q-tables must have the same shape")

    @property
    def gap(self) -> float:
        """Largest width of any interval."""
        return float(np.max(self.upper - self.lower))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


class Certificate(IntEnum):
    UNCERTAIN = 0
    GUARANTEED_OPTIMAL = 1
    GUARANTEED_SUBOPTIMAL = 2


@dataclass(frozen=True, eq=False)
class ActionCertificates:
    """Certificate label per (state, action)."""

    labels: np.ndarray

    def label(self, state: int, action: int) -> Certificate:
        return Certificate(int(self.labels[state, action]))

    def optimal_mask(self) -> np.ndarray:
        return self.labels == Certificate.GUARANTEED_OPTIMAL

    def suboptimal_mask(self) -> np.ndarray:
        return self.labels == Certificate.GUARANTEED_SUBOPTIMAL


def value_bounds(q: QBounds) -> Tuple[np.ndarray, np.ndarray]:
    """
    State-value bounds from Q-bounds.

    Args:
        q: The Q-bounds

    Returns:
        Tuple of V_lower(x) = max_u Q_lower(x,u) and V_upper(x) = max_u Q_upper(x,u)
    """
    return np.max(q.lower, axis=1), np.max(q.upper, axis=1)


def _check_sense(sense: str):
    if sense not in SENSES:
        raise ValueError(f"sense must be one of {SENSES}, got {sense!r}")


def sorted_mass_assignment(values: np.ndarray, lower: np.ndarray, upper: np.ndarray, sense: str) -> np.ndarray:
    """
    Exact linear optimization over interval-constrained simplices, row by row.

    Every row starts at its lower bounds; the remaining mass is poured onto
    entries in ascending (min) or descending (max) order of value, each raised
    to its upper bound until the mass runs out. Ties go to the lowest index.

    Args:
        values: Values per entry, shape (..., K)
        lower: Lower bounds, same shape
        upper: Upper bounds, same shape
        sense: 'min' or 'max'

    Returns:
        np.ndarray: The optimizing probabilities, same shape
    """
    _check_sense(sense)
    keys = values if sense == 'min' else -values
    order = np.argsort(keys, axis=-1, kind='stable')
    capacity = np.take_along_axis(upper - lower, order, axis=-1)
    residual = 1.0 - np.sum(lower, axis=-1, keepdims=True)
    poured_before = np.cumsum(capacity, axis=-1) - capacity
    added = np.clip(residual - poured_before, 0.0, capacity)
    result = np.array(lower, dtype=float, copy=True)
    extra = np.zeros_like(result)
    np.put_along_axis(extra, order, added, axis=-1)
    return result + extra


def inner_optimize_sorted(values: np.ndarray, lower_row: np.ndarray, upper_row: np.ndarray,
                          sense: str) -> np.ndarray:
    """
    Optimize sum(values * p) over {lower_row <= p <= upper_row, sum(p) = 1}.

    Args:
        values: Successor values
        lower_row: Lower bounds of the row
        upper_row: Upper bounds of the row
        sense: 'min' or 'max'

    Returns:
        np.ndarray: The optimizing probability vector

    Raises:
        ModelSetError: If the row polytope is empty
    """
    values = np.asarray(values, dtype=float)
    lower_row = np.asarray(lower_row, dtype=float)
    upper_row = np.asarray(upper_row, dtype=float)
    if np.any(lower_row > upper_row) or lower_row.sum() > 1.0 + FEASIBILITY_TOL or \
            upper_row.sum() < 1.0 - FEASIBILITY_TOL:
        raise ModelSetError("empty transition polytope for this row")
    return sorted_mass_assignment(values, lower_row, upper_row, sense)


def default_envelope(model: IntervalModelSet) -> QBounds:
    """
    Starting Q-bounds enclosing every fixed point of the set.

    Terminal states hold value zero, so the envelope always includes zero.
    """
    scale = 1.0 / (1.0 - model.discount)
    low = min(float(np.min(model.lower_rewards)), 0.0) * scale
    high = max(float(np.max(model.upper_rewards)), 0.0) * scale
    shape = (model.n_states, model.n_actions)
    return QBounds(np.full(shape, low), np.full(shape, high))


def iterate_bounds(model: IntervalModelSet, lower_rewards: np.ndarray, upper_rewards: np.ndarray,
                   row_solver: RowSolver, tol: float, max_iters: int,
                   init: Optional[QBounds] = None) -> QBounds:
    """
    Run the coupled lower/upper Bellman bound iteration with synchronous sweeps.

    Args:
        model: Model set supplying successors, discount and terminal states
        lower_rewards: Reward table used by the lower update
        upper_rewards: Reward table used by the upper update
        row_solver: Inner optimizer returning slot probabilities for a sense
        tol: Sup-norm residual at which to stop
        max_iters: Maximum number of sweeps
        init: Warm start; defaults to default_envelope

    Returns:
        QBounds: The fixed points

    Raises:
        ConvergenceError: If the residual stays above tol
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    start = init if init is not None else default_envelope(model)
    q_lower = np.array(start.lower, dtype=float)
    q_upper = np.array(start.upper, dtype=float)
    active = ~model.terminal_mask[:, None]
    residual = np.inf
    for iteration in range(1, max_iters + 1):
        v_lower = state_values(q_lower, model.terminal_mask)[model.successors]
        v_upper = state_values(q_upper, model.terminal_mask)[model.successors]
        p_lower = row_solver(v_lower, 'min')
        p_upper = row_solver(v_upper, 'max')
        new_lower = lower_rewards + model.discount * active * np.sum(p_lower * v_lower, axis=-1)
        new_upper = upper_rewards + model.discount * active * np.sum(p_upper * v_upper, axis=-1)
        residual = max(float(np.max(np.abs(new_lower - q_lower))), float(np.max(np.abs(new_upper - q_upper))))
        q_lower, q_upper = new_lower, new_upper
        if residual <= tol:
            logger.debug(f"Bound iteration converged in {iteration} sweeps (residual {residual:.2e})")
            return QBounds(q_lower, q_upper)
    raise ConvergenceError("bound iteration did not converge", max_iters, residual)


def bound_iteration(model: IntervalModelSet, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                    init: Optional[QBounds] = None) -> QBounds:
    """
    Compute the unregularized Q-function bounds of a model set.

    The lower update uses the lower rewards and the worst member of the
    transition polytope, the upper update the upper rewards and the best member.

    Args:
        model: The model set
        tol: Sup-norm residual at which to stop
        max_iters: Maximum number of sweeps
        init: Optional warm start

    Returns:
        QBounds: Fixed points bracketing Q* of every member MDP
    """
    def solve_rows(values: np.ndarray, sense: str) -> np.ndarray:
        return sorted_mass_assignment(values, model.lower, model.upper, sense)

    return iterate_bounds(model, model.lower_rewards, model.upper_rewards, solve_rows, tol, max_iters, init)


def max_of_others(table: np.ndarray) -> np.ndarray:
    """max over v != u of table[x, v], -inf when there is no other action."""
    n_actions = table.shape[1]
    if n_actions == 1:
        return np.full(table.shape, -np.inf)
    top = np.argmax(table, axis=1)
    ordered = np.sort(table, axis=1)
    best, second = ordered[:, -1], ordered[:, -2]
    others = np.repeat(best[:, None], n_actions, axis=1)
    others[np.arange(table.shape[0]), top] = second
    return others


def first_per_state(mask: np.ndarray) -> np.ndarray:
    """Keep only the lowest-index True entry in each row."""
    keep = np.zeros_like(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    keep[rows, np.argmax(mask[rows], axis=1)] = True
    return keep


def certify_actions(q: QBounds) -> ActionCertificates:
    """
    Label actions that the bounds prove optimal or suboptimal.

    An action is guaranteed suboptimal when its upper bound is strictly below
    the best lower value of its state, and guaranteed optimal when its lower
    bound reaches every other action's upper bound. At most one action per
    state is labelled optimal (the lowest index); a single action is optimal.

    Args:
        q: Converged Q-bounds

    Returns:
        ActionCertificates: One label per (state, action)
    """
    v_lower, _ = value_bounds(q)
    optimal = first_per_state(q.lower >= max_of_others(q.upper))
    suboptimal = (q.upper < v_lower[:, None]) & ~optimal
    labels = np.full(q.lower.shape, int(Certificate.UNCERTAIN))
    labels[optimal] = int(Certificate.GUARANTEED_OPTIMAL)
    labels[suboptimal] = int(Certificate.GUARANTEED_SUBOPTIMAL)
    return ActionCertificates(labels)


def model_set_to_dict(model: IntervalModelSet, dense: Optional[bool] = None) -> Dict[str, Any]:
    """Convert a model set to a JSON-compatible dictionary."""
    if dense is None:
        dense = model.n_states <= DENSE_JSON_LIMIT
    data: Dict[str, Any] = {
        'n_states': model.n_states,
        'n_actions': model.n_actions,
        'discount': model.discount,
        'lower_rewards': model.lower_rewards.tolist(),
        'upper_rewards': model.upper_rewards.tolist(),
        'terminal_states': sorted(model.terminal_states),
    }
    if dense:
        data['lower_transitions'] = model.dense_lower.tolist()
        data['upper_transitions'] = model.dense_upper.tolist()
    else:
        data['successors'] = model.successors.tolist()
        data['lower_transitions'] = model.lower.tolist()
        data['upper_transitions'] = model.upper.tolist()
    return data


def model_set_from_dict(data: Dict[str, Any]) -> IntervalModelSet:
    """Rebuild a model set from model_set_to_dict output."""
    try:
        args = (
            np.asarray(data['lower_transitions'], dtype=float),
            np.asarray(data['upper_transitions'], dtype=float),
            np.asarray(data['lower_rewards'], dtype=float),
            np.asarray(data['upper_rewards'], dtype=float),
            float(data['discount']),
            frozenset(data.get('terminal_states', [])),
        )
        if 'successors' in data:
            return IntervalModelSet(np.asarray(data['successors'], dtype=np.int64), *args)
        return IntervalModelSet.from_dense(*args)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelSetError(f"malformed model set document: {e}") from e


def save_model_set(model: IntervalModelSet, path: str) -> str:
    """Write a model set to a JSON file and return the path."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model_set_to_dict(model), f)
    logger.info(f"Saved model set ({model.n_states} states) to {path}")
    return path


def load_model_set(path: str) -> IntervalModelSet:
    """Read a model set from a JSON file."""
    with open(path, 'r', encoding='utf-8') as f:
        return model_set_from_dict(json.load(f))
