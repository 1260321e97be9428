"""
Tabular MDP Module

This module contains the finite MDP representation used by every other part of
the toolkit. It provides:
- The TabularMdp value type (transitions, rewards, discount, terminal states)
- The Bellman optimality operator and an exact value-iteration oracle
- Seeded simulation stepping
- JSON serialization of MDPs

Transitions are stored as padded successor slots: ``successors[x, u, k]`` is a
next-state index and ``probabilities[x, u, k]`` its probability. Real slots come
first in ascending next-state order, padding slots point at state 0 with zero
probability. Small models can be built from and exported to dense
(state, action, next_state) tensors.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, FrozenSet, Iterable, Optional, Tuple

import numpy as np

from errors import ConvergenceError, ModelSetError

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('TabularMDP')

QTable = np.ndarray
GreedyPolicy = np.ndarray

ROW_SUM_TOL = 1e-9
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 100_000
# Above this many states JSON documents switch to the slot layout.
DENSE_JSON_LIMIT = 512


def build_slots(support: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Build a padded successor-slot index from a dense support mask.

    Args:
        support: Boolean array (state, action, next_state)

    Returns:
        Tuple of the successor indices (state, action, slot) and the mask of
        real (non-padding) slots
    """
    support = np.asarray(support, dtype=bool)
    per_row = support.sum(axis=-1)
    width = max(int(per_row.max()) if per_row.size else 1, 1)
    # stable sort keeps supported next states in ascending order
    order = np.argsort(~support, axis=-1, kind='stable')[..., :width]
    real = np.arange(width) < per_row[..., None]
    successors = np.where(real, order, 0)
    return successors.astype(np.int64), real


def gather_slots(dense: np.ndarray, successors: np.ndarray, real: np.ndarray) -> np.ndarray:
    """Pick the slot entries of a dense (state, action, next_state) array."""
    picked = np.take_along_axis(np.asarray(dense, dtype=float), successors, axis=-1)
    return np.where(real, picked, 0.0)


def scatter_slots(values: np.ndarray, successors: np.ndarray, n_states: int) -> np.ndarray:
    """Expand slot values back into a dense (state, action, next_state) array."""
    n_rows, n_cols, _ = successors.shape
    dense = np.zeros((n_rows, n_cols, n_states))
    x_idx, u_idx, _ = np.indices(successors.shape)
    np.add.at(dense, (x_idx, u_idx, successors), values)
    return dense


def _frozen(array: Any, dtype: Any = float) -> np.ndarray:
    result = np.array(array, dtype=dtype, copy=True)
    result.setflags(write=False)
    return result


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """An exact finite MDP with terminal states encoded as absorbing self-loops."""

    successors: np.ndarray
    probabilities: np.ndarray
    rewards: np.ndarray
    discount: float
    terminal_states: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, 'successors', _frozen(self.successors, np.int64))
        object.__setattr__(self, 'probabilities', _frozen(self.probabilities))
        object.__setattr__(self, 'rewards', _frozen(self.rewards))
        object.__setattr__(self, 'discount', float(self.discount))
        object.__setattr__(self, 'terminal_states', frozenset(int(s) for s in self.terminal_states))
        self._validate()

    def _validate(self):
        if self.rewards.ndim != 2 or self.rewards.shape[0] < 1 or self.rewards.shape[1] < 1:
            raise ModelSetError(f"rewards must be a non-empty (state, action) table, got shape {self.rewards.shape}")
        if self.successors.shape != self.probabilities.shape or self.successors.shape[:2] != self.rewards.shape:
            raise ModelSetError(
                f"inconsistent shapes: successors {self.successors.shape}, "
                f"probabilities {self.probabilities.shape}, rewards {self.rewards.shape}"
            )
        if self.successors.min() < 0 or self.successors.max() >= self.n_states:
            raise ModelSetError("successor index out of range")
        if not np.all(np.isfinite(self.rewards)):
            raise ModelSetError("rewards must be finite")
        if not 0.0 <= self.discount < 1.0:
            raise ModelSetError(f"discount must lie in [0, 1), got {self.discount}")
        if np.any(self.probabilities < 0.0) or np.any(self.probabilities > 1.0):
            raise ModelSetError("transition probabilities must lie in [0, 1]")
        row_sums = self.probabilities.sum(axis=-1)
        worst = float(np.max(np.abs(row_sums - 1.0)))
        if worst > ROW_SUM_TOL:
            raise ModelSetError(f"transition rows must sum to 1 (worst deviation {worst:.3e})")
        for state in self.terminal_states:
            if not 0 <= state < self.n_states:
                raise ModelSetError(f"terminal state {state} out of range")
            self_mass = np.sum(np.where(self.successors[state] == state, self.probabilities[state], 0.0), axis=-1)
            if np.any(np.abs(self_mass - 1.0) > ROW_SUM_TOL):
                raise ModelSetError(f"terminal state {state} must self-loop with probability 1")

    @classmethod
    def from_dense(cls, transitions: np.ndarray, rewards: np.ndarray, discount: float,
                   terminal_states: Iterable[int] = ()) -> 'TabularMdp':
        """
        Build an MDP from a dense (state, action, next_state) tensor.

        Args:
            transitions: Dense transition tensor
            rewards: Reward table (state, action)
            discount: Discount factor in [0, 1)
            terminal_states: Indices of absorbing terminal states

        Returns:
            TabularMdp: The MDP in slot layout
        """
        transitions = np.asarray(transitions, dtype=float)
        if transitions.ndim != 3 or transitions.shape[0] != transitions.shape[2]:
            raise ModelSetError(f"transition tensor must be (S, A, S), got shape {transitions.shape}")
        successors, real = build_slots(transitions > 0.0)
        return cls(successors, gather_slots(transitions, successors, real), rewards, discount,
                   frozenset(terminal_states))

    @property
    def n_states(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.rewards.shape[1])

    @cached_property
    def transitions(self) -> np.ndarray:
        """Dense (state, action, next_state) transition tensor."""
        return scatter_slots(self.probabilities, self.successors, self.n_states)

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    @cached_property
    def _cumulative(self) -> np.ndarray:
        return np.cumsum(self.probabilities, axis=-1)

    @cached_property
    def _last_slot(self) -> np.ndarray:
        positive = self.probabilities > 0.0
        width = positive.shape[-1]
        return width - 1 - np.argmax(positive[..., ::-1], axis=-1)


def state_values(q: QTable, terminal_mask: np.ndarray) -> np.ndarray:
    """Greedy state values with terminal states pinned to zero."""
    values = np.max(q, axis=1)
    return np.where(terminal_mask, 0.0, values)


def bellman_apply(mdp: TabularMdp, q: QTable) -> QTable:
    """
    Apply the Bellman optimality operator once.

    Args:
        mdp: The MDP
        q: Q-table (state, action)

    Returns:
        QTable: g(x,u) + discount * sum_x' max_u' q(x',u') M(x,u,x'), with terminal
        successors contributing zero onward value
    """
    values = state_values(np.asarray(q, dtype=float), mdp.terminal_mask)
    expected = np.sum(mdp.probabilities * values[mdp.successors], axis=-1)
    return mdp.rewards + mdp.discount * expected


def greedy_policy(q: QTable) -> GreedyPolicy:
    """Greedy policy with ties broken by the lowest action index."""
    return np.argmax(np.asarray(q), axis=1)


def solve_exact(mdp: TabularMdp, tol: float = DEFAULT_TOL,
                max_iters: int = DEFAULT_MAX_ITERS) -> Tuple[QTable, GreedyPolicy]:
    """
    Compute Q* by value iteration.

    Args:
        mdp: The MDP to solve
        tol: Sup-norm Bellman residual at which to stop
        max_iters: Maximum number of sweeps

    Returns:
        Tuple[QTable, GreedyPolicy]: Q* and its greedy policy

    Raises:
        ConvergenceError: If the residual is still above tol after max_iters sweeps
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    for iteration in range(1, max_iters + 1):
        updated = bellman_apply(mdp, q)
        residual = float(np.max(np.abs(updated - q)))
        q = updated
        if residual <= tol:
            logger.debug(f"Value iteration converged in {iteration} sweeps (residual {residual:.2e})")
            return q, greedy_policy(q)
    raise ConvergenceError("value iteration did not converge", max_iters, residual)


def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator) -> Tuple[int, float, bool]:
    """
    Simulate one transition.

    Args:
        mdp: The MDP
        state: Current state
        action: Action to apply
        rng: Random generator driving the draw

    Returns:
        Tuple[int, float, bool]: Next state, reward g(state, action) and whether
        the next state is terminal
    """
    if not (0 <= state < mdp.n_states and 0 <= action < mdp.n_actions):
        raise IndexError(f"state/action out of range: ({state}, {action})")
    reward = float(mdp.rewards[state, action])
    if state in mdp.terminal_states:
        return state, reward, True
    slot = int(np.searchsorted(mdp._cumulative[state, action], rng.random(), side='right'))
    slot = min(slot, int(mdp._last_slot[state, action]))
    next_state = int(mdp.successors[state, action, slot])
    return next_state, reward, next_state in mdp.terminal_states


def sample_successors(mdp: TabularMdp, states: np.ndarray, actions: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Vectorized successor draws for many (state, action) pairs at once; terminal states stay put."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    cumulative = mdp._cumulative[states, actions]
    slots = np.sum(cumulative <= rng.random(states.shape)[..., None], axis=-1)
    slots = np.minimum(slots, mdp._last_slot[states, actions])
    next_states = np.take_along_axis(mdp.successors[states, actions], slots[..., None], axis=-1)[..., 0]
    return np.where(mdp.terminal_mask[states], states, next_states)


def mdp_to_dict(mdp: TabularMdp, dense: Optional[bool] = None) -> Dict[str, Any]:
    """
    Convert an MDP to a JSON-compatible dictionary.

    Args:
        mdp: The MDP
        dense: Force dense or slot layout; by default dense for small models

    Returns:
        Dict: The serialized MDP
    """
    if dense is None:
        dense = mdp.n_states <= DENSE_JSON_LIMIT
    data: Dict[str, Any] = {
        'n_states': mdp.n_states,
        'n_actions': mdp.n_actions,
        'discount': mdp.discount,
        'rewards': mdp.rewards.tolist(),
        'terminal_states': sorted(mdp.terminal_states),
    }
    if dense:
        data['transitions'] = mdp.transitions.tolist()
    else:
        data['successors'] = mdp.successors.tolist()
        data['transitions'] = mdp.probabilities.tolist()
    return data


def mdp_from_dict(data: Dict[str, Any]) -> TabularMdp:
    """Rebuild an MDP from mdp_to_dict output."""
    try:
        rewards = np.asarray(data['rewards'], dtype=float)
        transitions = np.asarray(data['transitions'], dtype=float)
        discount = float(data['discount'])
        terminal = data.get('terminal_states', [])
        if 'successors' in data:
            mdp = TabularMdp(np.asarray(data['successors'], dtype=np.int64), transitions, rewards,
                             discount, frozenset(terminal))
        else:
            mdp = TabularMdp.from_dense(transitions, rewards, discount, terminal)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelSetError(f"malformed MDP document: {e}") from e
    if mdp.n_states != int(data.get('n_states', mdp.n_states)) or \
            mdp.n_actions != int(data.get('n_actions', mdp.n_actions)):
        raise ModelSetError("n_states/n_actions do not match the stored arrays")
    return mdp


def save_mdp(mdp: TabularMdp, path: str) -> str:
    """Write an MDP to a JSON file and return the path."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(mdp_to_dict(mdp), f)
    logger.info(f"Saved MDP ({mdp.n_states} states) to {path}")
    return path


def load_mdp(path: str) -> TabularMdp:
    """Read an MDP from a JSON file."""
    with open(path, 'r', encoding='utf-8') as f:
        return mdp_from_dict(json.load(f))
