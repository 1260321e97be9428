"""
Environments Module

Ground-truth benchmark environments and the model sets generated from prior
knowledge about them. It provides:
- Slippery Frozen Lake on built-in or custom maps, with a model set that only
  knows which cells are adjacent
- A discretized CartPole whose pole mass is unknown, with a model set
  enveloping the transition tensors of a sweep of candidate masses
- The Environment wrapper used for training and greedy-policy evaluation
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import ConfigError, ModelSetError
from interval_model import IntervalModelSet, load_model_set, save_model_set
from tabular_mdp import TabularMdp, load_mdp, save_mdp, step as mdp_step

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('Environments')

FROZEN_LAKE_MAPS: Dict[str, Tuple[str, ...]] = {
    '4x4': ("SFFF", "FHFH", "FFFH", "HFFG"),
    '8x8': ("SFFFFFFF", "FFFFFFFF", "FFFHFFFF", "FFFFFHFF",
            "FFFHFFFF", "FHHFFFHF", "FHFFHFHF", "FFFHFFFG"),
}

# LEFT, DOWN, RIGHT, UP as (row, column) offsets
FROZEN_LAKE_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))

REWARD_RULES = ('goal', 'survival')


@dataclass(frozen=True, eq=False)
class Environment:
    """
    A ground-truth MDP together with how episodes start, end and are scored.

    Training uses the MDP rewards; evaluation scores episodes with reward_rule:
    'goal' pays 1 on entering a goal state, 'survival' pays 1 per step taken
    from a non-terminal state.
    """

    name: str
    mdp: TabularMdp
    start_distribution: np.ndarray
    goal_states: FrozenSet[int] = field(default_factory=frozenset)
    reward_rule: str = 'goal'
    max_steps: int = 100

    def __post_init__(self):
        start = np.array(self.start_distribution, dtype=float, copy=True)
        start.setflags(write=False)
        object.__setattr__(self, 'start_distribution', start)
        if start.shape != (self.mdp.n_states,) or np.any(start < 0) or abs(start.sum() - 1.0) > 1e-9:
            raise ModelSetError("start distribution must be a probability vector over the states")
        if self.reward_rule not in REWARD_RULES:
            raise ModelSetError(f"reward_rule must be one of {REWARD_RULES}, got {self.reward_rule!r}")
        if self.max_steps < 1:
            raise ModelSetError("max_steps must be at least 1")

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self, rng: np.random.Generator, exploring_starts: bool = False) -> int:
        """Draw an initial state; exploring starts pick any non-terminal state uniformly."""
        if exploring_starts:
            candidates = np.flatnonzero(~self.mdp.terminal_mask)
            return int(candidates[rng.integers(candidates.size)])
        return int(rng.choice(self.n_states, p=self.start_distribution))

    def step(self, state: int, action: int, rng: np.random.Generator) -> Tuple[int, float, bool]:
        return mdp_step(self.mdp, state, action, rng)

    @property
    def goal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.goal_states)] = True
        return mask

    def evaluation_rewards(self, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        """
        Evaluation reward of each transition states[i] -> next_states[i].

        Args:
            states: Current states
            next_states: Successor states, same shape

        Returns:
            np.ndarray: 0/1 rewards under reward_rule
        """
        states = np.asarray(states, dtype=np.int64)
        next_states = np.asarray(next_states, dtype=np.int64)
        if self.reward_rule == 'goal':
            goals = self.goal_mask
            return (goals[next_states] & ~goals[states]).astype(float)
        return (~self.mdp.terminal_mask[states]).astype(float)


# ---------------------------------------------------------------------------
# Frozen Lake
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenLakeSpec:
    """Frozen Lake map (rows of S/F/H/G characters) and dynamics options."""

    grid: Tuple[str, ...] = FROZEN_LAKE_MAPS['4x4']
    slippery: bool = True
    discount: float = 0.95
    max_steps: int = 100

    def __post_init__(self):
        if isinstance(self.grid, str) and self.grid not in FROZEN_LAKE_MAPS:
            raise ConfigError(f"unknown built-in map {self.grid!r}, expected one of {sorted(FROZEN_LAKE_MAPS)}",
                              'environment.map')
        grid = tuple(FROZEN_LAKE_MAPS[self.grid]) if isinstance(self.grid, str) else tuple(self.grid)
        object.__setattr__(self, 'grid', grid)
        if not grid or any(len(row) != len(grid[0]) for row in grid) or not grid[0]:
            raise ConfigError("map must be a non-empty rectangle", 'environment.map')
        cells = ''.join(grid)
        if set(cells) - set('SFHG'):
            raise ConfigError(f"unknown map cells {sorted(set(cells) - set('SFHG'))}", 'environment.map')
        if cells.count('S') != 1:
            raise ConfigError("map needs exactly one start cell", 'environment.map')
        if 'G' not in cells:
            raise ConfigError("map needs at least one goal cell", 'environment.map')

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    @property
    def cells(self) -> str:
        return ''.join(self.grid)

    def states_of(self, kinds: str) -> FrozenSet[int]:
        return frozenset(i for i, cell in enumerate(self.cells) if cell in kinds)


def _frozen_lake_tensor(spec: FrozenLakeSpec) -> np.ndarray:
    n_rows, n_cols = spec.shape
    n_states = n_rows * n_cols
    terminal = spec.states_of('HG')
    transitions = np.zeros((n_states, 4, n_states))
    for state in range(n_states):
        if state in terminal:
            transitions[state, :, state] = 1.0
            continue
        row, col = divmod(state, n_cols)
        for action in range(4):
            directions = [(action - 1) % 4, action, (action + 1) % 4] if spec.slippery else [action]
            for direction in directions:
                d_row, d_col = FROZEN_LAKE_MOVES[direction]
                new_row, new_col = row + d_row, col + d_col
                # blocked moves leave the agent where it is
                if not (0 <= new_row < n_rows and 0 <= new_col < n_cols):
                    new_row, new_col = row, col
                transitions[state, action, new_row * n_cols + new_col] += 1.0 / len(directions)
    return transitions


def frozen_lake_mdp(spec: FrozenLakeSpec) -> TabularMdp:
    """
    Build the true Frozen Lake MDP.

    Slippery moves go in the intended direction or either perpendicular one
    with probability 1/3 each. Holes and goals are absorbing. The reward of
    (x, u) is the probability of entering a goal cell from x under u.

    Args:
        spec: Map and dynamics options

    Returns:
        TabularMdp: The ground-truth MDP
    """
    transitions = _frozen_lake_tensor(spec)
    goals = np.zeros(transitions.shape[0])
    goals[list(spec.states_of('G'))] = 1.0
    terminal = spec.states_of('HG')
    rewards = transitions @ goals
    rewards[list(terminal)] = 0.0
    return TabularMdp.from_dense(transitions, rewards, spec.discount, terminal)


def frozen_lake_model_set(spec: FrozenLakeSpec) -> IntervalModelSet:
    """
    Model set that knows only which transitions are possible.

    Every transition with positive true probability gets bounds [0, 1], all
    others [0, 0]; rewards are known exactly.
    """
    mdp = frozen_lake_mdp(spec)
    upper = (mdp.transitions > 0.0).astype(float)
    return IntervalModelSet.from_dense(np.zeros_like(upper), upper, mdp.rewards, mdp.rewards,
                                       mdp.discount, mdp.terminal_states)


def frozen_lake_environment(spec: FrozenLakeSpec) -> Environment:
    mdp = frozen_lake_mdp(spec)
    start = np.zeros(mdp.n_states)
    start[spec.cells.index('S')] = 1.0
    return Environment('frozen_lake', mdp, start, spec.states_of('G'), 'goal', spec.max_steps)


# ---------------------------------------------------------------------------
# CartPole
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CartpoleSpec:
    """
    Discretized CartPole with an uncertain pole mass.

    State dimensions are cart position, cart velocity, pole angle and pole
    angular velocity. Actions push the cart left or right with force_mag.
    """

    gravity: float = 9.8
    cart_mass: float = 1.0
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    pole_mass: float = 0.1
    mass_sweep: Tuple[float, ...] = tuple(np.linspace(0.05, 0.2, 8).tolist())
    bins: Tuple[int, int, int, int] = (6, 6, 12, 12)
    ranges: Tuple[float, float, float, float] = (2.4, 3.0, 0.21, 3.5)
    position_limit: float = 2.4
    angle_limit: float = 0.2095
    samples_per_cell: int = 256
    angle_weight: float = 0.5
    position_weight: float = 0.5
    start_spread: float = 0.05
    start_samples: int = 4096
    discount: float = 0.97
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'mass_sweep', tuple(float(m) for m in self.mass_sweep))
        object.__setattr__(self, 'bins', tuple(int(b) for b in self.bins))
        object.__setattr__(self, 'ranges', tuple(float(r) for r in self.ranges))
        if not self.mass_sweep:
            raise ConfigError("mass sweep must not be empty", 'environment.mass_sweep')
        if not min(self.mass_sweep) <= self.pole_mass <= max(self.mass_sweep):
            raise ConfigError(f"true pole mass {self.pole_mass} lies outside the sweep", 'environment.pole_mass')
        if len(self.bins) != 4 or min(self.bins) < 2:
            raise ConfigError("need at least 2 bins for each of the 4 dimensions", 'environment.bins')
        if len(self.ranges) != 4 or not all(np.isfinite(r) and r > 0 for r in self.ranges):
            raise ConfigError("ranges must be 4 finite positive half-widths", 'environment.ranges')
        if self.samples_per_cell < 1:
            raise ConfigError("must be at least 1", 'environment.samples_per_cell')


@dataclass(frozen=True, eq=False)
class DiscretizationMap:
    """
    Uniform grid over the four CartPole dimensions plus one fallen state.

    Values outside a dimension's range are clamped to its edge bins; states
    beyond the position or angle failure limits map to the fallen state.
    """

    edges: Tuple[np.ndarray, ...]
    position_limit: float
    angle_limit: float

    @classmethod
    def from_spec(cls, spec: CartpoleSpec) -> 'DiscretizationMap':
        edges = tuple(np.linspace(-r, r, n + 1) for r, n in zip(spec.ranges, spec.bins))
        return cls(edges, spec.position_limit, spec.angle_limit)

    @property
    def bins(self) -> Tuple[int, ...]:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.bins))

    @property
    def fallen_state(self) -> int:
        return self.n_cells

    @property
    def n_states(self) -> int:
        return self.n_cells + 1

    def cell_index(self, multi_index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(i) for i in multi_index), self.bins))

    def multi_index(self, cell: int) -> Tuple[int, ...]:
        if not 0 <= cell < self.n_cells:
            raise IndexError(f"cell {cell} out of range")
        return tuple(int(i) for i in np.unravel_index(cell, self.bins))

    def fallen(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return (np.abs(states[..., 0]) > self.position_limit) | (np.abs(states[..., 2]) > self.angle_limit)

    def discretize(self, states: np.ndarray) -> np.ndarray:
        """Map continuous states (..., 4) to flat state indices."""
        states = np.asarray(states, dtype=float)
        multi = tuple(np.digitize(states[..., d], self.edges[d][1:-1]) for d in range(4))
        cells = np.ravel_multi_index(multi, self.bins)
        return np.where(self.fallen(states), self.fallen_state, cells)

    def cell_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of every cell, each (n_cells, 4)."""
        grids = np.indices(self.bins).reshape(4, -1)
        low = np.stack([self.edges[d][grids[d]] for d in range(4)], axis=1)
        high = np.stack([self.edges[d][grids[d] + 1] for d in range(4)], axis=1)
        return low, high

    def cell_centers(self) -> np.ndarray:
        low, high = self.cell_bounds()
        return 0.5 * (low + high)


def cartpole_dynamics(states: np.ndarray, forces: np.ndarray, spec: CartpoleSpec, pole_mass: float) -> np.ndarray:
    """One explicit Euler step of the frictionless cart-pole equations."""
    x, x_dot, theta, theta_dot = np.moveaxis(np.asarray(states, dtype=float), -1, 0)
    total_mass = spec.cart_mass + pole_mass
    pole_moment = pole_mass * spec.half_length
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (forces + pole_moment * theta_dot ** 2 * sin) / total_mass
    theta_acc = (spec.gravity * sin - cos * temp) / \
        (spec.half_length * (4.0 / 3.0 - pole_mass * cos ** 2 / total_mass))
    x_acc = temp - pole_moment * theta_acc * cos / total_mass
    return np.stack([x + spec.tau * x_dot, x_dot + spec.tau * x_acc,
                     theta + spec.tau * theta_dot, theta_dot + spec.tau * theta_acc], axis=-1)


def _cell_samples(spec: CartpoleSpec, grid: DiscretizationMap) -> np.ndarray:
    # shared by every mass so the tensors differ only through the dynamics
    low, high = grid.cell_bounds()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    unit = rng.random((grid.n_cells, spec.samples_per_cell, 4))
    return low[:, None, :] + unit * (high - low)[:, None, :]


def _transition_entries(spec: CartpoleSpec, grid: DiscretizationMap, samples: np.ndarray,
                        pole_mass: float) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse (row * n_states + next_state) keys and probabilities for one mass."""
    n_states = grid.n_states
    keys, probabilities = [], []
    for action, force in enumerate((-spec.force_mag, spec.force_mag)):
        next_states = grid.discretize(cartpole_dynamics(samples, np.full(samples.shape[:2], force), spec, pole_mass))
        rows = np.arange(grid.n_cells)[:, None] * 2 + action
        row_keys, counts = np.unique((rows * n_states + next_states).ravel(), return_counts=True)
        keys.append(row_keys)
        probabilities.append(counts / spec.samples_per_cell)
    fallen_rows = np.array([grid.fallen_state * 2, grid.fallen_state * 2 + 1])
    keys.append(fallen_rows * n_states + grid.fallen_state)
    probabilities.append(np.ones(2))
    keys = np.concatenate(keys)
    order = np.argsort(keys, kind='stable')
    return keys[order], np.concatenate(probabilities)[order]


def _slot_layout(keys: np.ndarray, n_states: int, n_actions: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Successor slots for sorted sparse keys; returns (successors, row, position)."""
    rows, next_states = np.divmod(keys, n_states)
    starts = np.searchsorted(rows, rows, side='left')
    position = np.arange(keys.size) - starts
    width = int(position.max()) + 1
    successors = np.zeros((n_states * n_actions, width), dtype=np.int64)
    successors[rows, position] = next_states
    return successors.reshape(n_states, n_actions, width), rows, position


def _cartpole_rewards(spec: CartpoleSpec, grid: DiscretizationMap) -> np.ndarray:
    centers = grid.cell_centers()
    shaped = 1.0 - spec.angle_weight * (centers[:, 2] / spec.angle_limit) ** 2 \
        - spec.position_weight * (centers[:, 0] / spec.position_limit) ** 2
    rewards = np.zeros((grid.n_states, 2))
    rewards[:grid.n_cells] = shaped[:, None]
    return rewards


def cartpole_tensor(spec: CartpoleSpec, pole_mass: float) -> TabularMdp:
    """
    Estimate the tabular CartPole MDP for one pole mass.

    Every (cell, action) row is the empirical distribution over next cells of
    samples_per_cell points drawn uniformly inside the cell and advanced one
    time step. Rewards are the shaped training rewards at the cell centers.

    Args:
        spec: CartPole constants and discretization
        pole_mass: Pole mass used for the dynamics

    Returns:
        TabularMdp: The estimated MDP; the last state is the fallen state
    """
    grid = DiscretizationMap.from_spec(spec)
    keys, probabilities = _transition_entries(spec, grid, _cell_samples(spec, grid), pole_mass)
    successors, rows, position = _slot_layout(keys, grid.n_states, 2)
    slots = np.zeros((grid.n_states * 2, successors.shape[-1]))
    slots[rows, position] = probabilities
    return TabularMdp(successors, slots.reshape(successors.shape), _cartpole_rewards(spec, grid),
                      spec.discount, frozenset([grid.fallen_state]))


def cartpole_model_set(spec: CartpoleSpec, show_progress: bool = False) -> IntervalModelSet:
    """
    Envelope of the CartPole tensors over the mass sweep.

    The true pole mass is always part of the envelope, so the set contains the
    true MDP. Rewards are known exactly.

    Args:
        spec: CartPole constants, discretization and mass sweep
        show_progress: Show a progress bar over the masses

    Returns:
        IntervalModelSet: Elementwise min/max of the per-mass tensors
    """
    grid = DiscretizationMap.from_spec(spec)
    samples = _cell_samples(spec, grid)
    masses = sorted(set(spec.mass_sweep) | {spec.pole_mass})
    entries = [_transition_entries(spec, grid, samples, mass)
               for mass in tqdm(masses, desc="Estimating tensors", disable=not show_progress)]
    keys = np.unique(np.concatenate([k for k, _ in entries]))
    stacked = np.zeros((len(masses), keys.size))
    for i, (mass_keys, mass_probabilities) in enumerate(entries):
        stacked[i, np.searchsorted(keys, mass_keys)] = mass_probabilities
    successors, rows, position = _slot_layout(keys, grid.n_states, 2)
    lower = np.zeros((grid.n_states * 2, successors.shape[-1]))
    upper = np.zeros_like(lower)
    lower[rows, position] = stacked.min(axis=0)
    upper[rows, position] = stacked.max(axis=0)
    rewards = _cartpole_rewards(spec, grid)
    logger.info(f"CartPole model set: {grid.n_states} states, {keys.size} supported transitions, "
                f"{len(masses)} masses")
    return IntervalModelSet(successors, lower.reshape(successors.shape), upper.reshape(successors.shape),
                            rewards, rewards, spec.discount, frozenset([grid.fallen_state]))


def cartpole_environment(spec: CartpoleSpec, mdp: Optional[TabularMdp] = None) -> Environment:
    """
    The true tabular CartPole environment.

    The start distribution is estimated by discretizing uniform draws from the
    +/- start_spread box around the upright resting state.
    """
    grid = DiscretizationMap.from_spec(spec)
    if mdp is None:
        mdp = cartpole_tensor(spec, spec.pole_mass)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    starts = rng.uniform(-spec.start_spread, spec.start_spread, size=(spec.start_samples, 4))
    start = np.bincount(grid.discretize(starts), minlength=grid.n_states) / spec.start_samples
    return Environment('cartpole', mdp, start, frozenset(), 'survival', spec.max_steps)


def _spec_digest(spec: CartpoleSpec) -> str:
    text = json.dumps(asdict(spec), sort_keys=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def load_or_build_cartpole(spec: CartpoleSpec, cache_dir: Optional[str] = None,
                           show_progress: bool = False) -> Tuple[Environment, IntervalModelSet]:
    """
    Build the CartPole environment and model set, reusing a JSON cache if present.

    Args:
        spec: CartPole constants, discretization and seed
        cache_dir: Directory for cached MDP / model set documents (no caching if None)
        show_progress: Show a progress bar during tensor estimation

    Returns:
        Tuple of the environment and its model set
    """
    if cache_dir:
        digest = _spec_digest(spec)
        mdp_path = os.path.join(cache_dir, f"cartpole_{digest}_mdp.json")
        model_path = os.path.join(cache_dir, f"cartpole_{digest}_model.json")
        if os.path.exists(mdp_path) and os.path.exists(model_path):
            logger.info(f"Loading cached CartPole tensors from {cache_dir}")
            return cartpole_environment(spec, load_mdp(mdp_path)), load_model_set(model_path)
    mdp = cartpole_tensor(spec, spec.pole_mass)
    model = cartpole_model_set(spec, show_progress)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        save_mdp(mdp, mdp_path)
        save_model_set(model, model_path)
    return cartpole_environment(spec, mdp), model
