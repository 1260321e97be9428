"""
Learner Module

Tabular Q-learning guided by Q-function bounds. It provides:
- The Q-learning update with terminal successors contributing no onward value
- Epsilon-greedy action selection whose exploratory branch samples from the
  bound-derived exploring policy (or uniformly for the plain baseline)
- Periodic data-regularized bound recomputation with saturation of the
  Q-table into the new bounds
- JSON checkpoints of the complete learner state
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from environments import Environment
from errors import ConfigError, ConvergenceError, ModelSetError
from exploration import ExplorationParams, StateWeights, sample_action, weight_table
from interval_model import IntervalModelSet, QBounds, bound_iteration
from regularized_bounds import (
    LambdaSchedule, ObservedRewards, TransitionCounts, observations_from_dict,
    observations_to_dict, regularized_bound_iteration,
)
from tabular_mdp import DEFAULT_MAX_ITERS, DEFAULT_TOL, greedy_policy

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('Learner')

ALPHA_SCHEDULES = ('constant', 'robbins_monro')
Q_INITS = ('midpoint', 'zeros')
# fraction of training after which epsilon reaches epsilon_end
EPSILON_HORIZON = 0.9


@dataclass(frozen=True)
class LearnerConfig:
    """
    Q-learning settings.

    Attributes:
        alpha: Constant learning rate (or the numerator a of a / (b + visits))
        gamma: Discount factor used by the Q-learning update
        epsilon_start: Exploration probability of the first episode
        epsilon_end: Floor of the exploration probability
        epsilon_decay: Per-episode factor; derived from the episode count when None
        bounds_period: Episodes between bound recomputations (math.inf: never)
        max_steps_per_episode: Step cap; the environment's cap when None
        exploring_starts: Start episodes from uniformly drawn non-terminal states
        use_bounds: Compute bounds and explore with them; False gives plain
            epsilon-greedy with uniform exploration
        q_init: 'midpoint' of the initial bounds or 'zeros'
        alpha_schedule: 'constant' or 'robbins_monro'
        alpha_offset: b in a / (b + visits)
        bound_tol: Residual tolerance of the bound iterations
        bound_max_iters: Sweep limit of the bound iterations
    """

    alpha: float = 0.05
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay: Optional[float] = None
    bounds_period: float = 50
    max_steps_per_episode: Optional[int] = None
    exploring_starts: bool = False
    use_bounds: bool = True
    q_init: str = 'midpoint'
    alpha_schedule: str = 'constant'
    alpha_offset: float = 1.0
    bound_tol: float = DEFAULT_TOL
    bound_max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0 and self.alpha_schedule == 'constant':
            raise ConfigError(f"must lie in (0, 1], got {self.alpha}", 'learner.alpha')
        if not self.alpha > 0.0:
            raise ConfigError(f"must be positive, got {self.alpha}", 'learner.alpha')
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.gamma}", 'learner.gamma')
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1", 'learner.epsilon')
        if self.epsilon_decay is not None and not 0.0 <= self.epsilon_decay <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.epsilon_decay}", 'learner.epsilon_decay')
        if not (self.bounds_period >= 1):
            raise ConfigError(f"must be >= 1 or infinite, got {self.bounds_period}", 'learner.bounds_period')
        if self.max_steps_per_episode is not None and self.max_steps_per_episode < 1:
            raise ConfigError("must be at least 1", 'learner.max_steps_per_episode')
        if self.q_init not in Q_INITS:
            raise ConfigError(f"must be one of {Q_INITS}", 'learner.q_init')
        if self.q_init == 'midpoint' and not self.use_bounds:
            raise ConfigError("midpoint initialization needs bounds", 'learner.q_init')
        if self.alpha_schedule not in ALPHA_SCHEDULES:
            raise ConfigError(f"must be one of {ALPHA_SCHEDULES}", 'learner.alpha_schedule')
        if not self.alpha_offset > 0.0:
            raise ConfigError("must be positive", 'learner.alpha_offset')

    @property
    def recomputes(self) -> bool:
        return self.use_bounds and math.isfinite(self.bounds_period)

    def decay_factor(self, n_episodes: int) -> float:
        if self.epsilon_decay is not None:
            return self.epsilon_decay
        if self.epsilon_start == 0.0 or n_episodes < 1:
            return 1.0
        if self.epsilon_end == 0.0:
            return 0.0
        return (self.epsilon_end / self.epsilon_start) ** (1.0 / (EPSILON_HORIZON * n_episodes))

    def epsilon(self, episode: int, n_episodes: int) -> float:
        """Exploration probability max(epsilon_end, epsilon_start * rho**episode)."""
        return max(self.epsilon_end, self.epsilon_start * self.decay_factor(n_episodes) ** episode)


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    terminal: bool


@dataclass
class EpisodeStats:
    """Bookkeeping of one training episode."""

    episode: int
    steps: int
    reward_sum: float
    discounted_return: float
    terminal_reached: bool
    truncated: bool
    epsilon: float


@dataclass
class LearnerState:
    """Everything a training run mutates."""

    q: np.ndarray
    bounds: Optional[QBounds]
    counts: TransitionCounts
    observed_rewards: ObservedRewards
    episode: int
    rng: np.random.Generator


def q_update(q: np.ndarray, transition: Transition, alpha: float, gamma: float) -> float:
    """
    Apply Q(x,u) <- (1 - alpha) Q(x,u) + alpha (r + gamma max_u' Q(x',u')) in place.

    Terminal successors contribute no onward value.

    Returns:
        float: The updated Q(x, u)
    """
    onward = 0.0 if transition.terminal else float(np.max(q[transition.next_state]))
    target = transition.reward + gamma * onward
    x, u = transition.state, transition.action
    q[x, u] = (1.0 - alpha) * q[x, u] + alpha * target
    return float(q[x, u])


def select_action(q: np.ndarray, weights: Optional[StateWeights], epsilon: float,
                  rng: np.random.Generator) -> int:
    """
    Epsilon-greedy selection.

    With probability epsilon the action is drawn from the exploring policy
    given by weights (uniformly when weights is None); otherwise the greedy
    action of q with ties broken by the lowest index.
    """
    if rng.random() < epsilon:
        if weights is None:
            return int(rng.integers(q.shape[-1]))
        return sample_action(weights, rng)
    return int(np.argmax(q))


class BoundedQLearner:
    """
    Q-learning agent that explores with Q-function bounds.

    Bounds are computed from the model set before the first episode and, when
    bounds_period is finite, recomputed from the collected data every
    bounds_period episodes, after which the Q-table is clamped into them.
    """

    def __init__(self, env: Environment, model: IntervalModelSet, config: LearnerConfig,
                 params: ExplorationParams, schedule: Optional[LambdaSchedule],
                 rng: np.random.Generator):
        """
        Initialize the learner.

        Args:
            env: Ground-truth environment to interact with
            model: Model set containing the environment's MDP
            config: Learning settings
            params: Exploring policy weights
            schedule: Regularization schedule (required when bounds are recomputed)
            rng: Generator driving every random choice of the run
        """
        if (env.n_states, env.n_actions) != (model.n_states, model.n_actions):
            raise ModelSetError("environment and model set dimensions differ")
        if config.recomputes and schedule is None:
            raise ConfigError("bound recomputation needs a lambda schedule", 'lambda')
        if config.use_bounds and abs(config.gamma - model.discount) > 1e-12:
            logger.warning(f"Learner gamma {config.gamma} differs from model discount {model.discount}")
        self.env = env
        self.model = model
        self.config = config
        self.params = params
        self.schedule = schedule
        self.max_steps = config.max_steps_per_episode or env.max_steps
        self.state = LearnerState(
            q=np.zeros((model.n_states, model.n_actions)),
            bounds=None,
            counts=TransitionCounts.zeros(model),
            observed_rewards=ObservedRewards.empty(model.n_states, model.n_actions),
            episode=0,
            rng=rng,
        )
        self._weights: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._initialized = False
        self.recomputations = 0

    def initialize(self):
        """Compute the initial (unregularized) bounds and the initial Q-table."""
        if self.config.use_bounds:
            self._set_bounds(bound_iteration(self.model, self.config.bound_tol, self.config.bound_max_iters))
            logger.debug(f"Initial bound gap {self.state.bounds.gap:.4f}")
        if self.config.q_init == 'midpoint':
            self.state.q = np.array(self.state.bounds.midpoint, copy=True)
        else:
            self.state.q = np.zeros((self.model.n_states, self.model.n_actions))
        self._initialized = True

    def _set_bounds(self, bounds: QBounds):
        self.state.bounds = bounds
        self._weights = weight_table(bounds, self.params)

    def state_weights(self, x: int) -> Optional[StateWeights]:
        if self._weights is None:
            return None
        weights, cases = self._weights
        return StateWeights(weights[x], cases[x])

    def learning_rate(self, x: int, u: int) -> float:
        if self.config.alpha_schedule == 'constant':
            return self.config.alpha
        visits = int(self.state.counts.counts[x, u].sum())
        return min(1.0, self.config.alpha / (self.config.alpha_offset + visits))

    def recompute_bounds(self):
        """
        Recompute regularized bounds from the data so far and saturate q.

        Raises:
            ConvergenceError: If the bound iteration fails; the episode index is logged
        """
        try:
            bounds = regularized_bound_iteration(
                self.model, self.state.counts.snapshot(), self.state.observed_rewards.snapshot(),
                self.schedule, self.config.bound_tol, self.config.bound_max_iters, init=self.state.bounds,
            )
        except ConvergenceError as e:
            logger.error(f"Bound recomputation failed at episode {self.state.episode} "
                         f"after {self.state.counts.total_steps} steps: {e}")
            raise
        self._set_bounds(bounds)
        self.state.q = np.clip(self.state.q, bounds.lower, bounds.upper)
        self.recomputations += 1
        logger.info(f"Episode {self.state.episode}: bounds recomputed, gap {bounds.gap:.4f}")

    def run_episode(self, epsilon: float) -> EpisodeStats:
        """
        Run one training episode.

        Every observed transition is counted, its reward recorded and the
        Q-table updated.

        Args:
            epsilon: Exploration probability for this episode

        Returns:
            EpisodeStats: Steps, returns and how the episode ended
        """
        state, env, rng = self.state, self.env, self.state.rng
        x = env.reset(rng, self.config.exploring_starts)
        terminal = x in env.mdp.terminal_states
        steps, reward_sum, discounted = 0, 0.0, 0.0
        while not terminal and steps < self.max_steps:
            u = select_action(state.q[x], self.state_weights(x), epsilon, rng)
            next_x, reward, terminal = env.step(x, u, rng)
            state.counts.record(x, u, self.model.slot_of(x, u, next_x))
            state.observed_rewards.record(x, u, reward)
            q_update(state.q, Transition(x, u, reward, next_x, terminal), self.learning_rate(x, u),
                     self.config.gamma)
            reward_sum += reward
            discounted += self.config.gamma ** steps * reward
            steps += 1
            x = next_x
        stats = EpisodeStats(state.episode, steps, reward_sum, discounted, terminal,
                             not terminal and steps >= self.max_steps, epsilon)
        state.episode += 1
        return stats

    def train(self, n_episodes: int,
              episode_callback: Optional[Callable[[int, 'BoundedQLearner'], None]] = None) -> List[EpisodeStats]:
        """
        Train until n_episodes episodes have been run in total.

        Args:
            n_episodes: Total number of training episodes
            episode_callback: Called with the number of finished episodes
                before the first episode and after every episode

        Returns:
            List[EpisodeStats]: Stats of the episodes run by this call
        """
        if not self._initialized:
            self.initialize()
        history = []
        if episode_callback:
            episode_callback(self.state.episode, self)
        while self.state.episode < n_episodes:
            e = self.state.episode
            if self.config.recomputes and e > 0 and e % int(self.config.bounds_period) == 0:
                self.recompute_bounds()
            history.append(self.run_episode(self.config.epsilon(e, n_episodes)))
            if episode_callback:
                episode_callback(self.state.episode, self)
        return history

    def greedy_policy(self) -> np.ndarray:
        return greedy_policy(self.state.q)

    def checkpoint_to_dict(self) -> Dict[str, Any]:
        bounds = self.state.bounds
        return {
            'episode': self.state.episode,
            'q': self.state.q.tolist(),
            'bounds': None if bounds is None else {'lower': bounds.lower.tolist(), 'upper': bounds.upper.tolist()},
            'observations': observations_to_dict(self.model, self.state.counts, self.state.observed_rewards),
            'recomputations': self.recomputations,
            'rng_state': self.state.rng.bit_generator.state,
        }

    def save_checkpoint(self, path: str) -> str:
        """Write the learner state to a JSON file and return the path."""
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.checkpoint_to_dict(), f)
        logger.info(f"Saved checkpoint at episode {self.state.episode} to {path}")
        return path

    def restore(self, data: Dict[str, Any]):
        """Restore state written by checkpoint_to_dict."""
        try:
            q = np.asarray(data['q'], dtype=float)
            counts, rewards = observations_from_dict(self.model, data['observations'])
            rng_state = data['rng_state']
            episode = int(data['episode'])
        except (KeyError, TypeError, ValueError) as e:
            raise ModelSetError(f"malformed checkpoint: {e}") from e
        if q.shape != (self.model.n_states, self.model.n_actions):
            raise ModelSetError("checkpoint Q-table does not match the model set")
        if data.get('bounds') is not None:
            self._set_bounds(QBounds(data['bounds']['lower'], data['bounds']['upper']))
        self.state.q = q
        self.state.counts = counts
        self.state.observed_rewards = rewards
        self.state.episode = episode
        self.state.rng.bit_generator.state = rng_state
        self.recomputations = int(data.get('recomputations', 0))
        self._initialized = True

    def load_checkpoint(self, path: str):
        """Restore the learner state from a JSON checkpoint."""
        with open(path, 'r', encoding='utf-8') as f:
            self.restore(json.load(f))
        logger.info(f"Loaded checkpoint at episode {self.state.episode} from {path}")


def train(env: Environment, model: IntervalModelSet, config: LearnerConfig, params: ExplorationParams,
          schedule: Optional[LambdaSchedule], n_episodes: int,
          rng: np.random.Generator) -> Tuple[LearnerState, List[EpisodeStats]]:
    """
    Run a complete training run.

    Args:
        env: Ground-truth environment
        model: Model set containing the environment's MDP
        config: Learning settings
        params: Exploring policy weights
        schedule: Regularization schedule
        n_episodes: Number of episodes
        rng: Generator driving the run

    Returns:
        Tuple of the final learner state and the per-episode history
    """
    learner = BoundedQLearner(env, model, config, params, schedule, rng)
    history = learner.train(n_episodes)
    return learner.state, history
