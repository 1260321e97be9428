"""
Experiment Configuration

JSON experiment files are merged over per-environment presets carrying the
published settings, validated, and turned into the typed objects used by the
learner and the harness. The fully materialized document is what gets written
to config.resolved.json.

CLI defaults can be supplied through a .env file or the environment:
BOUNDED_Q_THREADS, BOUNDED_Q_OUT_DIR and BOUNDED_Q_RUNS.
"""

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import validators
from dotenv import load_dotenv

from environments import (
    CartpoleSpec, Environment, FrozenLakeSpec, frozen_lake_environment,
    frozen_lake_model_set, load_or_build_cartpole,
)
from errors import ConfigError
from exploration import BetaKind, ExplorationParams
from interval_model import IntervalModelSet
from learner import LearnerConfig
from regularized_bounds import LambdaSchedule

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('Config')

VARIANT_KINDS = ('epsilon_greedy_baseline', 'bounds_L_infinity', 'bounds_regularized')
METRICS = ('success_rate', 'mean_return')

_LEARNER_DEFAULTS = {
    'alpha': 0.05,
    'gamma': 0.95,
    'epsilon_start': 1.0,
    'epsilon_end': 0.01,
    'epsilon_decay': None,
    'max_steps_per_episode': None,
    'exploring_starts': False,
    'alpha_schedule': 'constant',
    'alpha_offset': 1.0,
    'bound_tol': 1e-8,
    'bound_max_iters': 100_000,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    'frozen_lake': {
        'environment': {'name': 'frozen_lake', 'map': '4x4', 'slippery': True, 'max_steps': 100},
        'variants': [
            {'name': 'epsilon_greedy', 'kind': 'epsilon_greedy_baseline', 'bounds_period': None},
            {'name': 'bounds_L_inf', 'kind': 'bounds_L_infinity', 'bounds_period': None},
            {'name': 'bounds_L50', 'kind': 'bounds_regularized', 'bounds_period': 50},
        ],
        'learner': dict(_LEARNER_DEFAULTS),
        'exploration': {'xi': 1.0, 'zeta': 0.0, 'beta': 'expected_improvement', 'beta_constant': 1.0},
        'lambda': {'c': 5.0, 'delta': 0.05},
        'n_runs': 20,
        'n_episodes': 2000,
        'eval_every': 25,
        'eval_rollouts': 100,
        'seed': 0,
        'metric': 'success_rate',
        'threads': 1,
        'cache_dir': None,
    },
    'cartpole': {
        'environment': {
            'name': 'cartpole',
            'gravity': 9.8,
            'cart_mass': 1.0,
            'half_length': 0.5,
            'force_mag': 10.0,
            'tau': 0.02,
            'pole_mass': 0.1,
            'mass_sweep': list(CartpoleSpec.mass_sweep),
            'bins': [6, 6, 12, 12],
            'ranges': [2.4, 3.0, 0.21, 3.5],
            'position_limit': 2.4,
            'angle_limit': 0.2095,
            'samples_per_cell': 256,
            'angle_weight': 0.5,
            'position_weight': 0.5,
            'start_spread': 0.05,
            'start_samples': 4096,
            'max_steps': 200,
            'seed': 0,
        },
        'variants': [
            {'name': 'epsilon_greedy', 'kind': 'epsilon_greedy_baseline', 'bounds_period': None},
            {'name': 'bounds_L_inf', 'kind': 'bounds_L_infinity', 'bounds_period': None},
            {'name': 'bounds_L500', 'kind': 'bounds_regularized', 'bounds_period': 500},
        ],
        'learner': dict(_LEARNER_DEFAULTS, alpha=0.03, gamma=0.97, epsilon_end=0.001, bound_tol=1e-6),
        'exploration': {'xi': 1.0, 'zeta': 0.0, 'beta': 'expected_improvement', 'beta_constant': 1.0},
        'lambda': {'c': 100.0, 'delta': 0.05},
        'n_runs': 10,
        'n_episodes': 10000,
        'eval_every': 100,
        'eval_rollouts': 100,
        'seed': 0,
        'metric': 'mean_return',
        'threads': 1,
        'cache_dir': None,
    },
}

# sections whose keys may differ from the preset
_FREE_SECTIONS = ('variants',)


@dataclass(frozen=True)
class VariantSpec:
    """One algorithm variant of an experiment."""

    name: str
    kind: str
    bounds_period: Optional[int] = None

    def __post_init__(self):
        if not self.name or not str(self.name).strip():
            raise ConfigError("variant name must not be empty", 'variants.name')
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}, expected one of {VARIANT_KINDS}", 'variants.kind')
        if self.kind == 'bounds_regularized':
            if self.bounds_period is None or isinstance(self.bounds_period, bool) or \
                    not isinstance(self.bounds_period, int) or self.bounds_period < 1:
                raise ConfigError(f"regularized variant {self.name!r} needs an integer bounds_period >= 1",
                                  'variants.bounds_period')


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A resolved, validated experiment."""

    environment: Dict[str, Any]
    variants: Tuple[VariantSpec, ...]
    learner: LearnerConfig
    exploration: ExplorationParams
    lambda_c: float
    lambda_delta: float
    n_runs: int
    n_episodes: int
    eval_every: int
    eval_rollouts: int
    seed: int
    metric: str
    threads: int = 1
    cache_dir: Optional[str] = None
    document: Dict[str, Any] = field(default_factory=dict)

    @property
    def environment_name(self) -> str:
        return self.environment['name']

    def eval_points(self) -> Tuple[int, ...]:
        """Episode indices at which the greedy policy is evaluated."""
        points = list(range(0, self.n_episodes + 1, self.eval_every))
        if points[-1] != self.n_episodes:
            points.append(self.n_episodes)
        return tuple(points)

    def variant_learner(self, variant: VariantSpec) -> LearnerConfig:
        """Learner settings of one variant."""
        if variant.kind == 'epsilon_greedy_baseline':
            return replace(self.learner, use_bounds=False, q_init='zeros', bounds_period=math.inf)
        if variant.kind == 'bounds_L_infinity':
            return replace(self.learner, use_bounds=True, q_init='midpoint', bounds_period=math.inf)
        return replace(self.learner, use_bounds=True, q_init='midpoint', bounds_period=variant.bounds_period)

    def lambda_schedule(self, model: IntervalModelSet) -> LambdaSchedule:
        return LambdaSchedule.for_model(model, self.lambda_c, self.lambda_delta)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.document)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any], path: str = '') -> Dict[str, Any]:
    """
    Merge override into a copy of base, rejecting keys base does not know.

    Raises:
        ConfigError: On unknown keys or a section replaced by a scalar
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in merged:
            raise ConfigError("unknown configuration key", where)
        if isinstance(merged[key], dict) and key not in _FREE_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError("expected an object", where)
            merged[key] = deep_merge(merged[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _number(value: Any, field_name: str, low: Optional[float] = None, high: Optional[float] = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"expected a finite number, got {value!r}", field_name)
    bounds = {}
    if low is not None:
        bounds['min_val'] = float(low)
    if high is not None:
        bounds['max_val'] = float(high)
    if bounds and validators.between(float(value), **bounds) is not True:
        raise ConfigError(f"must lie in [{low}, {high}], got {value}", field_name)
    return float(value)


def _integer(value: Any, field_name: str, low: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field_name)
    _number(value, field_name, low)
    return int(value)


def resolve_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Merge a raw experiment document over its preset and validate it.

    Args:
        data: Parsed JSON document; environment.name selects the preset

    Returns:
        ExperimentConfig: The validated configuration

    Raises:
        ConfigError: If the document is invalid
    """
    if not isinstance(data, dict):
        raise ConfigError("experiment document must be a JSON object")
    name = (data.get('environment') or {}).get('name', 'frozen_lake')
    if name not in PRESETS:
        raise ConfigError(f"unknown environment {name!r}, expected one of {sorted(PRESETS)}", 'environment.name')
    doc = deep_merge(PRESETS[name], data)

    variants_raw = doc['variants']
    if not isinstance(variants_raw, list) or not variants_raw:
        raise ConfigError("need at least one variant", 'variants')
    variants = []
    for entry in variants_raw:
        if not isinstance(entry, dict) or set(entry) - {'name', 'kind', 'bounds_period'}:
            raise ConfigError(f"variant entries need name, kind and bounds_period, got {entry!r}", 'variants')
        variants.append(VariantSpec(entry.get('name', ''), entry.get('kind', ''), entry.get('bounds_period')))
    if len({v.name for v in variants}) != len(variants):
        raise ConfigError("variant names must be unique", 'variants')
    doc['variants'] = [{'name': v.name, 'kind': v.kind, 'bounds_period': v.bounds_period} for v in variants]

    learner_doc = doc['learner']
    _number(learner_doc['alpha'], 'learner.alpha', 0.0)
    _number(learner_doc['gamma'], 'learner.gamma', 0.0, 1.0)
    _number(learner_doc['epsilon_start'], 'learner.epsilon_start', 0.0, 1.0)
    _number(learner_doc['epsilon_end'], 'learner.epsilon_end', 0.0, 1.0)
    if learner_doc['epsilon_decay'] is not None:
        _number(learner_doc['epsilon_decay'], 'learner.epsilon_decay', 0.0, 1.0)
    if learner_doc['max_steps_per_episode'] is not None:
        _integer(learner_doc['max_steps_per_episode'], 'learner.max_steps_per_episode', 1)
    _number(learner_doc['bound_tol'], 'learner.bound_tol', 0.0)
    _integer(learner_doc['bound_max_iters'], 'learner.bound_max_iters', 1)
    learner = LearnerConfig(bounds_period=math.inf, **learner_doc)

    exploration_doc = doc['exploration']
    try:
        beta = BetaKind(exploration_doc['beta'])
    except ValueError:
        raise ConfigError(f"unknown beta {exploration_doc['beta']!r}", 'exploration.beta') from None
    exploration = ExplorationParams(
        xi=_number(exploration_doc['xi'], 'exploration.xi', 0.0),
        zeta=_number(exploration_doc['zeta'], 'exploration.zeta', 0.0),
        beta_kind=beta,
        beta_constant=_number(exploration_doc['beta_constant'], 'exploration.beta_constant', 0.0),
    )

    lambda_c = _number(doc['lambda']['c'], 'lambda.c', 0.0)
    lambda_delta = _number(doc['lambda']['delta'], 'lambda.delta', 0.0, 1.0)
    if lambda_c <= 0 or not 0 < lambda_delta < 1:
        raise ConfigError("need c > 0 and 0 < delta < 1", 'lambda')

    if doc['metric'] not in METRICS:
        raise ConfigError(f"must be one of {METRICS}", 'metric')
    if doc['cache_dir'] is not None and not isinstance(doc['cache_dir'], str):
        raise ConfigError("must be a path or null", 'cache_dir')

    config = ExperimentConfig(
        environment=doc['environment'],
        variants=tuple(variants),
        learner=learner,
        exploration=exploration,
        lambda_c=lambda_c,
        lambda_delta=lambda_delta,
        n_runs=_integer(doc['n_runs'], 'n_runs', 1),
        n_episodes=_integer(doc['n_episodes'], 'n_episodes', 0),
        eval_every=_integer(doc['eval_every'], 'eval_every', 1),
        eval_rollouts=_integer(doc['eval_rollouts'], 'eval_rollouts', 1),
        seed=_integer(doc['seed'], 'seed', 0),
        metric=doc['metric'],
        threads=_integer(doc['threads'], 'threads', 1),
        cache_dir=doc['cache_dir'],
        document=doc,
    )
    environment_spec(config)
    return config


def load_config(path: str) -> ExperimentConfig:
    """
    Read and resolve an experiment file.

    Raises:
        ConfigError: If the file cannot be read, is not JSON or is invalid
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", path) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", path) from e
    return resolve_config(data)


def preset_config(name: str) -> ExperimentConfig:
    """The published settings of a benchmark, without any overrides."""
    return resolve_config({'environment': {'name': name}})


def with_overrides(config: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """
    Re-resolve a configuration with top-level values replaced.

    None values are ignored, so CLI flags that were not given leave the
    document untouched.
    """
    doc = config.to_dict()
    for key, value in overrides.items():
        if value is not None:
            if key not in doc:
                raise ConfigError("unknown configuration key", key)
            doc[key] = value
    return resolve_config(doc)


def env_defaults() -> Dict[str, Optional[str]]:
    """CLI defaults from .env / the process environment."""
    load_dotenv()
    return {
        'threads': os.getenv('BOUNDED_Q_THREADS'),
        'out_dir': os.getenv('BOUNDED_Q_OUT_DIR'),
        'runs': os.getenv('BOUNDED_Q_RUNS'),
    }


def environment_spec(config: ExperimentConfig):
    """The FrozenLakeSpec or CartpoleSpec described by a configuration."""
    params = {k: v for k, v in config.environment.items() if k != 'name'}
    gamma = config.learner.gamma
    try:
        if config.environment_name == 'frozen_lake':
            grid = params.pop('map')
            return FrozenLakeSpec(grid=grid if isinstance(grid, str) else tuple(grid), discount=gamma, **params)
        return CartpoleSpec(discount=gamma, **params)
    except TypeError as e:
        raise ConfigError(str(e), 'environment') from e


def build_environment(config: ExperimentConfig, show_progress: bool = False) -> Tuple[Environment, IntervalModelSet]:
    """
    Build the true environment and its model set.

    Args:
        config: Resolved experiment configuration
        show_progress: Show progress while estimating CartPole tensors

    Returns:
        Tuple of the environment and the model set
    """
    spec = environment_spec(config)
    if isinstance(spec, FrozenLakeSpec):
        return frozen_lake_environment(spec), frozen_lake_model_set(spec)
    return load_or_build_cartpole(spec, config.cache_dir, show_progress)
