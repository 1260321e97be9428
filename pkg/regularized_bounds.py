"""
Regularized Bounds Module

This module extends the interval bound iteration with observed data. It adds:
- Transition counts and the empirical kernel derived from them
- The Kullback-Leibler distance to the empirical kernel
- A count-driven regularization schedule (zero without data, growing with the
  square root of the visit count, infinite for known-deterministic rows)
- The KL-regularized inner optimization over an interval-constrained simplex
- Reward-set shrinking from observed rewards
- The regularized coupled bound iteration
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.special import rel_entr

from errors import ConfigError, ModelSetError
from interval_model import (
    FEASIBILITY_TOL, IntervalModelSet, QBounds, inner_optimize_sorted,
    iterate_bounds, sorted_mass_assignment, _check_sense,
)
from tabular_mdp import (
    DEFAULT_MAX_ITERS, DEFAULT_TOL, DENSE_JSON_LIMIT, TabularMdp, gather_slots, scatter_slots,
)

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('RegularizedBounds')

SUM_TOL = 1e-10
MAX_BISECTION_ITERS = 200
REWARD_MATCH_TOL = 1e-9


@dataclass
class TransitionCounts:
    """Visit counts T(x, u, slot) in the slot layout of a model set."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, model: IntervalModelSet) -> 'TransitionCounts':
        return cls(np.zeros(model.successors.shape, dtype=np.int64))

    @property
    def totals(self) -> np.ndarray:
        """T(x, u) = sum over successors of T(x, u, x')."""
        return np.sum(self.counts, axis=-1)

    @property
    def total_steps(self) -> int:
        return int(np.sum(self.counts))

    def record(self, state: int, action: int, slot: int):
        self.counts[state, action, slot] += 1

    def snapshot(self) -> 'TransitionCounts':
        return TransitionCounts(np.array(self.counts, copy=True))


@dataclass
class ObservedRewards:
    """Rewards observed so far; a recorded reward never changes."""

    values: np.ndarray
    observed: np.ndarray

    @classmethod
    def empty(cls, n_states: int, n_actions: int) -> 'ObservedRewards':
        return cls(np.zeros((n_states, n_actions)), np.zeros((n_states, n_actions), dtype=bool))

    def record(self, state: int, action: int, reward: float):
        """
        Record a reward for (state, action).

        Rewards are deterministic, so a second different value is reported and
        ignored.
        """
        if self.observed[state, action]:
            if abs(self.values[state, action] - reward) > REWARD_MATCH_TOL:
                logger.warning(
                    f"Conflicting reward at ({state}, {action}): kept {self.values[state, action]}, got {reward}"
                )
            return
        self.values[state, action] = reward
        self.observed[state, action] = True

    def apply(self, lower_rewards: np.ndarray, upper_rewards: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Shrink reward bounds to the observed values where available."""
        return (np.where(self.observed, self.values, lower_rewards),
                np.where(self.observed, self.values, upper_rewards))

    def snapshot(self) -> 'ObservedRewards':
        return ObservedRewards(np.array(self.values, copy=True), np.array(self.observed, copy=True))


@dataclass(frozen=True, eq=False)
class EmpiricalKernel:
    """Empirical transition frequencies; rows without data are flagged empty."""

    probabilities: np.ndarray
    empty: np.ndarray


@dataclass(frozen=True)
class LambdaSchedule:
    """
    Regularization strength per (state, action).

    lambda = c * sqrt(T / (log(n_pairs) / delta)) for T > 0, zero otherwise.
    Rows flagged in deterministic_rows switch to infinite strength once visited.
    """

    c: float
    delta: float
    n_pairs: int
    deterministic_rows: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError(f"must be positive, got {self.c}", 'lambda.c')
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.delta}", 'lambda.delta')
        if self.n_pairs < 2:
            raise ConfigError(f"need at least 2 state-action pairs for log(n_pairs) > 0, got {self.n_pairs}",
                              'lambda.n_pairs')

    @classmethod
    def for_model(cls, model: IntervalModelSet, c: float, delta: float,
                  deterministic_rows: Optional[np.ndarray] = None) -> 'LambdaSchedule':
        return cls(c, delta, model.n_states * model.n_actions, deterministic_rows)

    @property
    def scale(self) -> float:
        return np.log(self.n_pairs) / self.delta


def empirical_kernel(counts: TransitionCounts, smoothing: float = 0.0,
                     support: Optional[np.ndarray] = None) -> EmpiricalKernel:
    """
    Empirical kernel M_E(x, u, x') = T(x, u, x') / T(x, u).

    Args:
        counts: Observed transition counts
        smoothing: Optional additive pseudo-count on supported slots (off by default)
        support: Slots eligible for smoothing (required when smoothing > 0)

    Returns:
        EmpiricalKernel: Frequencies with empty rows flagged
    """
    raw = np.asarray(counts.counts, dtype=float)
    if smoothing > 0.0:
        if support is None:
            raise ValueError("smoothing requires a support mask")
        raw = raw + smoothing * (support & (counts.totals[..., None] > 0))
    totals = raw.sum(axis=-1)
    empty = counts.totals == 0
    safe = np.where(totals > 0, totals, 1.0)
    probabilities = np.where(empty[..., None], 0.0, raw / safe[..., None])
    return EmpiricalKernel(probabilities, empty)


def kl_divergence(p: np.ndarray, p_ref: np.ndarray) -> float:
    """
    Kullback-Leibler divergence sum p log(p / p_ref).

    Uses 0 log(0/q) = 0; mass where p_ref is zero gives +inf.
    """
    return float(np.sum(rel_entr(np.asarray(p, dtype=float), np.asarray(p_ref, dtype=float))))


def lambda_value(schedule: LambdaSchedule, total: int) -> float:
    """Regularization strength for a pair visited total times."""
    if total < 0:
        raise ValueError("total must be nonnegative")
    if total == 0:
        return 0.0
    return float(schedule.c * np.sqrt(total / schedule.scale))


def lambda_table(schedule: LambdaSchedule, totals: np.ndarray) -> np.ndarray:
    """Vectorized lambda_value over a (state, action) table of visit totals."""
    totals = np.asarray(totals, dtype=float)
    table = schedule.c * np.sqrt(totals / schedule.scale)
    if schedule.deterministic_rows is not None:
        table = np.where(np.asarray(schedule.deterministic_rows, dtype=bool) & (totals > 0), np.inf, table)
    return np.where(totals > 0, table, 0.0)


class KlRowProblem:
    """
    A batch of KL-regularized rows sharing bounds, reference rows and strengths.

    The optimizer of (+/-) sum(values * p) - lambda * KL(p || ref) over the box
    has the form p = clip(ref * exp(s * values / lambda - mu), lower, upper).
    KL is restricted to the observed support of ref; unobserved slots stay at
    their lower bounds and the normalizer mu brings the supported mass to
    1 - pinned mass, so every solved row sums to one.
    Rows that cannot be normalized this way fall back to the unregularized
    sorted solution.
    """

    def __init__(self, lower: np.ndarray, upper: np.ndarray, ref: np.ndarray, lam: np.ndarray):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.lam = np.asarray(lam, dtype=float)
        self.support = np.asarray(ref) > 0.0
        with np.errstate(divide='ignore'):
            self.log_ref = np.where(self.support, np.log(np.where(self.support, ref, 1.0)), -np.inf)
        self.target = 1.0 - np.sum(np.where(self.support, 0.0, self.lower), axis=-1)
        support_upper = np.sum(np.where(self.support, self.upper, 0.0), axis=-1)
        support_lower = np.sum(np.where(self.support, self.lower, 0.0), axis=-1)
        self.feasible = self.support.any(axis=-1) & (support_upper >= self.target - FEASIBILITY_TOL) & \
            (support_lower <= self.target + FEASIBILITY_TOL)
        self.finite = np.isfinite(self.lam)
        inside = np.all((ref >= self.lower) & (ref <= self.upper), axis=-1)
        self.exact_ref = ~self.finite & inside & self.feasible
        self.ref = np.asarray(ref, dtype=float)

    @property
    def fallback_rows(self) -> np.ndarray:
        return ~self.feasible

    def solve(self, values: np.ndarray, sense: str) -> np.ndarray:
        """
        Solve every row for the given successor values.

        Args:
            values: Successor values (N, K)
            sense: 'min' or 'max'

        Returns:
            np.ndarray: Optimizing probabilities (N, K)
        """
        _check_sense(sense)
        result = sorted_mass_assignment(values, self.lower, self.upper, sense)
        rows = self.feasible
        if not np.any(rows):
            return result
        sign = 1.0 if sense == 'max' else -1.0
        lam = np.where(self.finite, self.lam, 1.0)
        tilt = np.where(self.finite[:, None], sign * values / lam[:, None], 0.0)
        logits = np.where(self.support, self.log_ref + tilt, -np.inf)[rows]
        support, lower, upper = self.support[rows], self.lower[rows], self.upper[rows]
        mu = _normalizer(logits, support, lower, upper, self.target[rows])
        result[rows] = _tilted(logits, mu, support, lower, upper)
        result[self.exact_ref] = self.ref[self.exact_ref]
        return result


def _tilted(logits: np.ndarray, mu: np.ndarray, support: np.ndarray, lower: np.ndarray,
            upper: np.ndarray) -> np.ndarray:
    raw = np.exp(np.minimum(logits - mu[..., None], 0.0))
    return np.where(support, np.clip(raw, lower, upper), lower)


def _normalizer(logits: np.ndarray, support: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                target: np.ndarray) -> np.ndarray:
    """
    Bisection on mu for the supported mass sum(p(mu)[support]) = target.

    target excludes the mass pinned on unsupported slots; the supported mass
    is nonincreasing in mu.
    """
    def mass(mu: np.ndarray) -> np.ndarray:
        return np.sum(np.where(support, _tilted(logits, mu, support, lower, upper), 0.0), axis=-1)

    finite_logits = np.where(support, logits, np.nan)
    # at mu_low every supported entry sits at its upper bound, at mu_high at its lower bound
    mu_low = np.nanmin(finite_logits, axis=-1) - 1.0
    mu_high = np.nanmax(finite_logits, axis=-1) + 60.0
    width = np.ones_like(mu_low)
    for _ in range(64):
        short = mass(mu_low) < target - SUM_TOL
        over = mass(mu_high) > target + SUM_TOL
        if not (np.any(short) or np.any(over)):
            break
        mu_low = np.where(short, mu_low - width, mu_low)
        mu_high = np.where(over, mu_high + width, mu_high)
        width *= 2.0
    mu = 0.5 * (mu_low + mu_high)
    for _ in range(MAX_BISECTION_ITERS):
        mu = 0.5 * (mu_low + mu_high)
        current = mass(mu)
        if np.all(np.abs(current - target) <= SUM_TOL):
            break
        too_much = current > target
        mu_low = np.where(too_much, mu, mu_low)
        mu_high = np.where(too_much, mu_high, mu)
    return mu


def inner_optimize_regularized(values: np.ndarray, lower_row: np.ndarray, upper_row: np.ndarray,
                               ref_row: np.ndarray, lam: float, sense: str) -> np.ndarray:
    """
    Optimize (+/-) sum(values * p) - lam * KL(p || ref_row) over the row polytope.

    Args:
        values: Successor values
        lower_row: Lower transition bounds
        upper_row: Upper transition bounds
        ref_row: Empirical reference distribution
        lam: Regularization strength (0 disables, inf projects ref_row)
        sense: 'min' or 'max'

    Returns:
        np.ndarray: The optimizing probability vector
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return inner_optimize_sorted(values, lower_row, upper_row, sense)
    ref_row = np.asarray(ref_row, dtype=float)
    if np.any(ref_row < 0) or abs(ref_row.sum() - 1.0) > FEASIBILITY_TOL:
        raise ValueError("reference row must be a probability distribution")
    inner_optimize_sorted(values, lower_row, upper_row, sense)  # rejects empty polytopes
    problem = KlRowProblem(np.asarray(lower_row, dtype=float)[None], np.asarray(upper_row, dtype=float)[None],
                           ref_row[None], np.array([lam], dtype=float))
    if problem.fallback_rows[0]:
        logger.warning("Regularized row infeasible on the observed support; using the unregularized solution")
    return problem.solve(np.asarray(values, dtype=float)[None], sense)[0]


def regularized_bound_iteration(model: IntervalModelSet, counts: TransitionCounts, rewards: ObservedRewards,
                                schedule: LambdaSchedule, tol: float = DEFAULT_TOL,
                                max_iters: int = DEFAULT_MAX_ITERS,
                                init: Optional[QBounds] = None) -> QBounds:
    """
    Compute data-regularized Q-function bounds.

    Observed rewards replace the reward bounds; every visited row is pulled
    towards its empirical kernel with strength lambda_table(schedule, T).
    Unvisited rows use the unregularized inner optimization.

    Args:
        model: The model set
        counts: Snapshot of transition counts in the model's slot layout
        rewards: Snapshot of observed rewards
        schedule: Regularization schedule
        tol: Sup-norm residual at which to stop
        max_iters: Maximum number of sweeps
        init: Optional warm start

    Returns:
        QBounds: The regularized fixed points
    """
    if counts.counts.shape != model.successors.shape:
        raise ModelSetError("counts do not match the model set slot layout")
    kernel = empirical_kernel(counts)
    lam = lambda_table(schedule, counts.totals)
    lower_rewards, upper_rewards = rewards.apply(model.lower_rewards, model.upper_rewards)

    finite_rows = (lam > 0) & np.isfinite(lam) & ~kernel.empty
    infinite_rows = np.isinf(lam) & ~kernel.empty
    finite_problem = KlRowProblem(model.lower[finite_rows], model.upper[finite_rows],
                                  kernel.probabilities[finite_rows], lam[finite_rows])
    fixed_problem = KlRowProblem(model.lower[infinite_rows], model.upper[infinite_rows],
                                 kernel.probabilities[infinite_rows], lam[infinite_rows])
    n_fallback = int(finite_problem.fallback_rows.sum() + fixed_problem.fallback_rows.sum())
    if n_fallback:
        logger.warning(f"{n_fallback} regularized rows fell back to the unregularized solution")
    # infinite strength ignores the values, so those rows are solved once
    zeros = np.zeros(fixed_problem.lower.shape)
    fixed_rows = {sense: fixed_problem.solve(zeros, sense) for sense in ('min', 'max')}

    def solve_rows(values: np.ndarray, sense: str) -> np.ndarray:
        result = sorted_mass_assignment(values, model.lower, model.upper, sense)
        if np.any(finite_rows):
            result[finite_rows] = finite_problem.solve(values[finite_rows], sense)
        if np.any(infinite_rows):
            result[infinite_rows] = fixed_rows[sense]
        return result

    logger.debug(f"Regularized iteration: {int(finite_rows.sum())} finite rows, {int(infinite_rows.sum())} fixed rows")
    return iterate_bounds(model, lower_rewards, upper_rewards, solve_rows, tol, max_iters, init)


def synthetic_counts(model: IntervalModelSet, mdp: TabularMdp, per_pair: int,
                     rng: np.random.Generator) -> TransitionCounts:
    """Draw per_pair transitions from every row of a member MDP."""
    aligned = model.align_probabilities(mdp)
    aligned = aligned / aligned.sum(axis=-1, keepdims=True)
    return TransitionCounts(rng.multinomial(per_pair, aligned).astype(np.int64))


def observations_to_dict(model: IntervalModelSet, counts: TransitionCounts,
                         rewards: ObservedRewards) -> Dict[str, Any]:
    """Serialize counts and observed rewards alongside their model set layout."""
    dense = model.n_states <= DENSE_JSON_LIMIT
    return {
        'counts': scatter_slots(counts.counts, model.successors, model.n_states).astype(int).tolist()
        if dense else counts.counts.tolist(),
        'layout': 'dense' if dense else 'slots',
        'observed_rewards': np.where(rewards.observed, rewards.values, np.nan).tolist(),
    }


def observations_from_dict(model: IntervalModelSet, data: Dict[str, Any]) -> Tuple[TransitionCounts, ObservedRewards]:
    """Rebuild counts and observed rewards for a model set."""
    raw = np.asarray(data['counts'], dtype=float)
    if data.get('layout', 'dense') == 'dense':
        if raw.shape != (model.n_states, model.n_actions, model.n_states):
            raise ModelSetError("dense counts must be (S, A, S)")
        slots = gather_slots(raw, model.successors, model.real_slots)
        if slots.sum() != raw.sum():
            raise ModelSetError("counts record transitions outside the model set support")
        raw = slots
    counts = TransitionCounts(raw.astype(np.int64))
    if counts.counts.shape != model.successors.shape or np.any(counts.counts < 0):
        raise ModelSetError("counts do not match the model set")
    observed = np.asarray(data.get('observed_rewards', np.full((model.n_states, model.n_actions), np.nan)),
                          dtype=float)
    mask = ~np.isnan(observed)
    return counts, ObservedRewards(np.where(mask, observed, 0.0), mask)


def save_observations(model: IntervalModelSet, counts: TransitionCounts, rewards: ObservedRewards,
                      path: str) -> str:
    """Write counts and observed rewards to JSON and return the path."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(observations_to_dict(model, counts, rewards), f)
    logger.info(f"Saved {counts.total_steps} observed transitions to {path}")
    return path


def load_observations(model: IntervalModelSet, path: str) -> Tuple[TransitionCounts, ObservedRewards]:
    """Read counts and observed rewards from JSON."""
    with open(path, 'r', encoding='utf-8') as f:
        return observations_from_dict(model, json.load(f))
