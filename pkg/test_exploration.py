"""
Test script for the exploration module.

This script tests the improvement heuristics, the four-case weights and
weighted action sampling.
"""

import logging
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import uniform

from errors import BoundedQError, ConfigError
from exploration import (
    TIGHT_TOL, BetaKind, ExplorationParams, StateWeights, WeightCase, beta_weight, compute_weights,
    improvement, sample_action, weight_table,
)
from interval_model import QBounds, certify_actions, first_per_state, max_of_others

# Set up logging for tests
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('TestExploration')

# overlapping intervals at one state; V_lower = 0.5
FIGURE_BOUNDS = QBounds(np.array([[0.2, 0.5, 0.0]]), np.array([[0.9, 1.0, 0.4]]))


def random_bounds(rng: np.random.Generator, n_states: int, n_actions: int) -> QBounds:
    """Random Q-bounds where roughly a third of the intervals are tight."""
    lower = rng.uniform(-1.0, 1.0, (n_states, n_actions))
    width = rng.uniform(0.0, 1.0, (n_states, n_actions))
    width[rng.random((n_states, n_actions)) < 0.3] = 0.0
    return QBounds(lower, lower + width)


class TestImprovement(unittest.TestCase):
    """Test cases for improvement and beta_weight."""

    def setUp(self):
        """Set up the test environment."""
        # action 0: Q_lower = 0, Q_upper = 2 against V_lower = 1
        self.qb = QBounds(np.array([[0.0, 1.0, 0.0]]), np.array([[2.0, 1.5, 0.5]]))

    def test_improvement_values(self):
        """Gain over the best lower value, clamped at zero."""
        self.assertEqual(improvement(self.qb, 0, 0), 1.0)
        self.assertEqual(improvement(self.qb, 0, 2), 0.0)
        boundary = QBounds(np.array([[1.0, 0.0]]), np.array([[1.5, 1.0]]))
        self.assertEqual(improvement(boundary, 0, 1), 0.0)

    def test_probability_of_improvement(self):
        """Half of [0, 2] lies above 1."""
        self.assertAlmostEqual(beta_weight(self.qb, 0, 0, BetaKind.PROBABILITY_OF_IMPROVEMENT), 0.5)

    def test_expected_improvement(self):
        """1^2 / (2 * 2) = 0.25."""
        self.assertAlmostEqual(beta_weight(self.qb, 0, 0, BetaKind.EXPECTED_IMPROVEMENT), 0.25)

    def test_full_interval_improves(self):
        """An interval entirely above V_lower improves with certainty."""
        qb = QBounds(np.array([[1.0, 0.0]]), np.array([[3.0, 2.0]]))
        self.assertAlmostEqual(beta_weight(qb, 0, 0, BetaKind.PROBABILITY_OF_IMPROVEMENT), 1.0)

    def test_constant_kind(self):
        """The constant heuristic ignores the interval."""
        self.assertEqual(beta_weight(self.qb, 0, 0, BetaKind.CONSTANT, constant=0.3), 0.3)

    def test_tight_interval_raises(self):
        """A tight interval must never reach the improvement weight."""
        qb = QBounds(np.array([[1.0, 0.0]]), np.array([[1.0, 2.0]]))
        with self.assertRaises(BoundedQError):
            beta_weight(qb, 0, 0, BetaKind.EXPECTED_IMPROVEMENT)

    def test_uniform_belief(self):
        """PI and EI match a uniform distribution on the interval."""
        qb = random_bounds(np.random.default_rng(5), 50, 3)
        for x in range(50):
            v_lower = qb.lower[x].max()
            for u in range(3):
                width = qb.upper[x, u] - qb.lower[x, u]
                if width <= TIGHT_TOL:
                    continue
                belief = uniform(loc=qb.lower[x, u], scale=width)
                self.assertAlmostEqual(beta_weight(qb, x, u, BetaKind.PROBABILITY_OF_IMPROVEMENT),
                                       belief.sf(v_lower), places=9)
                self.assertAlmostEqual(beta_weight(qb, x, u, BetaKind.EXPECTED_IMPROVEMENT),
                                       belief.expect(lambda q: max(q - v_lower, 0.0)), places=6)

    def test_beta_ranges(self):
        """PI stays in [0, 1] and EI in [0, width / 2]."""
        qb = random_bounds(np.random.default_rng(6), 200, 3)
        for x in range(200):
            for u in range(3):
                width = qb.upper[x, u] - qb.lower[x, u]
                if width <= TIGHT_TOL:
                    continue
                pi = beta_weight(qb, x, u, BetaKind.PROBABILITY_OF_IMPROVEMENT)
                ei = beta_weight(qb, x, u, BetaKind.EXPECTED_IMPROVEMENT)
                self.assertTrue(0.0 <= pi <= 1.0)
                self.assertTrue(0.0 <= ei <= width / 2 + 1e-12)


class TestWeights(unittest.TestCase):
    """Test cases for the four-case weights."""

    def setUp(self):
        """Set up the test environment."""
        self.params = ExplorationParams()

    def test_default_params(self):
        """Defaults: xi = 1, zeta = 0, expected improvement."""
        self.assertEqual(self.params.xi, 1.0)
        self.assertEqual(self.params.zeta, 0.0)
        self.assertEqual(self.params.beta_kind, BetaKind.EXPECTED_IMPROVEMENT)

    def test_figure_scenario(self):
        """Two uncertain actions get beta weights, the dominated one gets zeta."""
        weights = compute_weights(FIGURE_BOUNDS, 0, self.params)
        self.assertEqual(weights.case(0), WeightCase.MAY_IMPROVE)
        self.assertEqual(weights.case(1), WeightCase.MAY_IMPROVE)
        self.assertEqual(weights.case(2), WeightCase.RESIDUAL)
        assert_allclose(weights.weights, [0.16 / 1.4, 0.25, 0.0])

    def test_figure_scenario_with_zeta(self):
        """A positive zeta keeps the dominated action alive."""
        weights = compute_weights(FIGURE_BOUNDS, 0, ExplorationParams(zeta=0.05))
        self.assertAlmostEqual(weights.weights[2], 0.05)

    def test_tight_strict_argmax(self):
        """Collapsed intervals: the argmax gets xi, the rest case 3."""
        table = np.array([[1.0, 3.0, 2.0]])
        weights = compute_weights(QBounds(table, table), 0, ExplorationParams(xi=2.0))
        assert_array_equal(weights.weights, [0.0, 2.0, 0.0])
        assert_array_equal(weights.cases, [WeightCase.DOMINATED, WeightCase.CERTAIN_OPTIMAL, WeightCase.DOMINATED])

    def test_all_identical_tight(self):
        """Tied tight actions: only the lowest index is certain."""
        table = np.full((1, 3), 0.7)
        weights = compute_weights(QBounds(table, table), 0, self.params)
        assert_array_equal(weights.cases, [WeightCase.CERTAIN_OPTIMAL, WeightCase.DOMINATED, WeightCase.DOMINATED])
        assert_array_equal(weights.weights, [1.0, 0.0, 0.0])

    def test_upper_equal_to_best_lower(self):
        """A wide interval touching V_lower from below is residual."""
        qb = QBounds(np.array([[0.5, 0.0]]), np.array([[0.8, 0.5]]))
        self.assertEqual(compute_weights(qb, 0, self.params).case(1), WeightCase.RESIDUAL)

    def test_case_partition(self):
        """Each tag matches the case predicates applied in order."""
        qb = random_bounds(np.random.default_rng(42), 10_000, 4)
        weights, cases = weight_table(qb, self.params)
        lower, upper = qb.lower, qb.upper
        v_lower = lower.max(axis=1, keepdims=True)
        tight = np.abs(upper - lower) <= TIGHT_TOL
        case1 = first_per_state(lower >= max_of_others(upper))
        case2 = ~case1 & ~tight & (upper > v_lower)
        case3 = ~case1 & tight & (upper <= v_lower)
        assert_array_equal(cases == WeightCase.CERTAIN_OPTIMAL, case1)
        assert_array_equal(cases == WeightCase.MAY_IMPROVE, case2)
        assert_array_equal(cases == WeightCase.DOMINATED, case3)
        assert_array_equal(cases == WeightCase.RESIDUAL, ~(case1 | case2 | case3))
        self.assertTrue(np.all(np.isfinite(weights)) and np.all(weights >= 0.0))

    def test_certain_excludes_may_improve(self):
        """A state with a certain action has no action that may improve."""
        qb = random_bounds(np.random.default_rng(43), 10_000, 3)
        _, cases = weight_table(qb, self.params)
        has_certain = np.any(cases == WeightCase.CERTAIN_OPTIMAL, axis=1)
        self.assertFalse(np.any(cases[has_certain] == WeightCase.MAY_IMPROVE))

    def test_certificate_consistency(self):
        """Case 1 is the optimal certificate; tight suboptimal actions are case 3."""
        qb = random_bounds(np.random.default_rng(44), 5_000, 4)
        _, cases = weight_table(qb, self.params)
        certificates = certify_actions(qb)
        tight = np.abs(qb.upper - qb.lower) <= TIGHT_TOL
        assert_array_equal(cases == WeightCase.CERTAIN_OPTIMAL, certificates.optimal_mask())
        dominated = cases == WeightCase.DOMINATED
        self.assertTrue(np.all(dominated[certificates.suboptimal_mask() & tight]))

    def test_invalid_params(self):
        """xi must be positive and zeta nonnegative."""
        with self.assertRaises(ConfigError):
            ExplorationParams(xi=0.0)
        with self.assertRaises(ConfigError):
            ExplorationParams(zeta=-0.1)
        with self.assertRaises(ValueError):
            ExplorationParams(beta_kind='bates')

    def test_string_beta_kind(self):
        """Beta kinds may be given by name."""
        self.assertEqual(ExplorationParams(beta_kind='probability_of_improvement').beta_kind,
                         BetaKind.PROBABILITY_OF_IMPROVEMENT)


class TestSampleAction(unittest.TestCase):
    """Test cases for sample_action."""

    def setUp(self):
        """Set up the test environment."""
        self.rng = np.random.default_rng(2024)

    @staticmethod
    def _weights(values):
        values = np.asarray(values, dtype=float)
        return StateWeights(values, np.full(values.shape, int(WeightCase.MAY_IMPROVE)))

    def _frequencies(self, values, n):
        weights = self._weights(values)
        draws = [sample_action(weights, self.rng) for _ in range(n)]
        return np.bincount(draws, minlength=len(values)) / n

    def test_point_mass(self):
        """Only the weighted action is ever drawn."""
        weights = self._weights([1.0, 0.0, 0.0])
        self.assertTrue(all(sample_action(weights, self.rng) == 0 for _ in range(1000)))

    def test_equal_weights(self):
        """Equal weights give equal frequencies."""
        assert_allclose(self._frequencies([1.0, 1.0], 100_000), [0.5, 0.5], atol=0.01)

    def test_zero_weights_uniform(self):
        """All-zero weights fall back to a uniform draw."""
        assert_allclose(self._frequencies([0.0, 0.0, 0.0], 30_000), [1 / 3] * 3, atol=0.015)

    def test_scale_invariance(self):
        """Scaling every weight leaves the distribution unchanged."""
        base = self._frequencies([0.2, 0.5, 0.3], 50_000)
        scaled = self._frequencies([2.0, 5.0, 3.0], 50_000)
        assert_allclose(base, scaled, atol=0.015)


if __name__ == '__main__':
    unittest.main()
