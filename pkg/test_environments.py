"""
Test script for the environments module.

This script tests the Frozen Lake and CartPole ground-truth MDPs, their model
sets, the discretization map and the environment wrapper. CartPole tests use
a reduced grid so they run in seconds.
"""

import logging
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from errors import ConfigError, ModelSetError
from environments import (
    FROZEN_LAKE_MAPS, CartpoleSpec, DiscretizationMap, Environment, FrozenLakeSpec, cartpole_dynamics,
    cartpole_environment, cartpole_model_set, cartpole_tensor, frozen_lake_environment, frozen_lake_mdp,
    frozen_lake_model_set, load_or_build_cartpole,
)

# Set up logging for tests
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('TestEnvironments')

LEFT, DOWN, RIGHT, UP = range(4)

# small enough for unit tests, fine enough in angle that the outermost
# angle cells fall over in one step
SMALL_CARTPOLE = dict(bins=(2, 2, 12, 6), samples_per_cell=32)


class TestFrozenLake(unittest.TestCase):
    """Test cases for the Frozen Lake MDP and model set."""

    def setUp(self):
        """Set up the test environment."""
        self.spec = FrozenLakeSpec()
        self.mdp = frozen_lake_mdp(self.spec)

    def test_default_map(self):
        """The default is the 4x4 map with holes at 5, 7, 11 and 12."""
        self.assertEqual(self.spec.shape, (4, 4))
        self.assertEqual(self.spec.states_of('H'), frozenset({5, 7, 11, 12}))
        self.assertEqual(self.mdp.terminal_states, frozenset({5, 7, 11, 12, 15}))

    def test_interior_slip(self):
        """Moving right from an interior cell slips up or down with 1/3 each."""
        row = self.mdp.transitions[6, RIGHT]
        expected = np.zeros(16)
        expected[[2, 7, 10]] = 1.0 / 3.0
        assert_allclose(row, expected)

    def test_corner_folds_back(self):
        """Blocked moves stay in place and accumulate."""
        row = self.mdp.transitions[0, LEFT]
        self.assertAlmostEqual(row[0], 2.0 / 3.0)
        self.assertAlmostEqual(row[4], 1.0 / 3.0)
        assert_allclose(self.mdp.transitions.sum(axis=-1), 1.0)

    def test_not_slippery(self):
        """Without slipping every move is deterministic."""
        mdp = frozen_lake_mdp(FrozenLakeSpec(slippery=False))
        self.assertEqual(mdp.transitions[0, RIGHT, 1], 1.0)
        self.assertEqual(mdp.transitions[0, UP, 0], 1.0)

    def test_goal_reward(self):
        """The reward is the chance of stepping into the goal."""
        self.assertAlmostEqual(self.mdp.rewards[14, RIGHT], 1.0 / 3.0)
        self.assertEqual(self.mdp.rewards[0, RIGHT], 0.0)
        assert_array_equal(self.mdp.rewards[15], [0.0] * 4)

    def test_model_set_rows(self):
        """Holes only allow themselves; interior rows allow their three slips."""
        model = frozen_lake_model_set(self.spec)
        self.assertEqual(np.count_nonzero(model.dense_upper[5, LEFT]), 1)
        self.assertEqual(model.dense_upper[5, LEFT, 5], 1.0)
        self.assertEqual(np.count_nonzero(model.dense_upper[6, RIGHT]), 3)
        assert_array_equal(model.dense_lower, 0.0)
        assert_array_equal(model.lower_rewards, model.upper_rewards)

    def test_model_set_contains_true_mdp(self):
        """The adjacency set contains the true dynamics."""
        for grid in FROZEN_LAKE_MAPS:
            spec = FrozenLakeSpec(grid=grid)
            self.assertTrue(frozen_lake_model_set(spec).contains(frozen_lake_mdp(spec)))

    def test_eight_by_eight(self):
        """The larger built-in map has 64 states."""
        self.assertEqual(frozen_lake_mdp(FrozenLakeSpec(grid='8x8')).n_states, 64)

    def test_malformed_maps(self):
        """Bad maps raise ConfigError."""
        for grid in (("SF", "F"), ("SS", "FG"), ("SF", "FF"), ("SX", "FG")):
            with self.assertRaises(ConfigError):
                FrozenLakeSpec(grid=grid)
        with self.assertRaises(ConfigError):
            FrozenLakeSpec(grid='16x16')

    def test_custom_map(self):
        """Custom maps given as rows are accepted."""
        spec = FrozenLakeSpec(grid=("SFG",), slippery=False)
        mdp = frozen_lake_mdp(spec)
        self.assertEqual(mdp.n_states, 3)
        self.assertEqual(mdp.rewards[1, RIGHT], 1.0)


class TestEnvironment(unittest.TestCase):
    """Test cases for the Environment wrapper."""

    def setUp(self):
        """Set up the test environment."""
        self.env = frozen_lake_environment(FrozenLakeSpec())
        self.rng = np.random.default_rng(3)

    def test_reset(self):
        """Episodes start at S unless exploring starts are requested."""
        self.assertEqual(self.env.reset(self.rng), 0)
        starts = {self.env.reset(self.rng, exploring_starts=True) for _ in range(500)}
        self.assertFalse(starts & self.env.mdp.terminal_states)
        self.assertGreater(len(starts), 5)

    def test_goal_evaluation_reward(self):
        """Entering the goal pays once."""
        rewards = self.env.evaluation_rewards(np.array([14, 15, 13]), np.array([15, 15, 12]))
        assert_array_equal(rewards, [1.0, 0.0, 0.0])

    def test_survival_evaluation_reward(self):
        """Survival pays for every step from a live state."""
        env = Environment('corridor', self.env.mdp, self.env.start_distribution, frozenset(), 'survival', 10)
        assert_array_equal(env.evaluation_rewards(np.array([0, 5]), np.array([5, 5])), [1.0, 0.0])

    def test_invalid_environment(self):
        """Bad start distributions and reward rules are rejected."""
        with self.assertRaises(ModelSetError):
            Environment('bad', self.env.mdp, np.ones(16), frozenset(), 'goal', 10)
        with self.assertRaises(ModelSetError):
            Environment('bad', self.env.mdp, self.env.start_distribution, frozenset(), 'bonus', 10)


class TestDiscretizationMap(unittest.TestCase):
    """Test cases for the CartPole discretization."""

    def setUp(self):
        """Set up the test environment."""
        self.grid = DiscretizationMap.from_spec(CartpoleSpec())

    def test_dimensions(self):
        """Default bins plus one fallen state."""
        self.assertEqual(self.grid.bins, (6, 6, 12, 12))
        self.assertEqual(self.grid.n_states, 6 * 6 * 12 * 12 + 1)
        self.assertEqual(self.grid.fallen_state, self.grid.n_cells)

    def test_bijection(self):
        """Flat and multi-indices convert both ways."""
        for cell in range(0, self.grid.n_cells, 7):
            self.assertEqual(self.grid.cell_index(self.grid.multi_index(cell)), cell)
        with self.assertRaises(IndexError):
            self.grid.multi_index(self.grid.n_cells)

    def test_centers_map_to_their_cells(self):
        """Every cell center discretizes to its own cell."""
        assert_array_equal(self.grid.discretize(self.grid.cell_centers()), np.arange(self.grid.n_cells))

    def test_out_of_range_clamps(self):
        """Values beyond a range go to the edge bin; failures go to the fallen state."""
        fast = self.grid.discretize(np.array([0.0, 100.0, 0.0, -100.0]))
        self.assertEqual(self.grid.multi_index(int(fast))[1], 5)
        self.assertEqual(self.grid.multi_index(int(fast))[3], 0)
        self.assertEqual(int(self.grid.discretize(np.array([3.0, 0.0, 0.0, 0.0]))), self.grid.fallen_state)
        self.assertEqual(int(self.grid.discretize(np.array([0.0, 0.0, -0.25, 0.0]))), self.grid.fallen_state)


class TestCartpole(unittest.TestCase):
    """Test cases for CartPole tensors and model sets."""

    def setUp(self):
        """Set up the test environment."""
        self.spec = CartpoleSpec(**SMALL_CARTPOLE)
        self.grid = DiscretizationMap.from_spec(self.spec)

    def test_dynamics_rest(self):
        """The upright resting state without force stays put."""
        assert_allclose(cartpole_dynamics(np.zeros(4), np.array(0.0), self.spec, 0.1), np.zeros(4))

    def test_dynamics_push(self):
        """Pushing right accelerates the cart right and tips the pole left."""
        state = cartpole_dynamics(np.zeros(4), np.array(10.0), self.spec, 0.1)
        self.assertGreater(state[1], 0.0)
        self.assertLess(state[3], 0.0)

    def test_tensor_rows(self):
        """Rows sum to one and the fallen state is absorbing."""
        mdp = cartpole_tensor(self.spec, 0.1)
        assert_allclose(mdp.probabilities.sum(axis=-1), 1.0)
        fallen = self.grid.fallen_state
        assert_array_equal(mdp.transitions[fallen, :, fallen], [1.0, 1.0])
        assert_array_equal(mdp.rewards[fallen], [0.0, 0.0])

    def test_extreme_angle_falls(self):
        """The most tilted, fastest-tipping cell falls over in one step."""
        mdp = cartpole_tensor(self.spec, 0.1)
        cell = self.grid.cell_index((1, 1, 11, 5))
        assert_allclose(mdp.transitions[cell, :, self.grid.fallen_state], [1.0, 1.0])

    def test_shaped_reward(self):
        """Centered cells earn more than tilted ones."""
        mdp = cartpole_tensor(self.spec, 0.1)
        upright = self.grid.cell_index((0, 0, 6, 3))
        tilted = self.grid.cell_index((0, 0, 11, 3))
        self.assertGreater(mdp.rewards[upright, 0], mdp.rewards[tilted, 0])
        self.assertLessEqual(mdp.rewards.max(), 1.0)

    def test_model_set_contains_true_mdp(self):
        """The mass envelope contains the tensor of the true mass."""
        model = cartpole_model_set(self.spec)
        self.assertTrue(model.contains(cartpole_tensor(self.spec, self.spec.pole_mass)))
        self.assertTrue(np.all(model.lower.sum(axis=-1) <= 1.0 + 1e-9))
        self.assertTrue(np.all(model.upper.sum(axis=-1) >= 1.0 - 1e-9))

    def test_singleton_sweep(self):
        """A sweep holding only the true mass collapses onto its tensor."""
        spec = CartpoleSpec(mass_sweep=(0.1,), **SMALL_CARTPOLE)
        model = cartpole_model_set(spec)
        assert_allclose(model.dense_lower, model.dense_upper)
        assert_allclose(model.dense_upper, cartpole_tensor(spec, 0.1).transitions)

    def test_seed_determinism(self):
        """Tensors depend only on the settings, including the seed."""
        first = cartpole_tensor(self.spec, 0.15).transitions
        assert_array_equal(first, cartpole_tensor(self.spec, 0.15).transitions)
        other = cartpole_tensor(CartpoleSpec(seed=1, **SMALL_CARTPOLE), 0.15).transitions
        self.assertFalse(np.array_equal(first, other))

    def test_sampling_stability(self):
        """Doubling the samples per cell moves transition entries by about 1 / sqrt(n)."""
        n = 64
        coarse = cartpole_tensor(CartpoleSpec(**dict(SMALL_CARTPOLE, samples_per_cell=n)), 0.1)
        fine = cartpole_tensor(CartpoleSpec(**dict(SMALL_CARTPOLE, samples_per_cell=2 * n)), 0.1)
        assert_array_equal(fine.rewards, coarse.rewards)
        occupied = (fine.transitions > 0) | (coarse.transitions > 0)
        moved = np.abs(fine.transitions - coarse.transitions)[occupied]
        self.assertLessEqual(np.quantile(moved, 0.99), 2.0 / np.sqrt(n))
        self.assertLess(moved.max(), 4.0 / np.sqrt(n))

    def test_start_distribution(self):
        """Episodes start near the upright center."""
        env = cartpole_environment(self.spec)
        self.assertAlmostEqual(env.start_distribution.sum(), 1.0)
        self.assertEqual(env.start_distribution[self.grid.fallen_state], 0.0)
        self.assertEqual(env.reward_rule, 'survival')

    def test_invalid_specs(self):
        """The true mass must lie in the sweep and every dimension needs bins."""
        with self.assertRaises(ConfigError):
            CartpoleSpec(pole_mass=0.5)
        with self.assertRaises(ConfigError):
            CartpoleSpec(bins=(6, 6, 1, 12))

    def test_cache_roundtrip(self):
        """A cached build loads back the same tensors."""
        with tempfile.TemporaryDirectory() as tmp:
            env, model = load_or_build_cartpole(self.spec, tmp)
            self.assertEqual(len(os.listdir(tmp)), 2)
            cached_env, cached_model = load_or_build_cartpole(self.spec, tmp)
        assert_allclose(cached_env.mdp.transitions, env.mdp.transitions)
        assert_allclose(cached_model.dense_upper, model.dense_upper)
        assert_allclose(cached_env.start_distribution, env.start_distribution)


if __name__ == '__main__':
    unittest.main()
