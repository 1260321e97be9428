#!/usr/bin/env python3
"""
Benchmark Runner CLI

This script runs one of the built-in benchmarks (slippery Frozen Lake or the
discretized CartPole) with its published settings, without an experiment
file. It compares the epsilon-greedy baseline with the bound-guided
variants and reports the score of the exactly optimal policy for reference.
"""

import argparse
import logging
import sys

import numpy as np
from tqdm import tqdm

from config import PRESETS, build_environment, preset_config, with_overrides
from errors import BoundedQError, ConfigError, ModelSetError
from harness import ExperimentRunner, aggregate, emit_outputs, exact_policy_score

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('BenchmarkCLI')


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description='Run a built-in bounded Q-learning benchmark'
    )

    parser.add_argument(
        'benchmark',
        choices=sorted(PRESETS),
        help='The benchmark to run'
    )

    parser.add_argument(
        '-o', '--output-dir',
        type=str,
        default='benchmark_output',
        help='Directory to save output files (default: benchmark_output)'
    )

    parser.add_argument(
        '-r', '--runs',
        type=int,
        help='Number of Monte-Carlo runs per variant (default: preset)'
    )

    parser.add_argument(
        '-e', '--episodes',
        type=int,
        help='Training episodes per run (default: preset)'
    )

    parser.add_argument(
        '-s', '--seed',
        type=int,
        default=0,
        help='Master seed (default: 0)'
    )

    parser.add_argument(
        '-t', '--threads',
        type=int,
        default=1,
        help='Number of worker processes (default: 1)'
    )

    parser.add_argument(
        '--cache-dir',
        type=str,
        help='Directory for cached CartPole tensors'
    )

    return parser.parse_args(argv)


def progress_callback(current, total):
    """Callback for progress updates."""
    tqdm.write(f"Finished {current}/{total} runs")


def main(argv=None):
    """Main entry point for the script."""
    args = parse_args(argv)

    try:
        config = with_overrides(preset_config(args.benchmark), n_runs=args.runs, n_episodes=args.episodes,
                                seed=args.seed, threads=args.threads, cache_dir=args.cache_dir)
    except ConfigError as e:
        print(f"Invalid settings: {e}")
        return 2

    print(f"Running {args.benchmark}: {config.n_runs} runs x {len(config.variants)} variants, "
          f"{config.n_episodes} episodes each")

    try:
        env, model = build_environment(config, show_progress=True)
    except (ModelSetError, OSError) as e:
        logger.error(f"Could not build the {args.benchmark} environment: {e}")
        return 1
    logger.info(f"Built {env.name} with {env.n_states} states and {env.n_actions} actions")
    reference_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2 ** 31,)))
    exact_return, exact_success = exact_policy_score(env, max(config.eval_rollouts, 1000), reference_rng)

    try:
        records = ExperimentRunner(config, env, model).run(progress_callback=progress_callback)
        table = aggregate(records, config.metric)
        paths = emit_outputs(table, config, args.output_dir, records)
    except BoundedQError as e:
        print(f"\nBenchmark failed: {e}")
        return 1

    print("\nBenchmark completed!")
    print(f"Optimal policy: mean return {exact_return:.3f}, success rate {exact_success:.3f}")
    exact_score = exact_success if config.metric == 'success_rate' else exact_return
    for variant in config.variants:
        rows = [row for row in table if row.variant == variant.name]
        if not rows:
            print(f"  - {variant.name}: all runs failed")
            continue
        reached = next((row.episode for row in rows if row.p50 >= 0.9 * exact_score), None)
        print(f"  - {variant.name}: final median {rows[-1].p50:.3f}, "
              f"90% of optimal {'at episode ' + str(reached) if reached is not None else 'not reached'}")
    print("\nOutput files:")
    for name, path in paths.items():
        print(f"  - {name}: {path}")

    return 1 if any(r.failed for r in records) else 0


if __name__ == "__main__":
    sys.exit(main())
