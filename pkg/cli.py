#!/usr/bin/env python3
"""
Bounded Q-Learning CLI

This module provides the command-line interface of the toolkit:
- run: execute an experiment file and write results.csv, runs.csv,
  config.resolved.json and plot.gp
- solve: solve an MDP document exactly
- bounds: compute Q-function bounds of a model set, optionally regularized
  with observed counts, and print the certified actions

Exit codes: 0 success, 1 run or I/O failure, 2 configuration or input error.
"""

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np
from colorama import Fore, Style, init

from config import env_defaults, load_config, with_overrides
from errors import BoundedQError, ConfigError, ModelSetError
from harness import ExperimentRunner, aggregate, emit_outputs
from interval_model import bound_iteration, certify_actions, load_model_set
from regularized_bounds import LambdaSchedule, load_observations, regularized_bound_iteration
from tabular_mdp import load_mdp, solve_exact

# Initialize colorama for colored terminal output
init()

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('CLI')

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _env_int(value: Optional[str], name: str) -> Optional[int]:
    if value is None or value == '':
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got {value!r}", name) from None


def parse_args(argv: Optional[List[str]] = None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(description='Q-learning with Q-function bounds from bounded-parameter MDPs')
    parser.add_argument(
        '-v', '--verbose',
        help='Enable verbose output',
        action='store_true'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run an experiment file')
    run.add_argument('--config', required=True, help='Path to the JSON experiment file')
    run.add_argument('--out', help='Output directory (default: $BOUNDED_Q_OUT_DIR or results)')
    run.add_argument('--runs', type=int, help='Number of Monte-Carlo runs per variant')
    run.add_argument('--seed', type=int, help='Master seed')
    run.add_argument('--threads', type=int, help='Number of worker processes')

    solve = commands.add_parser('solve', help='Solve an MDP document exactly')
    solve.add_argument('--mdp', required=True, help='Path to the JSON MDP document')
    solve.add_argument('--tol', type=float, default=1e-8, help='Residual tolerance (default: 1e-8)')

    bounds = commands.add_parser('bounds', help='Compute Q-function bounds of a model set')
    bounds.add_argument('--model', required=True, help='Path to the JSON model set document')
    bounds.add_argument('--counts', help='Path to observed counts and rewards for regularized bounds')
    bounds.add_argument('-c', type=float, default=5.0, help='Regularization constant c (default: 5)')
    bounds.add_argument('--delta', type=float, default=0.05, help='Confidence parameter delta (default: 0.05)')
    bounds.add_argument('--tol', type=float, default=1e-8, help='Residual tolerance (default: 1e-8)')

    return parser.parse_args(argv)


def command_run(args) -> int:
    defaults = env_defaults()
    config = load_config(args.config)
    runs = args.runs if args.runs is not None else _env_int(defaults['runs'], 'BOUNDED_Q_RUNS')
    threads = args.threads if args.threads is not None else _env_int(defaults['threads'], 'BOUNDED_Q_THREADS')
    config = with_overrides(config, n_runs=runs, seed=args.seed, threads=threads)
    out_dir = args.out or defaults['out_dir'] or 'results'

    print(f"{Fore.GREEN}Running experiment with the following settings:{Style.RESET_ALL}")
    print(f"  Environment: {config.environment_name}")
    print(f"  Variants: {', '.join(v.name for v in config.variants)}")
    print(f"  Runs: {config.n_runs}, episodes: {config.n_episodes}, evaluation every {config.eval_every}")
    print(f"  Seed: {config.seed}, threads: {config.threads}")
    print(f"  Output directory: {out_dir}")
    print()

    try:
        records = ExperimentRunner(config, show_progress=True).run()
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}Experiment interrupted by user{Style.RESET_ALL}")
        return EXIT_RUN_FAILURE

    failed = [r for r in records if r.failed]
    if len(failed) == len(records):
        print(f"\n{Fore.RED}All runs failed; first error: {failed[0].error}{Style.RESET_ALL}")
        return EXIT_RUN_FAILURE
    table = aggregate(records, config.metric)
    paths = emit_outputs(table, config, out_dir, records)

    print(f"\n{Fore.BLUE}Summary ({config.metric}, final evaluation):{Style.RESET_ALL}")
    final = {}
    for row in table:
        final[row.variant] = row
    for variant, row in final.items():
        print(f"  {variant}: median {row.p50:.3f} [{row.p05:.3f}, {row.p95:.3f}] at episode {row.episode}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    if failed:
        print(f"\n{Fore.RED}{len(failed)} of {len(records)} runs failed{Style.RESET_ALL}")
        for record in failed:
            print(f"  {record.variant} run {record.run_id}: {record.error}")
        return EXIT_RUN_FAILURE
    return EXIT_OK


def command_solve(args) -> int:
    mdp = load_mdp(args.mdp)
    q, policy = solve_exact(mdp, tol=args.tol)
    print(f"{Fore.GREEN}Solved MDP with {mdp.n_states} states and {mdp.n_actions} actions{Style.RESET_ALL}")
    with np.printoptions(precision=6, suppress=True):
        print("Q*:")
        print(q)
    print(f"Greedy policy: {policy.tolist()}")
    return EXIT_OK


def command_bounds(args) -> int:
    model = load_model_set(args.model)
    if args.counts:
        counts, rewards = load_observations(model, args.counts)
        schedule = LambdaSchedule.for_model(model, args.c, args.delta)
        q = regularized_bound_iteration(model, counts, rewards, schedule, tol=args.tol)
        print(f"{Fore.GREEN}Regularized bounds from {counts.total_steps} observed transitions{Style.RESET_ALL}")
    else:
        q = bound_iteration(model, tol=args.tol)
        print(f"{Fore.GREEN}Bounds of the model set{Style.RESET_ALL}")
    certificates = certify_actions(q)
    print(f"  Max gap: {q.gap:.6g}")
    optimal = np.argwhere(certificates.optimal_mask())
    suboptimal = np.argwhere(certificates.suboptimal_mask())
    print(f"  Guaranteed optimal ({len(optimal)}): {[tuple(map(int, p)) for p in optimal]}")
    print(f"  Guaranteed suboptimal ({len(suboptimal)}): {[tuple(map(int, p)) for p in suboptimal]}")
    return EXIT_OK


COMMANDS = {
    'run': command_run,
    'solve': command_solve,
    'bounds': command_bounds,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main function for the CLI."""
    args = parse_args(argv)

    # Set up logging level
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    else:
        logging.getLogger().setLevel(logging.WARNING)

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ModelSetError) as e:
        print(f"{Fore.RED}Error: {e}{Style.RESET_ALL}")
        return EXIT_CONFIG_ERROR
    except FileNotFoundError as e:
        print(f"{Fore.RED}Error: file not found: {e.filename}{Style.RESET_ALL}")
        return EXIT_CONFIG_ERROR
    except (BoundedQError, OSError) as e:
        print(f"{Fore.RED}Error: {e}{Style.RESET_ALL}")
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
