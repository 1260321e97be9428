"""
Experiment Harness

Monte-Carlo repetition of training runs with periodic greedy-policy
evaluation. It provides:
- Seeded, independent runs per algorithm variant, optionally in a process pool
- Greedy-policy evaluation on the true environment with unshaped rewards
- Nearest-rank percentile aggregation over runs
- results.csv, runs.csv, config.resolved.json and a gnuplot script, each
  written atomically
"""

import csv
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import ExperimentConfig, VariantSpec, build_environment
from environments import Environment
from errors import BoundedQError
from interval_model import IntervalModelSet
from learner import BoundedQLearner
from tabular_mdp import greedy_policy, sample_successors, solve_exact

# Set up logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('Harness')

PERCENTILES = (5, 50, 95)
RESULTS_HEADER = ('episode', 'variant', 'p05', 'p50', 'p95')
RUNS_HEADER = ('variant', 'run', 'episode', 'mean_return', 'success_rate')


@dataclass(frozen=True)
class EvalPoint:
    episode: int
    mean_return: float
    success_rate: float

    def metric(self, name: str) -> float:
        return self.mean_return if name == 'mean_return' else self.success_rate


@dataclass
class RunRecord:
    """Evaluation curve of one training run, or the error that stopped it."""

    run_id: int
    variant: str
    points: List[EvalPoint] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class PercentileRow:
    episode: int
    variant: str
    p05: float
    p50: float
    p95: float


def run_seeds(master_seed: int, run_index: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Training and evaluation generators of a run; the same for every variant."""
    train_seq, eval_seq = np.random.SeedSequence(master_seed, spawn_key=(run_index,)).spawn(2)
    return np.random.default_rng(train_seq), np.random.default_rng(eval_seq)


def evaluate_policy(env: Environment, policy: np.ndarray, rollouts: int,
                    rng: np.random.Generator) -> Tuple[float, float]:
    """
    Roll out a fixed deterministic policy on the true environment.

    Returns are undiscounted sums of the environment's evaluation rewards.
    An episode succeeds when it reaches a goal state ('goal' rule) or lasts
    the full step cap ('survival' rule).

    Args:
        env: The environment
        policy: Action per state
        rollouts: Number of episodes
        rng: Generator driving starts and transitions

    Returns:
        Tuple of the mean return and the success rate
    """
    policy = np.asarray(policy, dtype=np.int64)
    states = rng.choice(env.n_states, size=rollouts, p=env.start_distribution)
    terminal = env.mdp.terminal_mask
    returns = np.zeros(rollouts)
    reached_goal = np.zeros(rollouts, dtype=bool)
    for _ in range(env.max_steps):
        active = ~terminal[states]
        if not np.any(active):
            break
        # finished episodes stay put and earn nothing
        next_states = states.copy()
        next_states[active] = sample_successors(env.mdp, states[active], policy[states[active]], rng)
        rewards = np.where(active, env.evaluation_rewards(states, next_states), 0.0)
        returns += rewards
        reached_goal |= rewards > 0
        states = next_states
    if env.reward_rule == 'goal':
        successes = reached_goal
    else:
        successes = ~terminal[states]
    return float(np.mean(returns)), float(np.mean(successes))


def evaluate_greedy(env: Environment, q: np.ndarray, rollouts: int,
                    rng: np.random.Generator) -> Tuple[float, float]:
    """Evaluate the greedy policy of a Q-table without exploration."""
    return evaluate_policy(env, greedy_policy(q), rollouts, rng)


def exact_policy_score(env: Environment, rollouts: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Evaluate the exactly optimal policy of the true MDP the same way learned policies are."""
    _, policy = solve_exact(env.mdp)
    return evaluate_policy(env, policy, rollouts, rng)


def run_single(config: ExperimentConfig, variant: VariantSpec, run_index: int, env: Environment,
               model: IntervalModelSet) -> RunRecord:
    """
    Train one variant once and evaluate it at the configured episodes.

    Failures are logged and stored in the record instead of being raised.
    """
    record = RunRecord(run_index, variant.name)
    eval_points = set(config.eval_points())
    train_rng, eval_rng = run_seeds(config.seed, run_index)

    def evaluate(episodes_done: int, learner: BoundedQLearner):
        if episodes_done in eval_points:
            mean_return, success_rate = evaluate_greedy(env, learner.state.q, config.eval_rollouts, eval_rng)
            record.points.append(EvalPoint(episodes_done, mean_return, success_rate))

    try:
        learner = BoundedQLearner(env, model, config.variant_learner(variant), config.exploration,
                                  config.lambda_schedule(model), train_rng)
        learner.train(config.n_episodes, episode_callback=evaluate)
        logger.info(f"Run {run_index} of {variant.name} finished "
                    f"({learner.state.counts.total_steps} steps, {learner.recomputations} bound updates)")
    except Exception as e:
        logger.error(f"Run {run_index} of {variant.name} failed: {e}")
        record.error = f"{type(e).__name__}: {e}"
    return record


def _run_task(args: Tuple[ExperimentConfig, VariantSpec, int, Environment, IntervalModelSet]) -> RunRecord:
    return run_single(*args)


class ExperimentRunner:
    """
    Runs every (variant, run) pair of an experiment.

    The environment and model set are built once and shared by all runs.
    """

    def __init__(self, config: ExperimentConfig, env: Optional[Environment] = None,
                 model: Optional[IntervalModelSet] = None, show_progress: bool = False):
        """
        Initialize the runner.

        Args:
            config: Resolved experiment configuration
            env: Prebuilt environment (built from config if None)
            model: Prebuilt model set (built from config if None)
            show_progress: Show tqdm progress bars
        """
        self.config = config
        self.show_progress = show_progress
        if env is None or model is None:
            env, model = build_environment(config, show_progress)
        self.env = env
        self.model = model

    def run(self, progress_callback: Optional[Callable[[int, int], None]] = None) -> List[RunRecord]:
        """
        Execute all runs.

        Args:
            progress_callback: Called with (finished, total) after every run

        Returns:
            List[RunRecord]: Records ordered by variant, then run index
        """
        tasks = [(self.config, variant, run_index, self.env, self.model)
                 for variant in self.config.variants for run_index in range(self.config.n_runs)]
        total = len(tasks)
        records: Dict[Tuple[str, int], RunRecord] = {}
        with tqdm(total=total, desc="Runs", unit="run", disable=not self.show_progress) as pbar:
            def finished(record: RunRecord):
                records[(record.variant, record.run_id)] = record
                pbar.update(1)
                if progress_callback:
                    progress_callback(len(records), total)

            if self.config.threads > 1:
                with ProcessPoolExecutor(max_workers=self.config.threads) as pool:
                    futures = [pool.submit(_run_task, task) for task in tasks]
                    for future in as_completed(futures):
                        finished(future.result())
            else:
                for task in tasks:
                    finished(_run_task(task))
        ordered = [records[(variant.name, run_index)]
                   for variant in self.config.variants for run_index in range(self.config.n_runs)]
        n_failed = sum(r.failed for r in ordered)
        if n_failed:
            logger.warning(f"{n_failed} of {total} runs failed")
        return ordered


def run_experiment(config: ExperimentConfig, show_progress: bool = False) -> List[RunRecord]:
    """Build the environment and execute every run of an experiment."""
    return ExperimentRunner(config, show_progress=show_progress).run()


def aggregate(records: Sequence[RunRecord], metric: str = 'success_rate') -> List[PercentileRow]:
    """
    Nearest-rank 5th, 50th and 95th percentiles per variant and evaluation point.

    Failed runs are left out.

    Args:
        records: Run records
        metric: 'success_rate' or 'mean_return'

    Returns:
        List[PercentileRow]: Rows ordered by first appearance of the variant, then episode

    Raises:
        BoundedQError: If there is no successful record or evaluation points differ between runs
    """
    ok = [r for r in records if not r.failed]
    if not ok:
        raise BoundedQError("no successful run records to aggregate")
    variants = list(dict.fromkeys(r.variant for r in ok))
    rows = []
    for variant in variants:
        runs = [r for r in ok if r.variant == variant]
        episodes = [p.episode for p in runs[0].points]
        if any([p.episode for p in r.points] != episodes for r in runs):
            raise BoundedQError(f"evaluation points differ between runs of {variant}")
        values = np.array([[p.metric(metric) for p in r.points] for r in runs]).reshape(len(runs), len(episodes))
        for i, episode in enumerate(episodes):
            p05, p50, p95 = np.percentile(values[:, i], PERCENTILES, method='inverted_cdf')
            rows.append(PercentileRow(episode, variant, float(p05), float(p50), float(p95)))
    return rows


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    tmp_path = None
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except OSError as e:
        if tmp_path is not None and os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise BoundedQError(f"cannot write {path}: {e}") from e


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def plot_script(table: Sequence[PercentileRow], metric: str) -> str:
    """A gnuplot script drawing a percentile band and median line per variant."""
    variants = list(dict.fromkeys(row.variant for row in table))
    lines = [
        "# percentile bands from results.csv",
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        "set output 'results.png'",
        "set key bottom right",
        "set xlabel 'episode'",
        f"set ylabel '{metric}'",
        "set style fill transparent solid 0.2 noborder",
    ]
    plots = []
    for i, variant in enumerate(variants, start=1):
        select = f'(strcol(2) eq "{variant}" ? ${{col}} : 1/0)'
        plots.append(f"'results.csv' every ::1 using 1:{select.format(col=3)}:{select.format(col=5)} "
                     f"with filledcurves lc {i} notitle")
        plots.append(f"'results.csv' every ::1 using 1:{select.format(col=4)} "
                     f"with lines lw 2 lc {i} title '{variant}'")
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def emit_outputs(table: Sequence[PercentileRow], config: ExperimentConfig, out_dir: str,
                 records: Optional[Sequence[RunRecord]] = None) -> Dict[str, str]:
    """
    Write the experiment artifacts.

    Args:
        table: Aggregated percentile rows
        config: The resolved configuration
        out_dir: Output directory (created if missing)
        records: Per-run records for runs.csv (skipped if None)

    Returns:
        Dict[str, str]: Written file paths by artifact name

    Raises:
        BoundedQError: If a file cannot be written; the message names the path
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise BoundedQError(f"cannot create output directory {out_dir}: {e}") from e
    paths = {
        'results': os.path.join(out_dir, 'results.csv'),
        'config': os.path.join(out_dir, 'config.resolved.json'),
        'plot': os.path.join(out_dir, 'plot.gp'),
    }
    _atomic_write(paths['results'], _csv_text(
        RESULTS_HEADER, [(r.episode, r.variant, repr(r.p05), repr(r.p50), repr(r.p95)) for r in table]))
    _atomic_write(paths['config'], json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _atomic_write(paths['plot'], plot_script(table, config.metric))
    if records is not None:
        paths['runs'] = os.path.join(out_dir, 'runs.csv')
        rows = [(r.variant, r.run_id, p.episode, repr(p.mean_return), repr(p.success_rate))
                for r in records for p in r.points]
        _atomic_write(paths['runs'], _csv_text(RUNS_HEADER, rows))
    logger.info(f"Wrote {len(paths)} result files to {out_dir}")
    return paths
