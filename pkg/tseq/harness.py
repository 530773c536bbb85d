"""Iterative evaluation protocol and aggregation of its traces."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import itertools
import logging
import time

import numpy as np

from tseq.baselines import (
    DDQNConfig,
    DDQNStrategy,
    RandomStrategy,
    RuleStrategy,
    Strategy,
)
from tseq.calc import average_ranks, sign_test
from tseq.context import LabeledSequence, initial_context
from tseq.model import PFTSN, PFTSNStrategy
from tseq.prior import TSProblem
from tseq.utility import utility_vector

from typing import Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

METHODS = ("pftsn", "random", "rule", "ddqn")
RANK_CHECKPOINTS = (0.25, 0.5, 1.0)


@dataclass
class EvalConfig:
    iterations: int = 32
    init_context: int = 4
    methods: Tuple[str, ...] = ("pftsn", "random", "rule", "ddqn")
    context_cap: int = 16
    temperature: Optional[float] = None
    max_resamples: int = 0
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        self.methods = tuple(self.methods)
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}.")
        if self.init_context < 0:
            raise ValueError(f"init_context must be >= 0, got {self.init_context}.")
        for method in self.methods:
            if method not in METHODS:
                raise ValueError(f"Unknown method '{method}', expected one of {METHODS}.")
        if self.context_cap < 1:
            raise ValueError(f"context_cap must be >= 1, got {self.context_cap}.")
        if self.temperature is not None and not self.temperature > 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}.")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}.")


@dataclass
class TraceStep:
    sequence: np.ndarray
    utility: np.ndarray
    score: float
    best_so_far: float
    proposal_seconds: float = 0.0


@dataclass
class Trace:
    problem_id: str
    method: str
    length: int
    initial: List[LabeledSequence] = field(default_factory=list)
    steps: List[TraceStep] = field(default_factory=list)
    partial: bool = False
    error: Optional[str] = None

    @property
    def initial_best(self) -> float:
        return max((s.score for s in self.initial), default=0.0)

    def best_curve(self, iterations: Optional[int] = None) -> np.ndarray:
        """Best Ū after 0..n iterations, a partial trace is carried forward."""
        curve = [self.initial_best] + [s.best_so_far for s in self.steps]
        if iterations is not None:
            curve = curve[: iterations + 1]
            curve += [curve[-1]] * (iterations + 1 - len(curve))
        return np.array(curve, dtype=np.float64)

    def proposal_seconds(self) -> np.ndarray:
        return np.array([s.proposal_seconds for s in self.steps], dtype=np.float64)


def run_protocol(
    problem: TSProblem,
    strategy: Strategy,
    iterations: int,
    init_context_size: int,
    rng: np.random.Generator,
    initial: Optional[List[LabeledSequence]] = None,
) -> Trace:
    """Feeds an initial random context to `strategy`, then proposes and labels.

    Args:
        problem: problem to solve, the strategy only sees sequences and utilities
        strategy: searcher
        iterations: number of proposals
        init_context_size: random sequences evaluated before the first proposal
        rng: generator for the context and the strategy
        initial: use this context instead of drawing one

    Returns:
        trace, marked partial if the strategy raised
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}.")
    if initial is None:
        initial = initial_context(problem, init_context_size, rng)
    trace = Trace(problem.problem_id, strategy.name, problem.length, list(initial))
    best = trace.initial_best

    try:
        for item in initial:
            strategy.observe(item.tasks, item.utility, item.source)
        for _ in range(iterations):
            start = time.perf_counter()
            sequence = np.asarray(strategy.propose(rng), dtype=np.int64)
            elapsed = time.perf_counter() - start
            if sequence.shape != (problem.length,):
                raise ValueError(
                    f"Proposal has shape {sequence.shape}, expected ({problem.length},)."
                )
            if np.any(sequence < 0) or np.any(sequence >= problem.num_tasks):
                raise ValueError(f"Proposal {sequence.tolist()} has invalid task ids.")
            utility = utility_vector(sequence, problem.optimal)
            strategy.observe(sequence, utility)
            score = float(np.sum(utility))
            best = max(best, score)
            trace.steps.append(TraceStep(sequence, utility, score, best, elapsed))
    except Exception as e:
        logger.exception(
            f"{strategy.name} failed on problem '{problem.problem_id}' after "
            f"{len(trace.steps)} iterations."
        )
        trace.partial = True
        trace.error = str(e)
    return trace


def make_strategy(
    method: str,
    num_tasks: int,
    length: int,
    rng: np.random.Generator,
    model: Optional[PFTSN] = None,
    config: Optional[EvalConfig] = None,
    ddqn_config: Optional[DDQNConfig] = None,
) -> Strategy:
    config = config if config is not None else EvalConfig()
    if method == "random":
        return RandomStrategy(num_tasks, length)
    elif method == "rule":
        return RuleStrategy(num_tasks, length)
    elif method == "ddqn":
        if ddqn_config is None:
            ddqn_config = DDQNConfig(iterations=config.iterations)
        return DDQNStrategy(num_tasks, length, ddqn_config, rng)
    elif method == "pftsn":
        if model is None:
            raise ValueError("The pftsn method requires a model.")
        if (model.config.num_tasks, model.config.seq_len) != (num_tasks, length):
            raise ValueError(
                f"Model (N={model.config.num_tasks}, L={model.config.seq_len}) does "
                f"not match problems (N={num_tasks}, L={length})."
            )
        return PFTSNStrategy(
            model, config.temperature, config.context_cap, False, config.max_resamples
        )
    raise ValueError(f"Unknown method '{method}', expected one of {METHODS}.")


def _evaluate_one(args: Tuple) -> Trace:
    problem, index, method, config, model, ddqn_config = args
    rng = np.random.default_rng([config.seed, index])
    strategy = make_strategy(
        method, problem.num_tasks, problem.length, rng, model, config, ddqn_config
    )
    return run_protocol(problem, strategy, config.iterations, config.init_context, rng)


def evaluate_suite(
    problems: Sequence[TSProblem],
    method: str,
    config: EvalConfig,
    model: Optional[PFTSN] = None,
    ddqn_config: Optional[DDQNConfig] = None,
) -> List[Trace]:
    """One trace per problem, in problem order regardless of `config.workers`."""
    jobs = [(p, i, method, config, model, ddqn_config) for i, p in enumerate(problems)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as executor:
            traces = list(executor.map(_evaluate_one, jobs))
    else:
        traces = [_evaluate_one(job) for job in jobs]
    partial = sum(t.partial for t in traces)
    if partial > 0:
        logger.warning(f"{partial} of {len(traces)} {method} traces are partial.")
    logger.info(f"Evaluated {method} on {len(traces)} problems.")
    return traces


def _check_suites(traces: Dict[str, List[Trace]]) -> Tuple[List[str], int]:
    if len(traces) == 0:
        raise ValueError("No traces given.")
    suites = {m: sorted(t.problem_id for t in ts) for m, ts in traces.items()}
    reference = next(iter(suites.values()))
    for method, suite in suites.items():
        if suite != reference or len(set(suite)) != len(suite):
            raise ValueError(f"Trace suite of '{method}' does not match the others.")
    if len(reference) == 0:
        raise ValueError("Trace suites are empty.")
    iterations = {
        len(t.steps) for ts in traces.values() for t in ts if not t.partial
    }
    if len(iterations) > 1:
        raise ValueError(f"Traces have differing iteration counts {sorted(iterations)}.")
    if len(iterations) == 0:
        iterations = {max(len(t.steps) for ts in traces.values() for t in ts)}
    return reference, iterations.pop()


def checkpoint_iterations(
    iterations: int, fractions: Sequence[float] = RANK_CHECKPOINTS
) -> List[int]:
    return [int(np.floor(f * iterations + 0.5)) for f in fractions]


@dataclass
class RankTable:
    methods: List[str]
    problems: List[str]
    checkpoints: List[int]
    ranks: Dict[int, np.ndarray]  # (problems, methods) per checkpoint

    def mean_ranks(self, checkpoint: int) -> Dict[str, float]:
        means = np.mean(self.ranks[checkpoint], axis=0)
        return {m: float(r) for m, r in zip(self.methods, means)}


def aggregate_ranks(
    traces: Dict[str, List[Trace]], fractions: Sequence[float] = RANK_CHECKPOINTS
) -> RankTable:
    """Ranks methods per problem by best Ū at fractions of the iteration budget.

    Rank 1 is best and ties receive the average rank.

    Raises:
        ValueError: if methods were run on different problem suites
    """
    problems, iterations = _check_suites(traces)
    methods = list(traces)
    checkpoints = checkpoint_iterations(iterations, fractions)
    by_id = {m: {t.problem_id: t for t in ts} for m, ts in traces.items()}

    ranks = {}
    for c in checkpoints:
        scores = np.array(
            [
                [by_id[m][p].best_curve(iterations)[c] for m in methods]
                for p in problems
            ]
        )
        ranks[c] = average_ranks(scores)
    return RankTable(methods, problems, checkpoints, ranks)


def curve_export(
    traces: Dict[str, List[Trace]]
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per method, mean and standard deviation of best Ū over problems.

    Returns:
        {method: (mean, std)}, arrays indexed by iteration 0..n
    """
    curves = {}
    for method, ts in traces.items():
        if len(ts) == 0:
            raise ValueError(f"No traces for '{method}'.")
        iterations = max(len(t.steps) for t in ts)
        stacked = np.stack([t.best_curve(iterations) for t in ts])
        curves[method] = (np.mean(stacked, axis=0), np.std(stacked, axis=0))
    return curves


def iterations_to_optimum(trace: Trace, tol: float = 1e-9) -> Optional[int]:
    """First iteration whose best Ū reaches L, 0 if the initial context does."""
    curve = trace.best_curve()
    reached = np.flatnonzero(curve >= trace.length - tol)
    return int(reached[0]) if reached.size > 0 else None


def break_even(n1: float, t1: float, n2: float, t2: float) -> float:
    """Execution time x per sequence with n1·x + t1 = n2·x + t2.

    Raises:
        ValueError: if n1 equals n2, the break-even point is undefined
    """
    if n1 == n2:
        raise ValueError(f"Break-even undefined for equal iteration counts ({n1}).")
    return (t1 - t2) / (n2 - n1)


def timing_summary(traces: Dict[str, List[Trace]]) -> Dict[str, Dict[str, float]]:
    """Proposal timing and convergence per method.

    Unreached optima count as the full iteration budget in the median.
    """
    summary = {}
    for method, ts in traces.items():
        seconds = np.concatenate([t.proposal_seconds() for t in ts])
        budget = max(len(t.steps) for t in ts)
        reached = [iterations_to_optimum(t) for t in ts]
        counts = [budget if r is None else r for r in reached]
        mean_seconds = float(np.mean(seconds)) if seconds.size > 0 else 0.0
        median = float(np.median(counts))
        summary[method] = {
            "problems": len(ts),
            "mean_proposal_seconds": mean_seconds,
            "total_proposal_seconds": float(np.sum(seconds)),
            "solved": int(sum(r is not None for r in reached)),
            "median_iterations_to_optimum": median,
            "proposal_seconds_to_optimum": median * mean_seconds,
        }
    return summary


def break_even_table(summary: Dict[str, Dict[str, float]]) -> List[Dict]:
    """Break-even execution time for every method pair of a timing summary."""
    rows = []
    for a, b in itertools.combinations(summary, 2):
        n1 = summary[a]["median_iterations_to_optimum"]
        n2 = summary[b]["median_iterations_to_optimum"]
        t1 = summary[a]["proposal_seconds_to_optimum"]
        t2 = summary[b]["proposal_seconds_to_optimum"]
        try:
            seconds = break_even(n1, t1, n2, t2)
        except ValueError:
            seconds = None
        rows.append({"method_a": a, "method_b": b, "break_even_seconds": seconds})
    return rows


def final_sign_tests(traces: Dict[str, List[Trace]]) -> List[Dict]:
    """Paired sign test of final best Ū for every method pair."""
    problems, iterations = _check_suites(traces)
    by_id = {m: {t.problem_id: t for t in ts} for m, ts in traces.items()}
    final = {
        m: np.array([by_id[m][p].best_curve(iterations)[-1] for p in problems])
        for m in traces
    }
    rows = []
    for a, b in itertools.combinations(traces, 2):
        wins, losses, p = sign_test(final[a], final[b])
        rows.append(
            {"method_a": a, "method_b": b, "wins": wins, "losses": losses, "p_value": p}
        )
    return rows
