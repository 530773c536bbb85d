"""Context sets: random, mutated and adaptively mixed labelled sequences."""
from dataclasses import dataclass, field
import logging

import numpy as np

from tseq.prior import TSProblem
from tseq.utility import utility_matrix

from typing import List, Optional, Set, Tuple

logger = logging.getLogger(__name__)

SOURCES = ("random", "mutated", "proposed")


@dataclass
class LabeledSequence:
    tasks: np.ndarray
    utility: np.ndarray
    source: str = "random"

    def __post_init__(self) -> None:
        self.tasks = np.asarray(self.tasks, dtype=np.int64)
        self.utility = np.asarray(self.utility, dtype=np.float64)
        if self.tasks.shape != self.utility.shape:
            raise ValueError(
                f"tasks {self.tasks.shape} and utility {self.utility.shape} differ."
            )
        if self.source not in SOURCES:
            raise ValueError(f"Unknown source '{self.source}', expected {SOURCES}.")

    @property
    def score(self) -> float:
        return float(np.sum(self.utility))


@dataclass
class ContextBatch:
    problem_id: str
    sequences: List[LabeledSequence] = field(default_factory=list)
    context_min: int = 4
    context_max: int = 16

    @property
    def size(self) -> int:
        return len(self.sequences)

    def tasks(self) -> np.ndarray:
        return np.stack([s.tasks for s in self.sequences])

    def utilities(self) -> np.ndarray:
        return np.stack([s.utility for s in self.sequences])


def sample_random(
    n: int, num_tasks: int, length: int, rng: np.random.Generator
) -> np.ndarray:
    """`n` sequences with every position uniform over the tasks, shape (n, L)."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}.")
    return rng.integers(num_tasks, size=(n, length), dtype=np.int64)


def mutate(
    optimal: np.ndarray,
    rng: np.random.Generator,
    optimal_set: Optional[Set[Tuple[int, ...]]] = None,
    num_tasks: Optional[int] = None,
    keep: Optional[int] = None,
    max_retries: int = 16,
) -> Tuple[np.ndarray, bool]:
    """Resamples the suffix of a random optimal sequence.

    The first L_mut tasks of τ* are kept, L_mut ~ Uniform{⌊L/2⌋, ..., L-1}, and the
    rest are drawn uniformly. Results landing in S* are redrawn.

    Args:
        optimal: array (k, L) of optimal sequences
        rng: generator
        optimal_set: S* as tuples, built from `optimal` if not given
        num_tasks: task count N, defaults to max(optimal) + 1
        keep: force L_mut
        max_retries: suffix redraws per (τ*, L_mut), and (τ*, L_mut) redraws

    Returns:
        mutated sequence, and True if it is still optimal (caller drops it)
    """
    optimal = np.atleast_2d(np.asarray(optimal, dtype=np.int64))
    if optimal.shape[0] == 0:
        raise ValueError("The optimal set is empty.")
    if optimal_set is None:
        optimal_set = {tuple(int(t) for t in row) for row in optimal}
    if num_tasks is None:
        num_tasks = int(optimal.max()) + 1
    length = optimal.shape[1]

    sequence = optimal[0].copy()
    for _ in range(max_retries):
        source = optimal[int(rng.integers(optimal.shape[0]))]
        cut = keep if keep is not None else int(rng.integers(length // 2, length))
        for _ in range(max_retries):
            sequence = source.copy()
            sequence[cut:] = rng.integers(num_tasks, size=length - cut)
            if tuple(int(t) for t in sequence) not in optimal_set:
                return sequence, False
    logger.debug("Mutation stayed optimal after all retries, flagging it.")
    return sequence, True


def mix_context(size: int, context_min: int, context_max: int) -> Tuple[int, int]:
    """Adaptive mixing C_mut = ⌊C (C - C_min) / (C_max - C_min)⌋.

    Returns:
        (C_rand, C_mut)
    """
    if context_max == context_min:
        raise ValueError(f"context_max must exceed context_min, both are {context_min}.")
    if not context_min <= size <= context_max:
        raise ValueError(
            f"Context size {size} outside [{context_min}, {context_max}]."
        )
    mutated = (size * (size - context_min)) // (context_max - context_min)
    return size - mutated, mutated


def label_sequences(
    taus: np.ndarray, problem: TSProblem, source: str
) -> List[LabeledSequence]:
    if len(taus) == 0:
        return []
    utilities = utility_matrix(taus, problem.optimal)
    return [LabeledSequence(t, u, source) for t, u in zip(taus, utilities)]


def _non_optimal_random(
    n: int, problem: TSProblem, rng: np.random.Generator, max_retries: int = 64
) -> np.ndarray:
    optimal_set = problem.optimal_set()
    taus = sample_random(n, problem.num_tasks, problem.length, rng)
    for i in range(n):
        for _ in range(max_retries):
            if tuple(int(t) for t in taus[i]) not in optimal_set:
                break
            taus[i] = sample_random(1, problem.num_tasks, problem.length, rng)[0]
        else:
            raise ValueError(
                f"Problem '{problem.problem_id}' has no reachable non-optimal sequence."
            )
    return taus


def mutated_sequences(
    n: int, problem: TSProblem, rng: np.random.Generator
) -> Tuple[np.ndarray, int]:
    """`n` mutated sequences; flagged (still optimal) draws are dropped.

    Returns:
        array (n - dropped, L), number dropped
    """
    optimal_set = problem.optimal_set()
    taus = []
    for _ in range(n):
        tau, flagged = mutate(
            problem.optimal, rng, optimal_set=optimal_set, num_tasks=problem.num_tasks
        )
        if not flagged:
            taus.append(tau)
    taus = np.array(taus, dtype=np.int64).reshape(-1, problem.length)
    return taus, n - taus.shape[0]


def build_training_context(
    problem: TSProblem,
    rng: np.random.Generator,
    context_min: int = 4,
    context_max: int = 16,
    size: Optional[int] = None,
) -> ContextBatch:
    """A labelled, strictly non-optimal training context.

    Args:
        problem: sampled problem
        rng: generator
        context_min: C_min
        context_max: C_max
        size: fixed C, drawn uniformly from [C_min, C_max] if None

    Returns:
        batch with C_rand random followed by C_mut mutated sequences
    """
    if size is None:
        size = int(rng.integers(context_min, context_max + 1))
    if context_max == context_min:
        n_random, n_mutated = size, 0
    else:
        n_random, n_mutated = mix_context(size, context_min, context_max)

    mutated, dropped = mutated_sequences(n_mutated, problem, rng)
    if dropped > 0:
        logger.debug(f"Replaced {dropped} optimal mutations with random sequences.")
    random = _non_optimal_random(n_random + dropped, problem, rng)

    sequences = label_sequences(random, problem, "random") + label_sequences(
        mutated, problem, "mutated"
    )
    return ContextBatch(problem.problem_id, sequences, context_min, context_max)


def initial_context(
    problem: TSProblem, n: int, rng: np.random.Generator
) -> List[LabeledSequence]:
    """Evaluation context of `n` uniformly random labelled sequences."""
    taus = sample_random(n, problem.num_tasks, problem.length, rng)
    return label_sequences(taus, problem, "random")
