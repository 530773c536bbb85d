"""Prior over task-sequencing problems.

Problems are sampled as stochastically expanded, depth-layered DAGs whose
root-to-leaf paths, read through the node task labels, form the optimal set S*.
"""
from dataclasses import dataclass, field
import itertools
import logging

import networkx as nx
import numpy as np

from typing import Iterable, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

OPERATIONS = ("atomic", "or", "and")


class GenerationError(RuntimeError):
    pass


@dataclass
class PriorConfig:
    num_tasks: int = 8
    sequence_length: int = 8
    k_max: int = 2
    optimal_set_cap: int = 4096
    seed: int = 0
    max_retries: int = 64

    def __post_init__(self) -> None:
        if self.num_tasks < 2:
            raise ValueError(f"num_tasks must be >= 2, got {self.num_tasks}.")
        if self.sequence_length < 1:
            raise ValueError(
                f"sequence_length must be >= 1, got {self.sequence_length}."
            )
        if not 2 <= self.k_max <= self.num_tasks:
            raise ValueError(
                f"k_max must be in [2, num_tasks={self.num_tasks}], got {self.k_max}."
            )
        if self.optimal_set_cap < 1:
            raise ValueError(
                f"optimal_set_cap must be >= 1, got {self.optimal_set_cap}."
            )
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}.")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be >= 1, got {self.max_retries}.")


@dataclass
class TaskGraph:
    """Depth-layered DAG of task-labelled nodes.

    Node ids are list indices into `tasks` and `depth`. Roots sit at depth 0 and
    every edge joins depth d to depth d + 1.
    """

    tasks: List[int] = field(default_factory=list)
    edges: List[Tuple[int, int]] = field(default_factory=list)
    depth: List[int] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.tasks)

    def copy(self) -> "TaskGraph":
        return TaskGraph(list(self.tasks), list(self.edges), list(self.depth))

    def roots(self) -> List[int]:
        targets = {v for _, v in self.edges}
        return [v for v in range(self.num_nodes) if v not in targets]

    def leaves(self) -> List[int]:
        sources = {u for u, _ in self.edges}
        return [v for v in range(self.num_nodes) if v not in sources]

    def children(self) -> List[List[int]]:
        children: List[List[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            children[u].append(v)
        return children

    def levels(self) -> int:
        """Number of node levels, i.e. the length of every root-to-leaf path."""
        return max(self.depth) + 1 if self.depth else 0

    def add_node(self, task: int, depth: int) -> int:
        self.tasks.append(int(task))
        self.depth.append(int(depth))
        return self.num_nodes - 1

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for v, (task, depth) in enumerate(zip(self.tasks, self.depth)):
            graph.add_node(v, task=task, depth=depth)
        graph.add_edges_from(self.edges)
        return graph

    def validate(self) -> None:
        """Checks references, depth layering and acyclicity.

        Raises:
            ValueError: if the graph is malformed
        """
        if len(self.depth) != len(self.tasks):
            raise ValueError("depth and tasks must have equal length.")
        for u, v in self.edges:
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise ValueError(f"Edge ({u}, {v}) references a missing node.")
            if self.depth[v] != self.depth[u] + 1:
                raise ValueError(
                    f"Edge ({u}, {v}) joins depth {self.depth[u]} to {self.depth[v]}."
                )
        for v in self.roots():
            if self.depth[v] != 0:
                raise ValueError(f"Root {v} has depth {self.depth[v]}.")
        if not nx.is_directed_acyclic_graph(self.to_networkx()):
            raise ValueError("Task graph contains a cycle.")


@dataclass
class TSProblem:
    graph: TaskGraph
    optimal: np.ndarray  # (|S*|, L) int64, lexicographically sorted
    config: PriorConfig
    problem_id: str = ""

    @property
    def num_tasks(self) -> int:
        return self.config.num_tasks

    @property
    def length(self) -> int:
        return self.config.sequence_length

    def optimal_set(self) -> set:
        return {tuple(int(t) for t in row) for row in self.optimal}


def _check_budget(graph: TaskGraph, levels: int, length: Optional[int]) -> None:
    if length is not None and graph.levels() + levels > length:
        raise ValueError(
            f"Expansion by {levels} level(s) would exceed sequence length {length} "
            f"(graph has {graph.levels()} levels)."
        )


def _check_tasks(tasks: Sequence[int]) -> None:
    if len(tasks) == 0:
        raise ValueError("At least one task is required.")
    if len(set(tasks)) != len(tasks):
        raise ValueError(f"Tasks must be distinct, got {list(tasks)}.")


def expand_atomic(
    graph: TaskGraph, task: int, length: Optional[int] = None
) -> TaskGraph:
    """Appends one node shared by every current leaf.

    Args:
        graph: graph to expand, not modified
        task: task of the new node
        length: sequence length L, the expansion is rejected past L levels

    Returns:
        expanded copy of `graph`
    """
    _check_budget(graph, 1, length)
    leaves = graph.leaves()
    result = graph.copy()
    v = result.add_node(task, graph.levels())
    result.edges.extend((u, v) for u in leaves)
    return result


def expand_or(
    graph: TaskGraph, tasks: Sequence[int], length: Optional[int] = None
) -> TaskGraph:
    """Appends one node per task, each reachable from every current leaf."""
    _check_tasks(tasks)
    _check_budget(graph, 1, length)
    leaves = graph.leaves()
    result = graph.copy()
    for task in tasks:
        v = result.add_node(task, graph.levels())
        result.edges.extend((u, v) for u in leaves)
    return result


def expand_and(
    graph: TaskGraph, tasks: Sequence[int], length: Optional[int] = None
) -> TaskGraph:
    """Appends one fresh path per permutation of `tasks`.

    The head of every permutation path is linked from every current leaf, so the
    result gains len(tasks)! leaves, all at the same depth.
    """
    _check_tasks(tasks)
    _check_budget(graph, len(tasks), length)
    leaves = graph.leaves()
    base = graph.levels()
    result = graph.copy()
    for permutation in itertools.permutations(tasks):
        previous = None
        for offset, task in enumerate(permutation):
            v = result.add_node(task, base + offset)
            if previous is None:
                result.edges.extend((u, v) for u in leaves)
            else:
                result.edges.append((previous, v))
            previous = v
    return result


def count_paths(graph: TaskGraph) -> int:
    """Number of root-to-leaf paths, counted without enumerating them."""
    children = graph.children()
    counts = [0] * graph.num_nodes
    for v in sorted(range(graph.num_nodes), key=lambda v: -graph.depth[v]):
        counts[v] = 1 if not children[v] else sum(counts[c] for c in children[v])
    return sum(counts[r] for r in graph.roots())


def enumerate_optimal(graph: TaskGraph, length: Optional[int] = None) -> np.ndarray:
    """All root-to-leaf paths of `graph` mapped through the node tasks.

    Args:
        graph: acyclic, depth-layered task graph
        length: expected path length, checked if given

    Returns:
        deduplicated sequences sorted lexicographically, shape (n, L)

    Raises:
        ValueError: if paths have unequal lengths
    """
    children = graph.children()
    sequences = set()
    stack = [(r, (graph.tasks[r],)) for r in graph.roots()]
    while stack:
        v, path = stack.pop()
        if not children[v]:
            sequences.add(path)
            continue
        for c in children[v]:
            stack.append((c, path + (graph.tasks[c],)))

    lengths = {len(s) for s in sequences}
    if len(lengths) > 1:
        raise ValueError(f"Malformed task graph, path lengths {sorted(lengths)}.")
    if length is not None and lengths and lengths != {length}:
        raise ValueError(
            f"Malformed task graph, paths have length {lengths.pop()} not {length}."
        )
    if not sequences:
        return np.zeros((0, length or 0), dtype=np.int64)
    return np.array(sorted(sequences), dtype=np.int64)


def _sequences_array(sequences: Iterable[Sequence[int]]) -> List[Tuple[int, ...]]:
    unique = sorted({tuple(int(t) for t in s) for s in sequences})
    if len(unique) == 0:
        raise ValueError("At least one sequence is required.")
    lengths = {len(s) for s in unique}
    if len(lengths) != 1:
        raise ValueError(f"Sequences must have equal lengths, got {sorted(lengths)}.")
    if lengths == {0}:
        raise ValueError("Sequences must be non-empty.")
    return unique


def trie_from_sequences(sequences: Iterable[Sequence[int]]) -> TaskGraph:
    """Builds a prefix trie whose root-to-leaf paths are exactly `sequences`.

    One node per distinct prefix, so unlike the (task, position) construction no
    path can recombine two different prefixes.
    """
    graph = TaskGraph()
    nodes = {}
    for sequence in _sequences_array(sequences):
        parent = None
        for i in range(len(sequence)):
            prefix = sequence[: i + 1]
            if prefix not in nodes:
                nodes[prefix] = graph.add_node(sequence[i], i)
                if parent is not None:
                    graph.edges.append((parent, nodes[prefix]))
            parent = nodes[prefix]
    return graph


def positional_graph_from_sequences(sequences: Iterable[Sequence[int]]) -> TaskGraph:
    """One vertex per (task, position) pair seen in `sequences`.

    Paths of the result include every sequence, but can also recombine prefixes
    and suffixes that share a vertex: {(a, x, b), (c, x, d)} gains (a, x, d).
    """
    graph = TaskGraph()
    nodes = {}
    edges = set()
    for sequence in _sequences_array(sequences):
        previous = None
        for i, task in enumerate(sequence):
            if (task, i) not in nodes:
                nodes[(task, i)] = graph.add_node(task, i)
            v = nodes[(task, i)]
            if previous is not None and (previous, v) not in edges:
                edges.add((previous, v))
                graph.edges.append((previous, v))
            previous = v
    return graph


def build_problem(
    config: PriorConfig,
    operations: Iterable[Tuple[str, Sequence[int]]],
    problem_id: str = "",
) -> TSProblem:
    """Applies an explicit stream of expansions until the graph has L levels.

    Args:
        config: prior configuration
        operations: (name, tasks) pairs with name in {'atomic', 'or', 'and'}
        problem_id: identifier of the problem

    Raises:
        ValueError: on an invalid operation or if the stream ends early
    """
    length = config.sequence_length
    graph = TaskGraph()
    for name, tasks in operations:
        if graph.levels() >= length:
            break
        if name == "atomic":
            if len(tasks) != 1:
                raise ValueError(f"atomic expects a single task, got {list(tasks)}.")
            graph = expand_atomic(graph, tasks[0], length)
        elif name == "or":
            graph = expand_or(graph, tasks, length)
        elif name == "and":
            graph = expand_and(graph, tasks, length)
        else:
            raise ValueError(f"Unknown expansion '{name}', expected one of {OPERATIONS}.")
    if graph.levels() != length:
        raise ValueError(
            f"Operation stream ended at {graph.levels()} of {length} levels."
        )
    optimal = enumerate_optimal(graph, length)
    return TSProblem(graph, optimal, config, problem_id)


def draw_operation(
    config: PriorConfig, levels: int, rng: np.random.Generator
) -> Tuple[str, List[int]]:
    """Draws one expansion with equal probability per operation.

    The or/and arity is k = min(k_max, L - levels).
    """
    name = OPERATIONS[int(rng.integers(len(OPERATIONS)))]
    if name == "atomic":
        return name, [int(rng.integers(config.num_tasks))]
    k = min(config.k_max, config.sequence_length - levels)
    tasks = rng.choice(config.num_tasks, size=k, replace=False)
    return name, [int(t) for t in tasks]


def _sample_graph(config: PriorConfig, rng: np.random.Generator) -> TaskGraph:
    graph = TaskGraph()
    while graph.levels() < config.sequence_length:
        name, tasks = draw_operation(config, graph.levels(), rng)
        if name == "atomic":
            graph = expand_atomic(graph, tasks[0], config.sequence_length)
        elif name == "or":
            graph = expand_or(graph, tasks, config.sequence_length)
        else:
            graph = expand_and(graph, tasks, config.sequence_length)
    return graph


def sample_problem(
    config: PriorConfig, rng: np.random.Generator, problem_id: str = ""
) -> TSProblem:
    """Samples a problem from the graph-expansion prior.

    Graphs whose optimal set exceeds `config.optimal_set_cap` are discarded and
    redrawn, at most `config.max_retries` times.

    Raises:
        GenerationError: if every attempt exceeds the cap
    """
    for attempt in range(config.max_retries):
        graph = _sample_graph(config, rng)
        paths = count_paths(graph)
        if paths > config.optimal_set_cap:
            logger.debug(
                f"Rejected graph with {paths} paths (cap {config.optimal_set_cap}), "
                f"attempt {attempt + 1}."
            )
            continue
        optimal = enumerate_optimal(graph, config.sequence_length)
        return TSProblem(graph, optimal, config, problem_id)
    raise GenerationError(
        f"No problem with |S*| <= {config.optimal_set_cap} after {config.max_retries} "
        f"attempts (N={config.num_tasks}, L={config.sequence_length}, "
        f"k_max={config.k_max})."
    )


def problem_seeds(seed: int, count: int, offset: int = 0) -> List[int]:
    """Independent per-problem seeds derived from a global seed."""
    children = np.random.SeedSequence(seed).spawn(offset + count)[offset:]
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
