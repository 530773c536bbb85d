import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tseq import prior
from tseq.prior import (
    GenerationError,
    PriorConfig,
    TaskGraph,
    build_problem,
    count_paths,
    enumerate_optimal,
    expand_and,
    expand_atomic,
    expand_or,
    positional_graph_from_sequences,
    problem_seeds,
    sample_problem,
    trie_from_sequences,
)


def as_set(optimal: np.ndarray) -> set:
    return {tuple(int(t) for t in row) for row in optimal}


def test_prior_config_validation():
    PriorConfig(num_tasks=2, sequence_length=1, k_max=2)
    with pytest.raises(ValueError):
        PriorConfig(num_tasks=1)
    with pytest.raises(ValueError):
        PriorConfig(sequence_length=0)
    with pytest.raises(ValueError):
        PriorConfig(num_tasks=4, k_max=5)
    with pytest.raises(ValueError):
        PriorConfig(k_max=1)
    with pytest.raises(ValueError):
        PriorConfig(optimal_set_cap=0)


def test_expand_atomic():
    graph = expand_atomic(TaskGraph(), 3)
    assert graph.tasks == [3]
    assert graph.roots() == [0]
    graph = expand_atomic(graph, 1)
    assert graph.edges == [(0, 1)]
    assert graph.levels() == 2
    assert as_set(enumerate_optimal(graph)) == {(3, 1)}


def test_expand_or():
    graph = expand_or(expand_atomic(TaskGraph(), 0), [1, 2])
    assert as_set(enumerate_optimal(graph)) == {(0, 1), (0, 2)}
    graph = expand_atomic(graph, 3)
    # the new node joins every leaf
    assert as_set(enumerate_optimal(graph)) == {(0, 1, 3), (0, 2, 3)}
    with pytest.raises(ValueError):
        expand_or(graph, [1, 1])


def test_expand_and():
    graph = expand_and(expand_atomic(TaskGraph(), 0), [1, 2])
    assert graph.levels() == 3
    assert as_set(enumerate_optimal(graph)) == {(0, 1, 2), (0, 2, 1)}
    assert len(graph.leaves()) == 2


def test_expand_does_not_modify_input():
    graph = expand_atomic(TaskGraph(), 0)
    expand_or(graph, [1, 2])
    assert graph.num_nodes == 1


def test_expand_past_length():
    graph = expand_atomic(expand_atomic(TaskGraph(), 0), 1)
    with pytest.raises(ValueError):
        expand_atomic(graph, 2, length=2)
    with pytest.raises(ValueError):
        expand_and(expand_atomic(TaskGraph(), 0), [1, 2], length=2)


def test_build_problem():
    config = PriorConfig(num_tasks=4, sequence_length=3)
    problem = build_problem(config, [("atomic", [0]), ("or", [1, 2]), ("atomic", [3])])
    assert problem.optimal.tolist() == [[0, 1, 3], [0, 2, 3]]
    problem.graph.validate()

    with pytest.raises(ValueError):
        build_problem(config, [("atomic", [0])])
    with pytest.raises(ValueError):
        build_problem(config, [("shuffle", [0])])


def test_graph_validate():
    graph = TaskGraph([0, 1], [(0, 1)], [0, 1])
    graph.validate()
    with pytest.raises(ValueError):
        TaskGraph([0, 1], [(0, 2)], [0, 1]).validate()
    with pytest.raises(ValueError):
        TaskGraph([0, 1], [(0, 1)], [0, 2]).validate()
    with pytest.raises(ValueError):
        TaskGraph([0, 1], [(0, 1), (1, 0)], [0, 1]).validate()


def test_enumerate_optimal_ragged():
    graph = TaskGraph([0, 1, 2], [(0, 1)], [0, 1, 0])
    with pytest.raises(ValueError):
        enumerate_optimal(graph)


def test_sample_problem():
    config = PriorConfig()
    rng = np.random.default_rng(1234)
    for _ in range(50):
        problem = sample_problem(config, rng)
        problem.graph.validate()
        assert problem.optimal.shape[1] == config.sequence_length
        assert 1 <= problem.optimal.shape[0] <= config.optimal_set_cap
        assert np.all(problem.optimal < config.num_tasks)
        assert len(as_set(problem.optimal)) == problem.optimal.shape[0]
        assert problem.optimal.tolist() == sorted(problem.optimal.tolist())
        assert count_paths(problem.graph) >= problem.optimal.shape[0]


def test_sample_problem_reproducible():
    config = PriorConfig(num_tasks=6, sequence_length=5)
    a = sample_problem(config, np.random.default_rng(7))
    b = sample_problem(config, np.random.default_rng(7))
    assert np.all(a.optimal == b.optimal)
    assert a.graph.edges == b.graph.edges


def test_sample_problem_cap(monkeypatch):
    monkeypatch.setattr(prior, "draw_operation", lambda c, levels, rng: ("or", [0, 1]))
    config = PriorConfig(
        num_tasks=2, sequence_length=3, optimal_set_cap=4, max_retries=3
    )
    with pytest.raises(GenerationError):
        sample_problem(config, np.random.default_rng(0))


def test_count_paths():
    graph = expand_or(expand_or(TaskGraph(), [0, 1]), [2, 3, 4])
    assert count_paths(graph) == 6
    assert count_paths(TaskGraph()) == 0


def test_trie_recovers_optimal_set():
    config = PriorConfig(num_tasks=8, sequence_length=8, k_max=2)
    rng = np.random.default_rng(42)
    for _ in range(1000):
        problem = sample_problem(config, rng)
        trie = trie_from_sequences(problem.optimal)
        trie.validate()
        assert np.all(enumerate_optimal(trie) == problem.optimal)


def test_positional_graph_recombines():
    sequences = [(0, 5, 1), (2, 5, 3)]
    trie = as_set(enumerate_optimal(trie_from_sequences(sequences)))
    positional = as_set(enumerate_optimal(positional_graph_from_sequences(sequences)))
    assert trie == set(sequences)
    assert positional == {(0, 5, 1), (0, 5, 3), (2, 5, 1), (2, 5, 3)}


def test_trie_from_sequences_invalid():
    with pytest.raises(ValueError):
        trie_from_sequences([])
    with pytest.raises(ValueError):
        trie_from_sequences([(0, 1), (0, 1, 2)])


def test_problem_seeds():
    assert problem_seeds(0, 4) == problem_seeds(0, 4)
    assert problem_seeds(0, 6)[2:] == problem_seeds(0, 4, offset=2)
    assert len(set(problem_seeds(3, 100))) == 100


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32),
    num_tasks=st.integers(2, 6),
    length=st.integers(1, 6),
)
def test_sampled_paths_are_sequences(seed: int, num_tasks: int, length: int):
    config = PriorConfig(num_tasks=num_tasks, sequence_length=length, k_max=2)
    problem = sample_problem(config, np.random.default_rng(seed))
    assert problem.optimal.shape[1] == length
    assert np.all((problem.optimal >= 0) & (problem.optimal < num_tasks))
    assert problem.graph.levels() == length
