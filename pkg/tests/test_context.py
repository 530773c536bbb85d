import numpy as np
import pytest
from hypothesis import given, strategies as st

from tseq.context import (
    LabeledSequence,
    build_training_context,
    initial_context,
    mix_context,
    mutate,
    sample_random,
)
from tseq.prior import PriorConfig, build_problem, sample_problem
from tseq.utility import utility_vector


def small_problem():
    config = PriorConfig(num_tasks=4, sequence_length=3)
    return build_problem(config, [("atomic", [0]), ("or", [1, 2]), ("atomic", [3])])


def test_sample_random():
    rng = np.random.default_rng(0)
    assert sample_random(0, 8, 8, rng).shape == (0, 8)
    taus = sample_random(16, 8, 8, rng)
    assert taus.shape == (16, 8)
    assert np.all((taus >= 0) & (taus < 8))
    assert np.all(sample_random(5, 1, 4, rng) == 0)
    with pytest.raises(ValueError):
        sample_random(-1, 8, 8, rng)


def test_labeled_sequence():
    s = LabeledSequence([0, 1], [0.5, 0.25], "mutated")
    assert s.score == 0.75
    with pytest.raises(ValueError):
        LabeledSequence([0, 1], [0.5], "random")
    with pytest.raises(ValueError):
        LabeledSequence([0, 1], [0.5, 0.5], "guessed")


def test_mix_context():
    assert mix_context(4, 4, 16) == (4, 0)
    assert mix_context(16, 4, 16) == (0, 16)
    assert mix_context(10, 4, 16) == (5, 5)
    with pytest.raises(ValueError):
        mix_context(4, 4, 4)
    with pytest.raises(ValueError):
        mix_context(17, 4, 16)


@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 64))
def test_mix_context_sums(cmin: int, span: int, offset: int):
    cmax = cmin + span
    size = cmin + offset % (span + 1)
    n_random, n_mutated = mix_context(size, cmin, cmax)
    assert n_random + n_mutated == size
    assert 0 <= n_mutated <= size


def test_mutated_count_grows_with_size():
    mutated = np.array([mix_context(c, 4, 16)[1] for c in range(4, 17)])
    assert np.all(np.diff(mutated) >= 0)
    assert mutated[0] == 0 and mutated[-1] == 16

    # the floor makes single steps uneven, but the share rises across the range
    fractions = mutated / np.arange(4, 17)
    assert np.mean(fractions[:4]) < np.mean(fractions[4:8]) < np.mean(fractions[8:])


def test_mutate_keeps_prefix():
    optimal = np.array([[0, 1, 2, 3, 4, 5, 6, 7]])
    rng = np.random.default_rng(2)
    for _ in range(100):
        tau, flagged = mutate(optimal, rng, num_tasks=8, keep=4)
        assert not flagged
        assert np.all(tau[:4] == optimal[0, :4])
        assert tau.tolist() != optimal[0].tolist()
        assert np.all(utility_vector(tau, optimal)[:4] == 1.0)


def test_mutate_random_cut():
    optimal = np.array([[0, 1, 2, 3, 4, 5, 6, 7]])
    rng = np.random.default_rng(3)
    for _ in range(100):
        tau, _ = mutate(optimal, rng, num_tasks=8)
        # at least floor(L / 2) tasks are preserved
        assert np.all(tau[:4] == optimal[0, :4])


def test_mutate_single_suffix():
    optimal = np.array([[2, 1]])
    rng = np.random.default_rng(4)
    for _ in range(20):
        tau, flagged = mutate(optimal, rng, num_tasks=4, keep=1)
        assert not flagged
        assert tau[0] == 2 and tau[1] != 1


def test_mutate_flags_when_always_optimal():
    optimal = np.array([[0], [1]])
    tau, flagged = mutate(optimal, np.random.default_rng(0), num_tasks=2)
    assert flagged
    with pytest.raises(ValueError):
        mutate(np.zeros((0, 2), dtype=int), np.random.default_rng(0))


def test_build_training_context():
    config = PriorConfig()
    rng = np.random.default_rng(6)
    for _ in range(20):
        problem = sample_problem(config, rng)
        batch = build_training_context(problem, rng, 4, 16)
        assert 4 <= batch.size <= 16
        assert batch.tasks().shape == (batch.size, 8)
        assert np.all(np.sum(batch.utilities(), axis=1) < 8.0)
        n_random, n_mutated = mix_context(batch.size, 4, 16)
        assert sum(s.source == "mutated" for s in batch.sequences) <= n_mutated
        for s in batch.sequences:
            assert np.array_equal(s.utility, utility_vector(s.tasks, problem.optimal))


def test_build_training_context_fixed_size():
    problem = sample_problem(PriorConfig(), np.random.default_rng(8))
    batch = build_training_context(problem, np.random.default_rng(9), 4, 4)
    assert batch.size == 4
    assert all(s.source == "random" for s in batch.sequences)
    batch = build_training_context(problem, np.random.default_rng(9), 4, 16, size=10)
    assert batch.size == 10


def test_build_training_context_excludes_optimal():
    # half of all sequences are optimal here
    config = PriorConfig(num_tasks=2, sequence_length=1)
    problem = build_problem(config, [("atomic", [1])])
    rng = np.random.default_rng(10)
    for _ in range(20):
        batch = build_training_context(problem, rng, 4, 8)
        assert np.all(batch.tasks() == 0)


def test_build_training_context_reproducible():
    problem = small_problem()
    a = build_training_context(problem, np.random.default_rng(1), 4, 16)
    b = build_training_context(problem, np.random.default_rng(1), 4, 16)
    assert np.array_equal(a.tasks(), b.tasks())
    assert np.array_equal(a.utilities(), b.utilities())


def test_initial_context():
    problem = small_problem()
    context = initial_context(problem, 4, np.random.default_rng(0))
    assert len(context) == 4
    assert all(s.source == "random" for s in context)
    assert initial_context(problem, 0, np.random.default_rng(0)) == []
