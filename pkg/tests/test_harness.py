import numpy as np
import pytest

from tseq.baselines import RandomStrategy, Strategy
from tseq.context import LabeledSequence
from tseq.harness import (
    EvalConfig,
    Trace,
    TraceStep,
    aggregate_ranks,
    break_even,
    break_even_table,
    checkpoint_iterations,
    curve_export,
    evaluate_suite,
    final_sign_tests,
    iterations_to_optimum,
    make_strategy,
    run_protocol,
    timing_summary,
)
from tseq.model import PFTSN, ModelConfig, PFTSNStrategy
from tseq.prior import PriorConfig, build_problem, sample_problem

CONFIG = PriorConfig(num_tasks=4, sequence_length=3)
PROBLEM = build_problem(CONFIG, [("atomic", [2]), ("or", [1, 3]), ("atomic", [0])])


class ReplayStrategy(Strategy):
    name = "replay"

    def __init__(self, sequence):
        self.sequence = np.asarray(sequence)

    def propose(self, rng):
        return self.sequence

    def observe(self, sequence, utility, source="proposed"):
        pass


class FailingStrategy(RandomStrategy):
    name = "failing"

    def __init__(self, fail_at: int):
        super().__init__(4, 3)
        self.calls = 0
        self.fail_at = fail_at

    def propose(self, rng):
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("proposal failed")
        return super().propose(rng)


def make_trace(method: str, problem_id: str, curve, length: int = 8) -> Trace:
    """A trace whose best Ū after iteration i is curve[i]."""
    initial = [LabeledSequence(np.zeros(length, dtype=int), np.full(length, curve[0] / length), "random")]
    steps = [
        TraceStep(np.zeros(length, dtype=int), np.full(length, b / length), b, b, 0.01)
        for b in curve[1:]
    ]
    return Trace(problem_id, method, length, initial, steps)


def test_eval_config():
    with pytest.raises(ValueError):
        EvalConfig(methods=("random", "bayes"))
    with pytest.raises(ValueError):
        EvalConfig(iterations=0)


def test_replaying_optimum():
    trace = run_protocol(
        PROBLEM, ReplayStrategy([2, 1, 0]), 5, 4, np.random.default_rng(0)
    )
    assert len(trace.initial) == 4
    assert np.all(trace.best_curve()[1:] == 3.0)
    assert iterations_to_optimum(trace) in (0, 1)


def test_best_so_far_is_monotone():
    problem = sample_problem(PriorConfig(), np.random.default_rng(0))
    trace = run_protocol(
        problem, RandomStrategy(8, 8), 32, 4, np.random.default_rng(0)
    )
    curve = trace.best_curve()
    assert curve.size == 33
    assert np.all(np.diff(curve) >= 0.0)
    assert all(s.proposal_seconds >= 0.0 for s in trace.steps)
    assert all(np.isclose(s.score, np.sum(s.utility)) for s in trace.steps)


def test_failing_strategy_gives_partial_trace():
    trace = run_protocol(PROBLEM, FailingStrategy(4), 10, 2, np.random.default_rng(0))
    assert trace.partial
    assert trace.error == "proposal failed"
    assert len(trace.steps) == 3
    curve = trace.best_curve(10)
    assert curve.size == 11 and np.all(curve[3:] == curve[3])


def test_initial_context_keeps_its_source():
    model = PFTSN(
        ModelConfig(num_tasks=4, seq_len=3, d_emb=8, num_blocks=1, num_heads=2, hidden=16),
        np.random.default_rng(0),
    )
    strategy = PFTSNStrategy(model)
    trace = run_protocol(PROBLEM, strategy, 3, 2, np.random.default_rng(4))
    assert not trace.partial
    assert [s.source for s in strategy.observed] == ["random"] * 2 + ["proposed"] * 3


def test_invalid_proposals_are_caught():
    trace = run_protocol(PROBLEM, ReplayStrategy([2, 1]), 3, 0, np.random.default_rng(0))
    assert trace.partial
    trace = run_protocol(PROBLEM, ReplayStrategy([2, 1, 7]), 3, 0, np.random.default_rng(0))
    assert trace.partial


def test_aggregate_ranks():
    traces = {
        "A": [make_trace("A", "p0", [0, 8, 8, 8, 8]), make_trace("A", "p1", [0, 5, 5, 5, 5])],
        "B": [make_trace("B", "p0", [0, 6, 6, 6, 6]), make_trace("B", "p1", [0, 7, 7, 7, 7])],
        "C": [make_trace("C", "p0", [0, 6, 6, 6, 6]), make_trace("C", "p1", [0, 6, 6, 6, 6])],
    }
    table = aggregate_ranks(traces)
    assert table.checkpoints == [1, 2, 4]
    means = table.mean_ranks(4)
    assert np.isclose(means["A"], 2.0)
    assert np.isclose(means["B"], 1.75)
    assert np.isclose(means["C"], 2.25)
    for c in table.checkpoints:
        assert np.all(np.isclose(np.sum(table.ranks[c], axis=1), 6.0))


def test_aggregate_ranks_extremes():
    dominant = {
        "A": [make_trace("A", f"p{i}", [0, 8, 8]) for i in range(3)],
        "B": [make_trace("B", f"p{i}", [0, 4, 4]) for i in range(3)],
    }
    assert aggregate_ranks(dominant).mean_ranks(2) == {"A": 1.0, "B": 2.0}
    identical = {
        "A": [make_trace("A", "p0", [0, 4, 4])],
        "B": [make_trace("B", "p0", [0, 4, 4])],
    }
    assert aggregate_ranks(identical).mean_ranks(2) == {"A": 1.5, "B": 1.5}


def test_mismatched_suites_raise():
    traces = {
        "A": [make_trace("A", "p0", [0, 4])],
        "B": [make_trace("B", "p1", [0, 4])],
    }
    with pytest.raises(ValueError):
        aggregate_ranks(traces)
    traces = {
        "A": [make_trace("A", "p0", [0, 4])],
        "B": [make_trace("B", "p0", [0, 4, 5])],
    }
    with pytest.raises(ValueError):
        aggregate_ranks(traces)


def test_checkpoint_iterations():
    assert checkpoint_iterations(32) == [8, 16, 32]
    assert checkpoint_iterations(4) == [1, 2, 4]


def test_curve_export():
    traces = {
        "A": [make_trace("A", "p0", [2, 4, 6]), make_trace("A", "p1", [4, 4, 8])],
    }
    mean, std = curve_export(traces)["A"]
    assert np.all(np.isclose(mean, [3.0, 4.0, 7.0]))
    assert np.all(np.isclose(std, [1.0, 0.0, 1.0]))


def test_iterations_to_optimum():
    assert iterations_to_optimum(make_trace("A", "p0", [0, 3, 8, 8])) == 2
    assert iterations_to_optimum(make_trace("A", "p0", [8, 8])) == 0
    assert iterations_to_optimum(make_trace("A", "p0", [0, 3, 7])) is None


def test_break_even():
    assert np.isclose(break_even(6, 1.5, 12, 0.14), 0.2267, atol=1e-4)
    assert break_even(10, 0.0, 20, 0.0) == 0.0
    assert np.isclose(break_even(10, 5.0, 20, 9.0), -0.4)
    assert np.isclose(break_even(20, 9.0, 10, 5.0), -0.4)
    assert np.isclose(break_even(10, 9.0, 20, 5.0), 0.4)
    with pytest.raises(ValueError):
        break_even(10, 1.0, 10, 2.0)


def test_timing_summary():
    traces = {
        "A": [make_trace("A", "p0", [0, 8, 8, 8]), make_trace("A", "p1", [0, 3, 3, 3])],
        "B": [make_trace("B", "p0", [0, 3, 8, 8]), make_trace("B", "p1", [0, 3, 8, 8])],
    }
    summary = timing_summary(traces)
    assert summary["A"]["solved"] == 1
    assert summary["A"]["median_iterations_to_optimum"] == 2.0
    assert summary["B"]["median_iterations_to_optimum"] == 2.0
    assert np.isclose(summary["A"]["mean_proposal_seconds"], 0.01)
    rows = break_even_table(summary)
    assert rows == [{"method_a": "A", "method_b": "B", "break_even_seconds": None}]


def test_final_sign_tests():
    traces = {
        "A": [make_trace("A", f"p{i}", [0, 8]) for i in range(6)],
        "B": [make_trace("B", f"p{i}", [0, 4]) for i in range(6)],
    }
    (row,) = final_sign_tests(traces)
    assert row["wins"] == 6 and row["losses"] == 0
    assert np.isclose(row["p_value"], 2 * 0.5**6)


def test_make_strategy():
    rng = np.random.default_rng(0)
    assert make_strategy("random", 4, 3, rng).name == "random"
    assert make_strategy("rule", 4, 3, rng).name == "rule"
    assert make_strategy("ddqn", 4, 3, rng).name == "ddqn"
    with pytest.raises(ValueError):
        make_strategy("pftsn", 4, 3, rng)
    with pytest.raises(ValueError):
        make_strategy("bayes", 4, 3, rng)


def test_evaluate_suite_is_deterministic():
    rng = np.random.default_rng(3)
    problems = [sample_problem(CONFIG, rng) for _ in range(4)]
    config = EvalConfig(iterations=6, init_context=2)
    for method in ("random", "rule"):
        a = evaluate_suite(problems, method, config)
        b = evaluate_suite(problems, method, config)
        assert [t.problem_id for t in a] == [p.problem_id for p in problems]
        for x, y in zip(a, b):
            assert np.array_equal(x.best_curve(), y.best_curve())
            assert [s.sequence.tolist() for s in x.steps] == [
                s.sequence.tolist() for s in y.steps
            ]
