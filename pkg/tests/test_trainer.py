from pathlib import Path

import numpy as np
import pytest

from tseq import io
from tseq import trainer
from tseq.context import build_training_context
from tseq.model import PFTSN, ModelConfig, encode_inputs
from tseq.numerics import Tensor
from tseq.prior import PriorConfig, build_problem, sample_problem
from tseq.trainer import (
    TrainConfig,
    TrainingError,
    batch_loss,
    candidate_targets,
    learning_rate,
    loss_curve,
    loss_min_over_optimal,
    meta_train,
    nll_of_target,
    sample_step,
)

PRIOR = PriorConfig(num_tasks=4, sequence_length=4)
TINY = ModelConfig(
    num_tasks=4, seq_len=4, d_emb=8, num_blocks=1, num_heads=2, hidden=16, dropout=0.0
)


def tiny_train(**kwargs) -> TrainConfig:
    values = dict(
        steps=2,
        batch_size=2,
        warmup_steps=1,
        context_min=4,
        context_max=6,
        max_candidates=4,
        checkpoint_every=1000,
        log_every=1,
    )
    values.update(kwargs)
    return TrainConfig(**values)


def test_train_config():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(context_min=8, context_max=4)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def test_learning_rate_warmup():
    config = TrainConfig(lr=1e-3, warmup_steps=500)
    assert learning_rate(1, config) == 1e-3 / 500
    assert learning_rate(250, config) == 1e-3 * 250 / 500
    assert learning_rate(500, config) == 1e-3
    assert learning_rate(501, config) == 1e-3
    assert learning_rate(1, TrainConfig(warmup_steps=0)) == 1e-3


def test_uniform_nll_baseline():
    model = PFTSN(TINY, np.random.default_rng(0))
    model.params["head.w2"].data[...] = 0.0
    model.params["head.b2"].data[...] = 0.0
    problem = sample_problem(PRIOR, np.random.default_rng(0))
    context = build_training_context(problem, np.random.default_rng(1), 4, 8)
    nll = nll_of_target(model, context, problem.optimal[0]).item()
    assert abs(nll - 4 * np.log(4)) < 1e-9


def test_nll_is_non_negative():
    model = PFTSN(TINY, np.random.default_rng(1))
    rng = np.random.default_rng(1)
    for _ in range(10):
        problem = sample_problem(PRIOR, rng)
        context = build_training_context(problem, rng, 4, 8)
        assert nll_of_target(model, context, problem.optimal[0]).item() >= 0.0


def test_candidate_targets():
    optimal = np.arange(40).reshape(10, 4) % 4
    rng = np.random.default_rng(0)
    assert candidate_targets(optimal[:3], 8, rng).shape == (3, 4)
    chosen = candidate_targets(optimal, 8, rng)
    assert chosen.shape == (8, 4)
    with pytest.raises(ValueError):
        candidate_targets(np.zeros((0, 4), dtype=int), 8, rng)


def test_loss_is_min_over_candidates():
    model = PFTSN(TINY, np.random.default_rng(2))
    problem = build_problem(
        PRIOR, [("atomic", [0]), ("or", [1, 2]), ("atomic", [3]), ("atomic", [1])]
    )
    context = build_training_context(problem, np.random.default_rng(2), 4, 8)
    a = nll_of_target(model, context, problem.optimal[0]).item()
    b = nll_of_target(model, context, problem.optimal[1]).item()
    loss = loss_min_over_optimal(model, context, problem.optimal)
    assert np.isclose(loss.item(), min(a, b))


def test_batch_loss_gradient_flows_through_minimum():
    model = PFTSN(TINY, np.random.default_rng(3))
    problem = sample_problem(PRIOR, np.random.default_rng(3))
    context = build_training_context(problem, np.random.default_rng(3), 4, 4)
    inputs = encode_inputs([context, context], 4)
    candidates = [problem.optimal[:1], problem.optimal[:1]]
    loss = batch_loss(model, inputs, candidates)
    single = nll_of_target(model, context, problem.optimal[0]).item()
    assert np.isclose(loss.item(), single)
    with pytest.raises(ValueError):
        batch_loss(model, inputs, candidates[:1])


def test_sample_step_is_pure():
    config = tiny_train(seed=5)
    a_inputs, a_candidates = sample_step(PRIOR, config, 3)
    b_inputs, b_candidates = sample_step(PRIOR, config, 3)
    assert np.array_equal(a_inputs, b_inputs)
    assert all(np.array_equal(a, b) for a, b in zip(a_candidates, b_candidates))
    assert a_inputs.shape[0] == 2 and 4 <= a_inputs.shape[1] <= 6
    c_inputs, _ = sample_step(PRIOR, config, 4)
    assert not (c_inputs.shape == a_inputs.shape and np.array_equal(c_inputs, a_inputs))


def test_zero_learning_rate_keeps_parameters():
    model = PFTSN(TINY, np.random.default_rng(4))
    before = model.state_dict()
    meta_train(PRIOR, tiny_train(lr=0.0, weight_decay=0.0), model=model)
    after = model.state_dict()
    assert all(np.array_equal(before[name], after[name]) for name in before)


def test_training_changes_parameters():
    result = meta_train(PRIOR, tiny_train(lr=1e-2), TINY)
    fresh = PFTSN(TINY, np.random.default_rng(0))
    changed = [
        name
        for name, p in result.model.params.items()
        if not np.array_equal(p.data, fresh.params[name].data)
    ]
    assert len(changed) > 0
    assert [r["step"] for r in result.log] == [1, 2]
    assert all(np.isfinite(r["loss"]) for r in result.log)


def test_training_outputs(tmp_path: Path):
    meta_train(PRIOR, tiny_train(steps=1), TINY, tmp_path)
    assert tmp_path.joinpath("model.ckpt").exists()
    assert [p.name for p in tmp_path.joinpath("checkpoints").iterdir()] == [
        "step_000001.ckpt"
    ]
    header, records = io.read_train_log(tmp_path.joinpath("train_log.jsonl"))
    assert header["kind"] == "tseq-train-log"
    assert header["train"]["steps"] == 1
    assert len(records) == 1 and records[0]["step"] == 1
    assert tmp_path.joinpath("loss_curve.csv").read_text().splitlines()[0] == (
        "step,mean_loss,std_loss"
    )


def test_checkpoint_cadence(tmp_path: Path):
    meta_train(PRIOR, tiny_train(steps=5, checkpoint_every=2), TINY, tmp_path)
    names = sorted(p.name for p in tmp_path.joinpath("checkpoints").iterdir())
    assert names == ["step_000002.ckpt", "step_000004.ckpt", "step_000005.ckpt"]


def test_training_is_deterministic(tmp_path: Path):
    a, b = tmp_path.joinpath("a"), tmp_path.joinpath("b")
    config = tiny_train(seed=3)
    meta_train(PRIOR, config, TINY, a)
    meta_train(PRIOR, config, TINY, b)
    assert a.joinpath("model.ckpt").read_bytes() == b.joinpath("model.ckpt").read_bytes()
    _, log_a = io.read_train_log(a.joinpath("train_log.jsonl"))
    _, log_b = io.read_train_log(b.joinpath("train_log.jsonl"))
    assert [(r["loss"], r["lr"]) for r in log_a] == [(r["loss"], r["lr"]) for r in log_b]


def test_training_on_problem_list():
    rng = np.random.default_rng(6)
    problems = [sample_problem(PRIOR, rng) for _ in range(3)]
    result = meta_train(PRIOR, tiny_train(), TINY, problems=problems)
    assert len(result.log) == 2
    with pytest.raises(ValueError):
        meta_train(PRIOR, tiny_train(), TINY, problems=[])


def test_model_must_match_prior():
    with pytest.raises(ValueError):
        meta_train(PriorConfig(num_tasks=5, sequence_length=4), tiny_train(), TINY)


def test_non_finite_losses_abort(monkeypatch):
    def nan_loss(model, inputs, candidates):
        return Tensor(np.nan)

    monkeypatch.setattr(trainer, "batch_loss", nan_loss)
    with pytest.raises(TrainingError):
        meta_train(PRIOR, tiny_train(steps=4), TINY)

    # within the allowed fraction the step is skipped
    result = meta_train(PRIOR, tiny_train(steps=4, max_skip_fraction=1.0), TINY)
    assert result.skipped_steps == 4
    assert all(r["loss"] is None for r in result.log)


def test_loss_curve():
    log = [
        {"step": 1, "loss": 4.0},
        {"step": 2, "loss": None},
        {"step": 3, "loss": 2.0},
        {"step": 4, "loss": 3.0},
        {"step": 5, "loss": 1.0},
    ]
    steps, mean, std = loss_curve(log, 2)
    assert np.all(steps == [3, 4, 5])
    assert np.all(np.isclose(mean, [3.0, 2.5, 2.0]))
    assert np.all(np.isclose(std, [1.0, 0.5, 1.0]))

    # window shrinks to the number of applied losses
    steps, mean, std = loss_curve(log, 10)
    assert np.all(steps == [5]) and np.isclose(mean[0], 2.5)
    assert np.isclose(std[0], np.std([4.0, 2.0, 3.0, 1.0]))

    steps, mean, _ = loss_curve([{"step": 1, "loss": None}], 4)
    assert steps.size == 0 and mean.size == 0


def test_loss_curve_is_exported(tmp_path: Path):
    result = meta_train(PRIOR, tiny_train(steps=3, log_every=2), TINY, tmp_path)
    lines = tmp_path.joinpath("loss_curve.csv").read_text().splitlines()
    assert len(lines) == 3
    losses = [r["loss"] for r in result.log]
    step, mean, std = (float(v) for v in lines[-1].split(","))
    assert step == 3
    assert np.isclose(mean, np.mean(losses[1:]))
    assert np.isclose(std, np.std(losses[1:]))
