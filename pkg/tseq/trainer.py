"""Meta-training over a stream of sampled sequencing problems.

Each step samples B fresh problems, builds one context per problem with a shared
size C and minimises the negative log-likelihood of the closest optimal
sequence among up to M teacher-forced candidates.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import logging
from pathlib import Path
import time

import numpy as np

from tseq import io
from tseq import numerics as nm
from tseq.calc import moving_mean, moving_std
from tseq.context import ContextBatch, build_training_context
from tseq.model import PFTSN, ModelConfig, encode_inputs
from tseq.numerics import AdamW, Tensor
from tseq.prior import PriorConfig, TSProblem, sample_problem

from typing import Dict, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

SCHEDULE = "adamw, linear warmup then constant learning rate"
SCHEDULE_NOTE = "replaces the schedule-free optimiser"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 1024
    lr: float = 1e-3
    warmup_steps: int = 500
    weight_decay: float = 1e-3
    context_min: int = 4
    context_max: int = 16
    max_candidates: int = 8
    seed: int = 0
    checkpoint_every: int = 1000
    workers: int = 1
    log_every: int = 100
    max_skip_fraction: float = 0.01

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}.")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}.")
        if self.lr < 0.0 or self.weight_decay < 0.0:
            raise ValueError("lr and weight_decay must be >= 0.")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}.")
        if not 1 <= self.context_min <= self.context_max:
            raise ValueError(
                f"Need 1 <= context_min ({self.context_min}) <= context_max "
                f"({self.context_max})."
            )
        if self.max_candidates < 1:
            raise ValueError(f"max_candidates must be >= 1, got {self.max_candidates}.")
        if self.checkpoint_every < 1:
            raise ValueError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}."
            )
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}.")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}.")


@dataclass
class TrainResult:
    model: PFTSN
    log: List[Dict] = field(default_factory=list)
    skipped_steps: int = 0


def loss_curve(
    log: List[Dict], window: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rolling mean and standard deviation of the applied (finite) losses.

    Args:
        log: per-step train log records
        window: steps per window, shortened if fewer losses were applied

    Returns:
        step closing each window, rolling mean, rolling std
    """
    applied = [r for r in log if r["loss"] is not None]
    steps = np.array([r["step"] for r in applied], dtype=int)
    losses = np.array([r["loss"] for r in applied], dtype=np.float64)
    if losses.size == 0:
        return steps, losses, losses
    n = min(window, losses.size)
    return steps[n - 1 :], moving_mean(losses, n), moving_std(losses, n)


def learning_rate(step: int, config: TrainConfig) -> float:
    """η·s/warmup for s <= warmup, η afterwards. Steps count from 1."""
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    return config.lr


def _as_inputs(
    model: PFTSN, context: Union[ContextBatch, Sequence, np.ndarray]
) -> np.ndarray:
    if isinstance(context, np.ndarray):
        return context if context.ndim == 4 else context[None]
    return encode_inputs([context], model.config.num_tasks)


def nll_of_target(
    model: PFTSN, context: Union[ContextBatch, np.ndarray], target: np.ndarray
) -> Tensor:
    """-log π(τ | context), teacher forced and summed over the L positions."""
    target = np.asarray(target, dtype=np.int64)[None, :]
    x_att = model.encode_context(_as_inputs(model, context))
    t_att = model.encode_target(model.teacher_prefix(target))
    return nm.sum(nm.cross_entropy(model.predict_logits(t_att, x_att), target))


def candidate_targets(
    optimal: np.ndarray, max_candidates: int, rng: np.random.Generator
) -> np.ndarray:
    """All of S* if it holds at most M sequences, else M drawn without replacement."""
    optimal = np.atleast_2d(optimal)
    if optimal.shape[0] == 0:
        raise ValueError("The optimal set is empty.")
    if optimal.shape[0] <= max_candidates:
        return optimal
    idx = np.sort(rng.choice(optimal.shape[0], size=max_candidates, replace=False))
    return optimal[idx]


def batch_loss(
    model: PFTSN, inputs: np.ndarray, candidates: Sequence[np.ndarray]
) -> Tensor:
    """Mean over the batch of the smallest candidate NLL.

    Contexts are encoded once and shared by their candidates. Gradients flow only
    through the minimising candidate, ties going to the lowest index.

    Args:
        model: network
        inputs: encoded contexts (B, C, L, 3)
        candidates: per batch element, optimal targets (m_b, L)
    """
    if inputs.shape[0] != len(candidates):
        raise ValueError(
            f"{inputs.shape[0]} contexts but {len(candidates)} candidate sets."
        )
    counts = [c.shape[0] for c in candidates]
    owners = np.repeat(np.arange(len(candidates)), counts)
    targets = np.concatenate(candidates, axis=0).astype(np.int64)

    x_att = nm.index(model.encode_context(inputs), owners)
    t_att = model.encode_target(model.teacher_prefix(targets))
    logits = model.predict_logits(t_att, x_att)
    nll = nm.sum(nm.cross_entropy(logits, targets), axis=1)

    values = np.where(np.isfinite(nll.data), nll.data, np.inf)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    chosen = np.array(
        [o + int(np.argmin(values[o : o + n])) for o, n in zip(offsets, counts)]
    )
    return nm.mean(nm.index(nll, chosen))


def loss_min_over_optimal(
    model: PFTSN,
    context: Union[ContextBatch, np.ndarray],
    optimal: np.ndarray,
    max_candidates: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """min over candidate optimal sequences of nll_of_target."""
    rng = rng if rng is not None else np.random.default_rng(0)
    candidates = candidate_targets(optimal, max_candidates, rng)
    return batch_loss(model, _as_inputs(model, context), [candidates])


def _sample_element(
    args: Tuple[PriorConfig, Optional[TSProblem], int, int, int, int, int]
) -> Tuple[np.ndarray, np.ndarray]:
    prior, problem, seed, size, context_min, context_max, max_candidates = args
    rng = np.random.default_rng(seed)
    if problem is None:
        problem = sample_problem(prior, rng)
    context = build_training_context(problem, rng, context_min, context_max, size)
    inputs = encode_inputs([context], prior.num_tasks)[0]
    return inputs, candidate_targets(problem.optimal, max_candidates, rng)


def sample_step(
    prior: PriorConfig,
    config: TrainConfig,
    step: int,
    problems: Optional[Sequence[TSProblem]] = None,
    executor: Optional[ProcessPoolExecutor] = None,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Contexts and candidate targets of one step, a pure function of (seed, step).

    Args:
        prior: problem prior
        config: training configuration
        step: step number
        problems: draw from these instead of sampling fresh problems
        executor: optional process pool

    Returns:
        inputs (B, C, L, 3), candidates per batch element
    """
    rng = np.random.default_rng([config.seed, step])
    size = int(rng.integers(config.context_min, config.context_max + 1))
    seeds = rng.integers(2**63, size=config.batch_size)
    if problems is not None:
        chosen = rng.integers(len(problems), size=config.batch_size)
        picked = [problems[i] for i in chosen]
    else:
        picked = [None] * config.batch_size
    jobs = [
        (
            prior,
            problem,
            int(s),
            size,
            config.context_min,
            config.context_max,
            config.max_candidates,
        )
        for problem, s in zip(picked, seeds)
    ]
    if executor is not None:
        elements = list(executor.map(_sample_element, jobs))
    else:
        elements = [_sample_element(job) for job in jobs]
    inputs = np.stack([e[0] for e in elements])
    return inputs, [e[1] for e in elements]


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir.joinpath("checkpoints", f"step_{step:06d}.ckpt")


def meta_train(
    prior: PriorConfig,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    out_dir: Optional[Path] = None,
    problems: Optional[Sequence[TSProblem]] = None,
    model: Optional[PFTSN] = None,
) -> TrainResult:
    """Trains a network on problems from `prior` or from a fixed problem list.

    Args:
        prior: problem prior, fixes N and L
        config: training configuration
        model_config: architecture, default sizes with N and L from the prior
        out_dir: if given, receives train_log.jsonl, checkpoints/ and model.ckpt
        problems: train on these instead of fresh samples
        model: continue from this model

    Returns:
        trained model and per-step log records

    Raises:
        TrainingError: if more than `max_skip_fraction` of steps are skipped
    """
    if model is None:
        if model_config is None:
            model_config = ModelConfig(
                num_tasks=prior.num_tasks, seq_len=prior.sequence_length
            )
        model = PFTSN(model_config, np.random.default_rng(config.seed))
    if (model.config.num_tasks, model.config.seq_len) != (
        prior.num_tasks,
        prior.sequence_length,
    ):
        raise ValueError(
            f"Model (N={model.config.num_tasks}, L={model.config.seq_len}) does not "
            f"match prior (N={prior.num_tasks}, L={prior.sequence_length})."
        )
    if problems is not None and len(problems) == 0:
        raise ValueError("The training problem list is empty.")

    optimizer = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult(model)
    log_writer = None
    if out_dir is not None:
        out_dir.joinpath("checkpoints").mkdir(parents=True, exist_ok=True)
        log_writer = io.TrainLogWriter(
            out_dir.joinpath("train_log.jsonl"),
            {
                "schedule": SCHEDULE,
                "note": SCHEDULE_NOTE,
                "prior": asdict(prior),
                "model": model.config.to_dict(),
                "train": asdict(config),
            },
        )

    executor = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    losses: List[float] = []
    start = time.perf_counter()
    try:
        for step in range(1, config.steps + 1):
            lr = learning_rate(step, config)
            inputs, candidates = sample_step(prior, config, step, problems, executor)

            model.train(np.random.default_rng([config.seed, step, 1]))
            optimizer.zero_grad()
            loss = batch_loss(model, inputs, candidates)
            value = loss.item()
            applied = np.isfinite(value)
            if applied:
                nm.backward(loss)
                applied = optimizer.step(lr)
            model.eval()

            if not applied:
                result.skipped_steps += 1
                logger.warning(f"Step {step}: non-finite loss or gradient, skipped.")
                if result.skipped_steps > config.max_skip_fraction * config.steps:
                    raise TrainingError(
                        f"{result.skipped_steps} of {step} steps skipped, exceeding "
                        f"{config.max_skip_fraction:.0%} of {config.steps}."
                    )
            else:
                losses.append(value)

            record = {
                "step": step,
                "loss": value if applied else None,
                "lr": lr,
                "seconds": time.perf_counter() - start,
            }
            result.log.append(record)
            if log_writer is not None:
                log_writer.write(record)

            if step % config.log_every == 0 and len(losses) > 0:
                smoothed = np.mean(losses[-config.log_every :])
                logger.info(f"Step {step}/{config.steps}, loss {smoothed:.4f}, lr {lr:.2e}.")

            if out_dir is not None and (
                step % config.checkpoint_every == 0 or step == config.steps
            ):
                io.save_checkpoint(model, _checkpoint_path(out_dir, step))
    finally:
        if executor is not None:
            executor.shutdown()
        if log_writer is not None:
            log_writer.close()

    if out_dir is not None:
        io.save_checkpoint(model, out_dir.joinpath("model.ckpt"))
        steps, mean, std = loss_curve(result.log, config.log_every)
        io.export_table(
            out_dir.joinpath("loss_curve.csv"),
            ["step", "mean_loss", "std_loss"],
            zip(steps, mean, std),
        )
    logger.info(
        f"Trained {config.steps} steps in {time.perf_counter() - start:.1f} s, "
        f"{result.skipped_steps} skipped."
    )
    return result
