"""Datasets, checkpoints, traces and tables on disk.

Datasets and traces are line-delimited JSON, checkpoints are binary. Every file
is written to a temporary sibling and renamed, so failures leave no partial file.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from tseq import __version__
from tseq.context import (
    LabeledSequence,
    initial_context,
    label_sequences,
    mutated_sequences,
)
from tseq.harness import Trace, TraceStep
from tseq.model import PFTSN, TASK_CHANNEL, ModelConfig
from tseq.prior import (
    PriorConfig,
    TaskGraph,
    TSProblem,
    enumerate_optimal,
    problem_seeds,
    sample_problem,
)
from tseq.utility import utility_matrix

from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"TSEQCKPT"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _dumps(obj: Dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _temporary(path: Path) -> Path:
    return path.with_name(f".{path.name}.tmp")


def write_atomic(path: Path, data: Union[str, bytes]) -> None:
    """Writes `data` to a temporary sibling of `path`, then renames it."""
    tmp = _temporary(path)
    try:
        if isinstance(data, bytes):
            tmp.write_bytes(data)
        else:
            with tmp.open("w", encoding="utf-8", newline="\n") as fp:
                fp.write(data)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def round_utility(u: np.ndarray) -> List[float]:
    """Utilities at 9 significant digits, as stored in datasets."""
    return [float(f"{x:.9g}") for x in np.asarray(u, dtype=np.float64)]


def _sequence_record(s: LabeledSequence) -> Dict:
    return {"tasks": [int(t) for t in s.tasks], "utility": round_utility(s.utility)}


@dataclass
class DatasetProblem:
    problem: TSProblem
    seed: int
    context_random: List[LabeledSequence] = field(default_factory=list)
    context_mutated: List[LabeledSequence] = field(default_factory=list)


@dataclass
class Dataset:
    config: PriorConfig
    seed: int
    split: str
    random_per_problem: int
    mutated_per_problem: int
    problems: List[DatasetProblem] = field(default_factory=list)

    def header(self) -> Dict:
        return {
            "counts": {
                "mutated": self.mutated_per_problem,
                "problems": len(self.problems),
                "random": self.random_per_problem,
            },
            "format_version": FORMAT_VERSION,
            "kind": "tseq-dataset",
            "prior": asdict(self.config),
            "seed": self.seed,
            "split": self.split,
        }

    def tsproblems(self) -> List[TSProblem]:
        return [p.problem for p in self.problems]


def _generate_one(
    args: Tuple[PriorConfig, int, int, int]
) -> Tuple[TSProblem, List[LabeledSequence], List[LabeledSequence]]:
    config, seed, n_random, n_mutated = args
    rng = np.random.default_rng(seed)
    problem = sample_problem(config, rng)
    random = initial_context(problem, n_random, rng)
    mutated, dropped = mutated_sequences(n_mutated, problem, rng)
    if dropped > 0:
        logger.debug(f"Dropped {dropped} optimal mutations.")
    return problem, random, label_sequences(mutated, problem, "mutated")


def generate_dataset(
    config: PriorConfig,
    n_problems: int,
    seed: int,
    split: str = "test",
    random_per_problem: int = 16,
    mutated_per_problem: Optional[int] = None,
    workers: int = 1,
) -> Dataset:
    """Samples `n_problems` problems with distinct optimal sets.

    Problem i is drawn from the i-th seed spawned from `seed`; duplicates of an
    earlier optimal set are skipped, so the result depends only on the arguments.

    Args:
        config: problem prior
        n_problems: number of problems
        seed: global seed
        split: 'train', 'val' or 'test'
        random_per_problem: random context sequences stored per problem
        mutated_per_problem: mutated sequences, 16 for train and 0 otherwise if None
        workers: processes used for sampling
    """
    if split not in SPLITS:
        raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}.")
    if n_problems < 1:
        raise ValueError(f"n_problems must be >= 1, got {n_problems}.")
    if mutated_per_problem is None:
        mutated_per_problem = 16 if split == "train" else 0

    dataset = Dataset(config, seed, split, random_per_problem, mutated_per_problem)
    seen = set()
    offset = 0
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(dataset.problems) < n_problems:
            seeds = problem_seeds(seed, n_problems, offset)
            jobs = [(config, s, random_per_problem, mutated_per_problem) for s in seeds]
            if executor is not None:
                results = executor.map(_generate_one, jobs)
            else:
                results = map(_generate_one, jobs)
            for s, (problem, random, mutated) in zip(seeds, results):
                key = problem.optimal.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                problem.problem_id = f"{split}-{len(dataset.problems):06d}"
                dataset.problems.append(DatasetProblem(problem, s, random, mutated))
                if len(dataset.problems) == n_problems:
                    break
            offset += n_problems
    finally:
        if executor is not None:
            executor.shutdown()

    logger.info(
        f"Generated {n_problems} {split} problems (N={config.num_tasks}, "
        f"L={config.sequence_length}) from {offset} seeds."
    )
    return dataset


def _problem_record(item: DatasetProblem) -> Dict:
    problem = item.problem
    return {
        "context_mutated": [_sequence_record(s) for s in item.context_mutated],
        "context_random": [_sequence_record(s) for s in item.context_random],
        "graph": {
            "depth": list(problem.graph.depth),
            "edges": [list(e) for e in problem.graph.edges],
            "tasks": list(problem.graph.tasks),
        },
        "optimal": problem.optimal.tolist(),
        "problem_id": problem.problem_id,
        "seed": item.seed,
        "truncated": False,
    }


def dataset_text(dataset: Dataset) -> str:
    lines = [_dumps(dataset.header())]
    lines.extend(_dumps(_problem_record(p)) for p in dataset.problems)
    body = "".join(line + "\n" for line in lines)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return body + _dumps({"count": len(dataset.problems), "sha256": digest}) + "\n"


def write_dataset(path: Union[Path, str], dataset: Dataset) -> None:
    path = Path(path)
    write_atomic(path, dataset_text(dataset))
    logger.info(f"Exported {len(dataset.problems)} problems to {path.name}.")


def _labeled(records: Iterable[Dict], source: str) -> List[LabeledSequence]:
    return [LabeledSequence(r["tasks"], r["utility"], source) for r in records]


def read_dataset(path: Union[Path, str]) -> Dataset:
    """Strict inverse of write_dataset.

    Raises:
        DatasetError: on a version mismatch, truncation or checksum failure
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.endswith("\n"):
        raise DatasetError(f"{path.name}: truncated, missing final newline.")
    lines = text.split("\n")[:-1]
    if len(lines) < 2:
        raise DatasetError(f"{path.name}: truncated, missing header or footer.")
    try:
        header = json.loads(lines[0])
        footer = json.loads(lines[-1])
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path.name}: malformed record, {e}.")
    if header.get("kind") != "tseq-dataset":
        raise DatasetError(f"{path.name}: not a dataset file.")
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"{path.name}: format version {header.get('format_version')}, expected "
            f"{FORMAT_VERSION}."
        )
    if set(footer) != {"count", "sha256"}:
        raise DatasetError(f"{path.name}: truncated, missing footer.")
    body = "".join(line + "\n" for line in lines[:-1])
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != footer["sha256"]:
        raise DatasetError(f"{path.name}: checksum mismatch.")
    records = lines[1:-1]
    try:
        claimed = header["counts"]["problems"]
        config = PriorConfig(**header["prior"])
        dataset = Dataset(
            config,
            header["seed"],
            header["split"],
            header["counts"]["random"],
            header["counts"]["mutated"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{path.name}: malformed header, {e!r}.")
    if len(records) != footer["count"] or footer["count"] != claimed:
        raise DatasetError(
            f"{path.name}: {len(records)} records, header and footer claim "
            f"{claimed} and {footer['count']}."
        )

    for number, line in enumerate(records, start=2):
        try:
            r = json.loads(line)
            g = r["graph"]
            graph = TaskGraph(
                list(g["tasks"]), [tuple(e) for e in g["edges"]], list(g["depth"])
            )
            optimal = np.array(r["optimal"], dtype=np.int64).reshape(
                -1, config.sequence_length
            )
            problem = TSProblem(graph, optimal, config, r["problem_id"])
            dataset.problems.append(
                DatasetProblem(
                    problem,
                    r["seed"],
                    _labeled(r["context_random"], "random"),
                    _labeled(r["context_mutated"], "mutated"),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{path.name}: malformed record on line {number}, {e!r}.")
    logger.info(f"Imported {len(dataset.problems)} problems from {path.name}.")
    return dataset


def validate_dataset(dataset: Dataset) -> None:
    """Re-derives S* and every stored utility from the stored graphs.

    Raises:
        DatasetError: on duplicate ids or any mismatch
    """
    ids = [p.problem.problem_id for p in dataset.problems]
    if len(set(ids)) != len(ids):
        raise DatasetError("Problem ids are not unique.")
    for item in dataset.problems:
        problem = item.problem
        try:
            problem.graph.validate()
            optimal = enumerate_optimal(problem.graph, problem.length)
        except ValueError as e:
            raise DatasetError(f"{problem.problem_id}: {e}")
        if not np.array_equal(optimal, problem.optimal):
            raise DatasetError(f"{problem.problem_id}: optimal set differs from graph.")
        for s in item.context_random + item.context_mutated:
            expected = round_utility(utility_matrix(s.tasks[None], optimal)[0])
            if round_utility(s.utility) != expected:
                raise DatasetError(
                    f"{problem.problem_id}: stored utility of {s.tasks.tolist()} differs."
                )


def checkpoint_header(model: PFTSN) -> Dict:
    return {
        "config": model.config.to_dict(),
        "format_version": FORMAT_VERSION,
        "input_bias": True,
        "manifest": [
            {"name": name, "shape": list(p.shape)} for name, p in model.params.items()
        ],
        "task_channel": TASK_CHANNEL,
    }


def checkpoint_bytes(model: PFTSN) -> bytes:
    header = _dumps(checkpoint_header(model)).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, np.array([len(header)], dtype="<u4").tobytes(), header]
    parts.extend(p.data.astype("<f8").tobytes() for p in model.params.values())
    return b"".join(parts)


def save_checkpoint(model: PFTSN, path: Union[Path, str]) -> None:
    path = Path(path)
    write_atomic(path, checkpoint_bytes(model))
    logger.debug(f"Saved checkpoint {path.name}.")


def load_checkpoint(path: Union[Path, str]) -> PFTSN:
    """Rebuilds the network stored in a checkpoint.

    Raises:
        CheckpointError: on a bad header or a manifest that does not match the
            architecture, naming the parameter
    """
    path = Path(path)
    data = path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: not a checkpoint file.")
    start = len(CHECKPOINT_MAGIC)
    if len(data) < start + 4:
        raise CheckpointError(f"{path.name}: truncated header.")
    size = int(np.frombuffer(data[start : start + 4], dtype="<u4")[0])
    start += 4
    try:
        header = json.loads(data[start : start + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path.name}: malformed header, {e}.")
    start += size

    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path.name}: format version {header.get('format_version')}, expected "
            f"{FORMAT_VERSION}."
        )
    if header.get("task_channel") != TASK_CHANNEL:
        raise CheckpointError(
            f"{path.name}: task channel '{header.get('task_channel')}' unsupported."
        )
    try:
        model = PFTSN(ModelConfig(**header["config"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path.name}: invalid model config, {e}.")

    state = {}
    for entry in header.get("manifest", []):
        name, shape = entry.get("name"), tuple(entry.get("shape", ()))
        if name not in model.params:
            raise CheckpointError(f"{path.name}: unknown parameter '{name}'.")
        if shape != model.params[name].shape:
            raise CheckpointError(
                f"{path.name}: parameter '{name}' has shape {shape}, expected "
                f"{model.params[name].shape}."
            )
        count = int(np.prod(shape, dtype=np.int64)) * 8
        if len(data) < start + count:
            raise CheckpointError(f"{path.name}: truncated at parameter '{name}'.")
        state[name] = np.frombuffer(data[start : start + count], dtype="<f8").reshape(
            shape
        )
        start += count
    if start != len(data):
        raise CheckpointError(f"{path.name}: {len(data) - start} trailing bytes.")
    missing = [name for name in model.params if name not in state]
    if missing:
        raise CheckpointError(f"{path.name}: missing parameter '{missing[0]}'.")
    model.load_state_dict(state)
    logger.info(f"Imported {model.num_parameters()} parameters from {path.name}.")
    return model


class TrainLogWriter(object):
    """Line-delimited training log, one header then one record per step."""

    def __init__(self, path: Path, header: Dict):
        self.path = path
        self.fp = path.open("w", encoding="utf-8", newline="\n")
        self.write({"format_version": FORMAT_VERSION, "kind": "tseq-train-log", **header})

    def write(self, record: Dict) -> None:
        self.fp.write(_dumps(record) + "\n")
        self.fp.flush()

    def close(self) -> None:
        self.fp.close()


def read_train_log(path: Union[Path, str]) -> Tuple[Dict, List[Dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) == 0:
        raise ValueError(f"{Path(path).name}: empty training log.")
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]


def timing_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.timing.csv")


def _trace_record(trace: Trace) -> Dict:
    return {
        "error": trace.error,
        "initial": [
            {"tasks": s.tasks.tolist(), "utility": s.utility.tolist()}
            for s in trace.initial
        ],
        "length": trace.length,
        "method": trace.method,
        "partial": trace.partial,
        "problem_id": trace.problem_id,
        "steps": [
            {
                "best_so_far": s.best_so_far,
                "score": s.score,
                "sequence": s.sequence.tolist(),
                "utility": s.utility.tolist(),
            }
            for s in trace.steps
        ],
    }


def write_traces(path: Union[Path, str], traces: Sequence[Trace]) -> None:
    """Writes traces and a `<name>.timing.csv` sidecar of proposal times.

    Timing is kept out of the trace file so that equal seeds give equal files.
    """
    path = Path(path)
    methods = sorted({t.method for t in traces})
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "tseq-traces",
        "methods": methods,
        "problems": len(traces),
        "tseq_version": __version__,
    }
    lines = [_dumps(header)] + [_dumps(_trace_record(t)) for t in traces]
    write_atomic(path, "".join(line + "\n" for line in lines))

    timing = ["problem_id,method,iteration,proposal_seconds"]
    for t in traces:
        for i, s in enumerate(t.steps, 1):
            timing.append(f"{t.problem_id},{t.method},{i},{s.proposal_seconds!r}")
    write_atomic(timing_path(path), "\n".join(timing) + "\n")
    logger.info(f"Exported {len(traces)} traces to {path.name}.")


def read_traces(path: Union[Path, str]) -> List[Trace]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) == 0:
        raise ValueError(f"{path.name}: empty trace file.")
    header = json.loads(lines[0])
    if header.get("kind") != "tseq-traces":
        raise ValueError(f"{path.name}: not a trace file.")
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path.name}: format version {header.get('format_version')}, expected "
            f"{FORMAT_VERSION}."
        )

    seconds: Dict[Tuple[str, str, int], float] = {}
    sidecar = timing_path(path)
    if not sidecar.exists():
        logger.warning(f"No timing sidecar for {path.name}, proposal times are 0.")
    elif len(sidecar.read_text(encoding="utf-8").splitlines()) > 1:
        data = np.genfromtxt(
            sidecar, delimiter=",", names=True, dtype=None, encoding="utf-8"
        )
        for row in np.atleast_1d(data):
            key = (str(row["problem_id"]), str(row["method"]), int(row["iteration"]))
            seconds[key] = float(row["proposal_seconds"])

    traces = []
    for line in lines[1:]:
        r = json.loads(line)
        steps = [
            TraceStep(
                np.array(s["sequence"], dtype=np.int64),
                np.array(s["utility"], dtype=np.float64),
                s["score"],
                s["best_so_far"],
                seconds.get((r["problem_id"], r["method"], i), 0.0),
            )
            for i, s in enumerate(r["steps"], 1)
        ]
        initial = [
            LabeledSequence(s["tasks"], s["utility"], "random") for s in r["initial"]
        ]
        traces.append(
            Trace(
                r["problem_id"],
                r["method"],
                r["length"],
                initial,
                steps,
                r["partial"],
                r["error"],
            )
        )
    if len(traces) != header["problems"]:
        raise ValueError(
            f"{path.name}: truncated, {len(traces)} of {header['problems']} traces."
        )
    logger.info(f"Imported {len(traces)} traces from {path.name}.")
    return traces


def export_table(
    path: Union[Path, str], columns: Sequence[str], rows: Iterable[Sequence]
) -> None:
    """Comma-separated table with a header row."""
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join("" if v is None else str(v) for v in row))
    write_atomic(path, "\n".join(lines) + "\n")
    logger.info(f"Exported {len(lines) - 1} rows to {path.name}.")
