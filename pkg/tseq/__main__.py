import argparse
from collections import defaultdict
import logging
from pathlib import Path
import shutil
import sys

from tseq import __version__
from tseq import io
from tseq.config import ConfigError, RunConfig, env_seed, env_workers
from tseq.harness import (
    METHODS,
    aggregate_ranks,
    break_even_table,
    curve_export,
    evaluate_suite,
    final_sign_tests,
    timing_summary,
)
from tseq.trainer import meta_train

from typing import Callable, Dict, List, Optional

logging.captureWarnings(True)
logger = logging.getLogger()

LOG_FORMAT = "[%(asctime)s] %(levelname)8s - %(name)s : %(message)s"


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="tseq",
        description="Task-sequencing problem generation, meta-training and benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"tseq {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration.")
    common.add_argument(
        "-v", "--verbose", action="store_true", help="Log debug messages."
    )
    common.add_argument("-q", "--quiet", action="store_true", help="Log warnings only.")
    common.add_argument(
        "--show-config",
        action="store_true",
        help="Print the resolved configuration and exit.",
    )
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, help="Global seed, or $TSEQ_SEED.")
    seeded.add_argument(
        "--workers", type=int, help="Worker processes, or $TSEQ_WORKERS."
    )

    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser(
        "generate", parents=[common, seeded], help="Write a problem dataset."
    )
    generate.add_argument("--out", type=Path, required=True, help="Dataset file.")
    generate.add_argument("--num-problems", type=int, default=128)
    generate.add_argument(
        "--split", choices=io.SPLITS, default="test", help="Dataset split."
    )
    generate.add_argument("--random-per-problem", type=int, default=16)
    generate.add_argument(
        "--mutated-per-problem",
        type=int,
        help="Mutated sequences per problem, 16 for train and 0 otherwise.",
    )

    train = commands.add_parser(
        "train", parents=[common, seeded], help="Meta-train a network."
    )
    train.add_argument("--out", type=Path, required=True, help="Output directory.")
    train.add_argument("--dataset", type=Path, help="Train on a dataset's problems.")
    train.add_argument("--steps", type=int, help="Override train.steps.")

    evaluate = commands.add_parser(
        "evaluate", parents=[common, seeded], help="Run a strategy on a suite."
    )
    evaluate.add_argument("--problems", type=Path, required=True, help="Dataset file.")
    evaluate.add_argument("--method", choices=METHODS, required=True)
    evaluate.add_argument("--model", type=Path, help="Checkpoint, required for pftsn.")
    evaluate.add_argument("--iterations", type=int)
    evaluate.add_argument("--init-context", type=int)
    evaluate.add_argument("--temperature", type=float)
    evaluate.add_argument("--out", type=Path, required=True, help="Trace file.")

    report = commands.add_parser(
        "report", parents=[common], help="Aggregate trace files into tables."
    )
    report.add_argument("--traces", type=Path, nargs="+", required=True)
    report.add_argument(
        "--out-prefix", type=str, required=True, help="Prefix of the CSV tables."
    )

    args = parser.parse_args(argv)

    if args.config is not None and not args.config.exists():
        parser.error(f"[--config]: File '{args.config}' not found.")
    if args.command == "train" and args.dataset is not None:
        if not args.dataset.exists():
            parser.error(f"[--dataset]: File '{args.dataset}' not found.")
    if args.command == "evaluate":
        if not args.problems.exists():
            parser.error(f"[--problems]: File '{args.problems}' not found.")
        if (args.method == "pftsn") != (args.model is not None):
            parser.error("[--model]: required if and only if --method is pftsn.")
        if args.model is not None and not args.model.exists():
            parser.error(f"[--model]: File '{args.model}' not found.")
    if args.command == "report":
        for path in args.traces:
            if not path.exists():
                parser.error(f"[--traces]: File '{path}' not found.")

    return args


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then environment, then flags."""
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    if args.command == "report":
        return config

    seed = args.seed if args.seed is not None else env_seed()
    workers = args.workers if args.workers is not None else env_workers()
    config = config.override("prior", seed=seed)
    config = config.override("train", seed=seed, workers=workers)
    config = config.override("eval", seed=seed, workers=workers)
    if args.command == "train":
        config = config.override("train", steps=args.steps)
    elif args.command == "evaluate":
        config = config.override(
            "eval",
            iterations=args.iterations,
            init_context=args.init_context,
            temperature=args.temperature,
        )
    return config


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = io.generate_dataset(
        config.prior,
        args.num_problems,
        config.prior.seed,
        args.split,
        args.random_per_problem,
        args.mutated_per_problem,
        config.train.workers,
    )
    io.write_dataset(args.out, dataset)
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    out: Path = args.out
    if out.exists():
        raise FileExistsError(f"Output directory '{out}' already exists.")

    prior, problems = config.prior, None
    if args.dataset is not None:
        dataset = io.read_dataset(args.dataset)
        prior, problems = dataset.config, dataset.tsproblems()
        config = RunConfig(prior, config.model, config.train, config.eval)

    tmp = out.with_name(f".{out.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        io.write_atomic(tmp.joinpath("config.yaml"), config.dump())
        meta_train(prior, config.train, config.model, tmp, problems)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info(f"Training outputs written to {out}.")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    problems = io.read_dataset(args.problems).tsproblems()
    model = io.load_checkpoint(args.model) if args.model is not None else None
    traces = evaluate_suite(problems, args.method, config.eval, model)
    io.write_traces(args.out, traces)
    return 0


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    traces: Dict[str, List] = defaultdict(list)
    for path in args.traces:
        for trace in io.read_traces(path):
            traces[trace.method].append(trace)
    traces = dict(traces)
    methods = list(traces)
    prefix = args.out_prefix

    curves = curve_export(traces)
    length = max(mean.size for mean, _ in curves.values())
    columns = ["iteration"]
    for m in methods:
        columns += [f"{m}_mean", f"{m}_std"]
    rows = []
    for i in range(length):
        row = [i]
        for m in methods:
            mean, std = curves[m]
            row += [mean[min(i, mean.size - 1)], std[min(i, std.size - 1)]]
        rows.append(row)
    io.export_table(Path(f"{prefix}_curves.csv"), columns, rows)

    summary = timing_summary(traces)
    timing_columns = [
        "problems",
        "solved",
        "mean_proposal_seconds",
        "total_proposal_seconds",
        "median_iterations_to_optimum",
        "proposal_seconds_to_optimum",
    ]
    io.export_table(
        Path(f"{prefix}_timing.csv"),
        ["method"] + timing_columns,
        [[m] + [summary[m][c] for c in timing_columns] for m in methods],
    )

    if len(methods) < 2:
        logger.info("Single method given, ranks and break-even skipped.")
        return 0

    table = aggregate_ranks(traces)
    io.export_table(
        Path(f"{prefix}_ranks.csv"),
        ["checkpoint", "problem_id"] + methods,
        [
            [c, p] + list(table.ranks[c][i])
            for c in table.checkpoints
            for i, p in enumerate(table.problems)
        ],
    )
    io.export_table(
        Path(f"{prefix}_mean_ranks.csv"),
        ["checkpoint", "method", "mean_rank"],
        [[c, m, r] for c in table.checkpoints for m, r in table.mean_ranks(c).items()],
    )
    io.export_table(
        Path(f"{prefix}_break_even.csv"),
        ["method_a", "method_b", "break_even_seconds"],
        [
            [r["method_a"], r["method_b"], r["break_even_seconds"]]
            for r in break_even_table(summary)
        ],
    )
    io.export_table(
        Path(f"{prefix}_sign_tests.csv"),
        ["method_a", "method_b", "wins", "losses", "p_value"],
        [
            [r["method_a"], r["method_b"], r["wins"], r["losses"], r["p_value"]]
            for r in final_sign_tests(traces)
        ],
    )
    for c in table.checkpoints:
        means = ", ".join(f"{m} {r:.2f}" for m, r in table.mean_ranks(c).items())
        logger.info(f"Mean ranks at iteration {c}: {means}.")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(format=LOG_FORMAT, datefmt="%H:%M:%S")
    logger.setLevel(level)

    try:
        config = resolve_config(args)
        if args.show_config:
            print(config.dump(), end="")
            return 0
        logger.info(f"tseq {__version__} {args.command} started.")
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 1
    except Exception:
        logger.exception(f"{args.command} failed.")
        return 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
