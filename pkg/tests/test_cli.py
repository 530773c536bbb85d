from pathlib import Path

import numpy as np
import pytest

from tseq.__main__ import main, parse_args

TINY_CONFIG = """\
prior:
  num_tasks: 4
  sequence_length: 4
model:
  d_emb: 8
  num_blocks: 1
  num_heads: 2
  hidden: 16
train:
  steps: 2
  batch_size: 2
  warmup_steps: 1
eval:
  iterations: 4
  init_context: 2
"""


@pytest.fixture
def workspace(tmp_path: Path, monkeypatch) -> Path:
    monkeypatch.delenv("TSEQ_SEED", raising=False)
    monkeypatch.delenv("TSEQ_WORKERS", raising=False)
    tmp_path.joinpath("tiny.yaml").write_text(TINY_CONFIG)
    return tmp_path


def generate(workspace: Path, name: str = "problems.jsonl", seed: int = 1) -> Path:
    out = workspace.joinpath(name)
    argv = ["generate", "--config", str(workspace.joinpath("tiny.yaml"))]
    argv += ["--out", str(out), "--num-problems", "4", "--seed", str(seed)]
    assert main(argv) == 0
    return out


def evaluate(workspace: Path, problems: Path, method: str, *extra: str) -> Path:
    out = workspace.joinpath(f"{method}.jsonl")
    argv = ["evaluate", "--config", str(workspace.joinpath("tiny.yaml"))]
    argv += ["--problems", str(problems), "--method", method, "--out", str(out)]
    assert main(argv + list(extra)) == 0
    return out


def test_generate_is_reproducible(workspace: Path):
    a = generate(workspace, "a.jsonl")
    b = generate(workspace, "b.jsonl")
    assert a.read_bytes() == b.read_bytes()


def test_show_config(capsys):
    assert main(["generate", "--show-config", "--out", "unused.jsonl"]) == 0
    assert "d_emb: 64" in capsys.readouterr().out


def test_argument_errors(workspace: Path):
    with pytest.raises(SystemExit) as e:
        parse_args(["generate", "--config", str(workspace.joinpath("missing.yaml")), "--out", "x"])
    assert e.value.code == 2

    problems = generate(workspace)
    with pytest.raises(SystemExit) as e:
        parse_args(["evaluate", "--problems", str(problems), "--method", "pftsn", "--out", "x"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        parse_args(
            ["evaluate", "--problems", str(problems), "--method", "random"]
            + ["--model", str(problems), "--out", "x"]
        )
    assert e.value.code == 2


def test_invalid_config_returns_error(workspace: Path):
    bad = workspace.joinpath("bad.yaml")
    bad.write_text("train:\n  lerning_rate: 0.1\n")
    argv = ["generate", "--config", str(bad), "--out", str(workspace.joinpath("x.jsonl"))]
    assert main(argv) == 1


def test_train_and_evaluate(workspace: Path):
    config = str(workspace.joinpath("tiny.yaml"))
    out = workspace.joinpath("run")
    assert main(["train", "--config", config, "--out", str(out), "--steps", "1"]) == 0
    assert out.joinpath("model.ckpt").exists()
    assert out.joinpath("config.yaml").exists()
    assert out.joinpath("checkpoints", "step_000001.ckpt").exists()
    assert len(out.joinpath("train_log.jsonl").read_text().splitlines()) == 2
    # an existing output directory is never overwritten
    assert main(["train", "--config", config, "--out", str(out), "--steps", "1"]) == 1

    problems = generate(workspace)
    traces = evaluate(
        workspace, problems, "pftsn", "--model", str(out.joinpath("model.ckpt"))
    )
    assert len(traces.read_text().splitlines()) == 5


def test_evaluate_is_reproducible(workspace: Path):
    problems = generate(workspace)
    first = evaluate(workspace, problems, "random").read_bytes()
    second = evaluate(workspace, problems, "random").read_bytes()
    assert first == second


def test_report(workspace: Path):
    problems = generate(workspace)
    traces = [str(evaluate(workspace, problems, m)) for m in ("random", "rule", "ddqn")]
    prefix = str(workspace.joinpath("report"))
    assert main(["report", "--traces", *traces, "--out-prefix", prefix]) == 0

    for table in ("curves", "timing", "ranks", "mean_ranks", "break_even", "sign_tests"):
        assert workspace.joinpath(f"report_{table}.csv").exists()
    lines = workspace.joinpath("report_ranks.csv").read_text().splitlines()
    assert lines[0] == "checkpoint,problem_id,random,rule,ddqn"
    for line in lines[1:]:
        ranks = [float(v) for v in line.split(",")[2:]]
        assert np.isclose(sum(ranks), 6.0)

    single = str(workspace.joinpath("single"))
    assert main(["report", "--traces", traces[0], "--out-prefix", single]) == 0
    assert workspace.joinpath("single_curves.csv").exists()
    assert not workspace.joinpath("single_ranks.csv").exists()
