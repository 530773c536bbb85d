import logging
from pathlib import Path
import sys

import numpy as np

from tseq import io
from tseq.calc import sign_test
from tseq.harness import EvalConfig, curve_export, evaluate_suite, timing_summary
from tseq.model import ModelConfig
from tseq.prior import PriorConfig
from tseq.trainer import TrainConfig, meta_train

logging.basicConfig(
    format="[%(asctime)s] %(levelname)8s - %(name)s : %(message)s",
    datefmt="%H:%M:%S",
    level=logging.INFO,
)
logger = logging.getLogger("desk_benchmark")

out = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_benchmark")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 3000

prior = PriorConfig(num_tasks=8, sequence_length=8, seed=0)
model_config = ModelConfig(
    num_tasks=8, seq_len=8, d_emb=32, num_blocks=4, num_heads=4, hidden=128
)
train_config = TrainConfig(
    steps=steps, batch_size=64, warmup_steps=200, checkpoint_every=500, seed=0
)

if out.joinpath("model.ckpt").exists():
    model = io.load_checkpoint(out.joinpath("model.ckpt"))
else:
    out.mkdir(parents=True, exist_ok=True)
    model = meta_train(prior, train_config, model_config, out).model

# held-out problems use a seed never used in training
test = io.generate_dataset(prior, 32, seed=1_000_003, split="test")
io.write_dataset(out.joinpath("test.jsonl"), test)

config = EvalConfig(iterations=32, init_context=4, seed=7)
traces = {
    "pftsn": evaluate_suite(test.tsproblems(), "pftsn", config, model),
    "random": evaluate_suite(test.tsproblems(), "random", config),
}
for method, ts in traces.items():
    io.write_traces(out.joinpath(f"{method}.jsonl"), ts)

curves = curve_export(traces)
for method, (mean, std) in curves.items():
    logger.info(f"{method}: best Ū at iteration 32 is {mean[32]:.3f} ± {std[32]:.3f}.")

final = {m: np.array([t.best_curve(32)[-1] for t in ts]) for m, ts in traces.items()}
wins, losses, p = sign_test(final["pftsn"], final["random"], alternative="greater")
logger.info(f"pftsn against random: {wins} wins, {losses} losses, p = {p:.4g}.")
if curves["pftsn"][0][32] > curves["random"][0][32] and p < 0.05:
    logger.info("pftsn dominates random search.")
else:
    logger.warning("pftsn does not dominate random search.")

# rule-based convergence on 128 small problems
small = io.generate_dataset(prior, 128, seed=2_000_003, split="test")
rule = evaluate_suite(
    small.tsproblems(), "rule", EvalConfig(iterations=64, init_context=4, seed=7)
)
median = timing_summary({"rule": rule})["rule"]["median_iterations_to_optimum"]
logger.info(f"rule: median iterations to Ū = 8 is {median:.1f}.")
