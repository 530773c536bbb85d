import logging
from pathlib import Path
import sys

import numpy as np

from tseq import io
from tseq.harness import EvalConfig, evaluate_suite

logging.basicConfig(
    format="[%(asctime)s] %(levelname)8s - %(name)s : %(message)s",
    datefmt="%H:%M:%S",
    level=logging.WARNING,
)

if len(sys.argv) < 3:
    print("usage: context_ablation.py <model.ckpt> <problems.jsonl> [out.csv]")
    sys.exit(2)

model = io.load_checkpoint(Path(sys.argv[1]))
problems = io.read_dataset(Path(sys.argv[2])).tsproblems()
out = Path(sys.argv[3] if len(sys.argv) > 3 else "context_ablation.csv")

rows = []
for size in [1, 2, 4, 8, 16]:
    for method in ["pftsn", "random"]:
        config = EvalConfig(iterations=32, init_context=size, seed=0)
        traces = evaluate_suite(problems, method, config, model if method == "pftsn" else None)
        final = np.array([t.best_curve(32)[-1] for t in traces])
        first = np.array([t.best_curve(32)[1] for t in traces])
        rows.append([size, method, np.mean(first), np.mean(final), np.std(final)])
        print(f"C={size:2d} {method:6s} first {np.mean(first):.3f} final {np.mean(final):.3f}")

io.export_table(
    out, ["init_context", "method", "mean_first", "mean_final", "std_final"], rows
)
