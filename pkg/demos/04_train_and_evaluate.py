"""
Training, evaluation and reports from the command line
======================================================

A compressed version of the full workflow: synthesize gait cycles, label
them, train a small network on the physics loss, evaluate it on a held-out
cycle and render SVG reports. Every step is a ``mskpinn`` subcommand; here
they are called in-process. Run with
``python3 demos/04_train_and_evaluate.py [out_dir]``. It takes a few minutes.
"""

import sys
from pathlib import Path

from mskpinn.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "workflow"
data, run = out / "data", out / "run"

# %% Data
# Three cycles of the 1.3 m/s condition, written as trajectory CSVs with the
# generator's own activations alongside, then labelled by static optimization.
main(["synth", "--out", str(data), "--cycles", "3", "--conditions", "1.3", "--seed", "0"])
main(["so", str(data)])

# %% Training
# A reduced network (the full one has about 630k parameters) for 10 epochs.
# The split holds one of the three cycles out.
small = ["--d-joint", "16", "--d-integrated", "32", "--d-gru", "32", "--head-hidden", "32,16"]
main(["train", "--data", str(data), "--out", str(run), "--epochs", "10", "--checkpoint-every", "5", *small])

# %% Evaluation and plots
# eval prints per-muscle R2 / NRMSE against the labels and the single-window
# latency, and writes predictions next to the reference traces.
main(["eval", "--data", str(data), "--checkpoint", str(run / "epoch_0010.npz")])
main(["report", str(run / "eval")])
main(["report", str(run)])
print("reports in", run)
