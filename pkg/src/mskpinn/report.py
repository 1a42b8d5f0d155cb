"""SVG figures for evaluation, training and ablation outputs.

Every function takes already-computed CSV outputs, so reports can be
regenerated without re-running anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import data as dat  # noqa: E402
from . import train as tr  # noqa: E402

__all__ = ["plot_traces", "plot_metric_bars", "plot_training", "plot_ablation", "write_report"]


def plot_traces(time, predicted, reference, names, path, title="") -> Path:
    """Prediction vs reference per muscle for one trial."""
    ncol = 5
    nrow = int(np.ceil(len(names) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.0 * ncol, 2.4 * nrow), sharex=True, squeeze=False)
    for m, (ax, name) in enumerate(zip(axes.flat, names)):
        ax.plot(time, reference[:, m], color="0.2", lw=1.5, label="reference")
        ax.plot(time, predicted[:, m], color="tab:red", lw=1.2, ls="--", label="predicted")
        ax.set_title(name, fontsize=9)
    for ax in axes.flat[len(names):]:
        ax.set_visible(False)
    axes.flat[0].legend(fontsize=7)
    for ax in axes[-1]:
        ax.set_xlabel("time (s)")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_metric_bars(rows, path) -> Path:
    """Per-muscle R^2 and NRMSE bars (mean with across-trial sd)."""
    metrics = [m for m in ("activation_r2", "activation_nrmse", "force_r2", "force_nrmse")
               if any(r["metric"] == m for r in rows)]
    fig, axes = plt.subplots(len(metrics), 1, figsize=(8, 2.3 * len(metrics)), squeeze=False)
    for ax, metric in zip(axes[:, 0], metrics):
        sel = [r for r in rows if r["metric"] == metric]
        x = np.arange(len(sel))
        ax.bar(x, [r["mean"] for r in sel], yerr=[r["sd"] for r in sel], color="tab:blue", capsize=2)
        ax.set_xticks(x, [r["muscle"] for r in sel], fontsize=8)
        ax.set_ylabel(metric.replace("_", " "), fontsize=8)
        ax.axhline(0.0, color="0.5", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_training(rows, path) -> Path:
    steps = np.array([r["step"] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for key in ("l_total", "l_d", "l_p", "l_b"):
        vals = np.array([r[key] for r in rows])
        if np.all(np.isfinite(vals)) and np.any(vals > 0):
            ax.semilogy(steps, np.maximum(vals, 1e-12), lw=0.8, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_ablation(rows, path) -> Path:
    labels = [f"{r['variant']}\n{r['backbone']}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 3.5))
    ax.bar(x, [r["activation_r2"] for r in rows], yerr=[r["activation_r2_sd"] for r in rows],
           color="tab:green", capsize=3)
    ax.set_xticks(x, labels, fontsize=8)
    ax.set_ylabel("held-out activation R$^2$")
    ax.axhline(0.0, color="0.5", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def write_report(input_dir: Path, out_dir: Path | None = None, max_trials: int = 2) -> list[Path]:
    """Render whatever CSV outputs ``input_dir`` holds; returns the files written."""
    input_dir = Path(input_dir)
    out = Path(out_dir) if out_dir else input_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (input_dir / "predictions").is_dir():
        traces = tr.read_eval_traces(input_dir)
        for name in sorted(traces)[:max_trials]:
            t, a, f, ra, rf, names = traces[name]
            written.append(plot_traces(t, a, ra, names, out / f"activations_{name}.svg", f"activation, {name}"))
            if np.all(np.isfinite(rf)):
                written.append(plot_traces(t, f, rf, names, out / f"forces_{name}.svg", f"force (N), {name}"))
    if (input_dir / "metrics.csv").exists():
        written.append(plot_metric_bars(dat.read_metrics_csv(input_dir / "metrics.csv"), out / "metrics.svg"))
    if (input_dir / "train_log.csv").exists():
        rows = tr.read_log_csv(input_dir / "train_log.csv")
        if rows:
            written.append(plot_training(rows, out / "training.svg"))
    if (input_dir / "ablation.csv").exists():
        written.append(plot_ablation(tr.read_ablation_csv(input_dir / "ablation.csv"), out / "ablation.svg"))
    return written
