"""Training, evaluation and ablation drivers.

A *trial* is one recorded (or synthesized) gait trajectory together with
optional reference activations and forces. :func:`prepare_trial` turns it
into sliding windows plus, for each window's last frame, the affine torque
model the physics loss needs. Everything downstream works on prepared
trials, so the expensive dynamics and muscle evaluations happen once.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import dynamics as dyn
from . import network as net
from .loss import FrameTerms, LossWeights, frame_terms_for, physics_loss, supervised_mse
from .muscle import MuscleSet, muscle_kinematics
from .oracle import so_trajectory, synth_cycles

log = logging.getLogger(__name__)

__all__ = [
    "LATENCY_BUDGET_MS",
    "PROFILES",
    "Trial",
    "PreparedTrial",
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "TrainingDivergedError",
    "synthetic_trials",
    "prepare_trial",
    "train_run",
    "load_model",
    "evaluate",
    "measure_latency",
    "ablation_suite",
    "ablation_row",
    "write_log_csv",
    "read_log_csv",
    "write_eval_outputs",
    "read_eval_traces",
]

LATENCY_BUDGET_MS = 75.0

# cycles of synthetic data and epochs for the two end-to-end run sizes
PROFILES = {
    "smoke": {"cycles": 3, "epochs": 50},
    "full": {"cycles": 10, "epochs": 500},
}

LOG_FIELDS = ("step", "epoch", "lr", "l_d", "l_p", "l_b", "l_sup", "l_total", "wall_ms")


class TrainingDivergedError(FloatingPointError):
    """Raised on a non-finite loss or gradient; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# -- data preparation -----------------------------------------------------------

@dataclass
class Trial:
    trajectory: dat.JointTrajectory
    activations: np.ndarray | None = None
    forces: np.ndarray | None = None
    name: str = ""

    @property
    def condition(self) -> str:
        return self.trajectory.condition


@dataclass
class PreparedTrial:
    """Windows of one trial and everything evaluated at their end frames."""

    name: str
    condition: str
    windows: np.ndarray          # (W, S, 9) raw features
    end_frames: np.ndarray       # (W,)
    time: np.ndarray             # (W,) time stamps of the end frames
    terms: FrameTerms            # torque model at the end frames
    force_gain: np.ndarray       # (W, N) muscle force per unit activation
    force_passive: np.ndarray    # (W, N)
    labels: np.ndarray | None = None        # (W, N) reference activations
    force_labels: np.ndarray | None = None  # (W, N) reference forces

    def __len__(self):
        return len(self.end_frames)

    def forces(self, activations):
        return activations * self.force_gain + self.force_passive


def prepare_trial(model: dyn.LimbModel, muscles: MuscleSet, trial: Trial,
                  window: int = dat.WINDOW, stride: int = dat.STRIDE) -> PreparedTrial:
    traj = trial.trajectory
    windows, ends = dat.make_windows(traj, window, stride)
    states = dat.trajectory_states(traj)
    terms = frame_terms_for(model, muscles, states, dat.trajectory_grf(traj), traj.dt)
    mk = muscle_kinematics(muscles, traj.q, traj.dt)
    take = lambda arr: None if arr is None else np.asarray(arr, dtype=float)[ends]  # noqa: E731
    return PreparedTrial(
        name=trial.name or traj.metadata.get("cycle", ""),
        condition=traj.condition,
        windows=windows,
        end_frames=ends,
        time=traj.time[ends],
        terms=terms.take(ends),
        force_gain=mk.gain[ends],
        force_passive=mk.passive[ends],
        labels=take(trial.activations),
        force_labels=take(trial.forces),
    )


def synthetic_trials(model: dyn.LimbModel, muscles: MuscleSet, n_cycles: int,
                     conditions=("1.3",), seed: int = 0) -> list[Trial]:
    """Synthesize ``n_cycles`` gait cycles per condition, labeled by static optimization."""
    trials = []
    for cond in conditions:
        for res in synth_cycles(model, muscles, n_cycles, condition=cond, seed=seed):
            so = so_trajectory(model, muscles, res.trajectory)
            name = f"c{cond}_{res.trajectory.metadata.get('cycle', len(trials))}"
            trials.append(Trial(res.trajectory, so.activations, so.forces, name))
    return trials


def _stack(trials, attr):
    parts = [getattr(t, attr) for t in trials]
    if any(p is None for p in parts):
        return None
    return np.concatenate(parts)


# -- configuration -------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Flat training configuration; every field doubles as a CLI flag.

    Architecture fields override the :class:`~mskpinn.network.NetConfig`
    defaults; the number of muscles always comes from the data.
    """

    epochs: int = 500
    batch_size: int = 8
    mode: str = "physics"
    backbone: str = "mjca"
    w_d: float = 3.0
    w_p: float = 1000.0
    w_b: float = 500.0
    lr: float = 5e-4
    lr_floor: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    split_mode: str = "intra"
    held_out: str = ""
    split_seed: int = 0
    train_frac: float = 0.8
    checkpoint_every: int = 50
    normalize: bool = True
    force_mse_weight: float = 0.0
    window: int = dat.WINDOW
    stride: int = dat.STRIDE
    d_joint: int = 64
    n_heads: int = 2
    d_integrated: int = 128
    d_gru: int = 128
    gru_layers: int = 2
    dropout: float = 0.1
    head_hidden: tuple = (128, 64)

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if self.mode not in ("physics", "supervised"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs must be >= 0, batch_size and checkpoint_every >= 1")
        LossWeights(self.w_d, self.w_p, self.w_b)  # validates

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_d, self.w_p, self.w_b)

    @property
    def split(self) -> dat.DatasetSplit:
        return dat.DatasetSplit(self.split_mode, self.held_out, self.split_seed, self.train_frac)

    def net_config(self, n_muscles: int) -> net.NetConfig:
        return net.NetConfig(
            d_joint=self.d_joint, n_heads=self.n_heads, d_integrated=self.d_integrated,
            d_gru=self.d_gru, gru_layers=self.gru_layers, dropout=self.dropout,
            head_dims=(2 * self.d_gru, *self.head_hidden, n_muscles), backbone=self.backbone,
            conv_channels=(self.d_joint, self.d_integrated, self.d_integrated),
        )

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    config: TrainConfig
    net_config: net.NetConfig
    params: dict
    stats: dat.NormStats
    log: list
    checkpoints: list = field(default_factory=list)
    optim: ad.OptimState | None = None

    @property
    def final_checkpoint(self):
        return self.checkpoints[-1] if self.checkpoints else None


# -- training --------------------------------------------------------------------

def _identity_stats(n_channels):
    return dat.NormStats(np.zeros(n_channels), np.ones(n_channels))


def _batch_loss(cfg: TrainConfig, pred, terms, labels, gain, fmax):
    parts = physics_loss(pred, terms, cfg.weights)
    if cfg.mode == "physics":
        return parts, parts.total, math.nan
    sup = supervised_mse(pred, labels)
    if cfg.force_mse_weight:
        # force error through the muscle model, in units of max isometric force
        scaled = ad.mul(pred - labels, gain / fmax)
        sup = sup + ad.mean(ad.square(scaled)) * cfg.force_mse_weight
    return parts, sup, float(sup.data)


def _checkpoint_arrays(stats, optim, names):
    arrays = {"norm/mean": stats.mean, "norm/std": stats.std}
    if optim is not None:
        for name, m, v in zip(names, optim.m, optim.v):
            arrays[f"opt/m/{name}"] = m
            arrays[f"opt/v/{name}"] = v
    return arrays


def _save(path, cfg, net_cfg, params, stats, optim, epoch, extra_meta=None):
    meta = {"train_config": cfg.to_dict(), "epoch": epoch,
            "step": optim.step if optim else 0, "total_steps": optim.total_steps if optim else 0}
    meta.update(extra_meta or {})
    net.save_checkpoint(path, net_cfg, params, _checkpoint_arrays(stats, optim, list(params)), meta)
    return Path(path)


def load_model(path):
    """(net config, params, normalization stats, meta) from a checkpoint."""
    net_cfg, params, arrays, meta = net.load_checkpoint(path)
    stats = dat.NormStats(arrays["norm/mean"], arrays["norm/std"])
    return net_cfg, params, stats, meta


def train_run(cfg: TrainConfig, trials, out_dir=None, resume=None, stop_epoch: int | None = None,
              progress=None) -> TrainResult:
    """Train on prepared trials.

    Parameters
    ----------
    cfg : TrainConfig
    trials : list of PreparedTrial
        Training data only; normalization statistics are fit on these.
    out_dir : path, optional
        Where ``train_log.csv`` and checkpoints go. Nothing is written if None.
    resume : path, optional
        Checkpoint to continue from. Its optimizer state and step counter are
        restored, so the cosine schedule continues where it stopped.
    stop_epoch : int, optional
        Stop after this many completed epochs (the schedule still spans
        ``cfg.epochs``); used for split runs.
    progress : callable, optional
        Called as ``progress(epoch, mean_loss)`` after each epoch.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss or gradient. When ``out_dir`` is set the
        parameters from before the failing step are saved first.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no training trials")
    X = _stack(trials, "windows")
    terms = FrameTerms.concat(t.terms for t in trials)
    gain = _stack(trials, "force_gain")
    labels = _stack(trials, "labels")
    if cfg.mode == "supervised" and labels is None:
        raise ValueError("supervised training needs reference activations for every trial")
    n_muscles = terms.gains.shape[2]
    fmax = np.max(gain, axis=0) + 1e-12

    n = len(X)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        net_cfg, params, arrays, meta = net.load_checkpoint(resume)
        saved = TrainConfig.from_dict(meta["train_config"])
        if saved.replace(epochs=cfg.epochs) != cfg.replace(epochs=cfg.epochs):
            log.warning("resuming with a configuration that differs from the checkpoint's")
        stats = dat.NormStats(arrays["norm/mean"], arrays["norm/std"])
        names = list(params)
        optim = ad.OptimState(m=[arrays[f"opt/m/{k}"] for k in names], v=[arrays[f"opt/v/{k}"] for k in names],
                              step=int(meta["step"]), base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                              total_steps=cfg.epochs * steps_per_epoch, floor_frac=cfg.lr_floor)
        start_epoch = int(meta["epoch"])
    else:
        net_cfg = cfg.net_config(n_muscles)
        params = net.init_params(net_cfg, cfg.seed)
        stats = dat.fit_norm_stats(X) if cfg.normalize else _identity_stats(X.shape[-1])
        optim = ad.OptimState.for_params(list(params.values()), base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                                         total_steps=cfg.epochs * steps_per_epoch, floor_frac=cfg.lr_floor)
        start_epoch = 0
    if net_cfg.n_muscles != n_muscles:
        raise ValueError(f"network predicts {net_cfg.n_muscles} muscles, data has {n_muscles}")

    Xn = dat.normalize(stats, X)
    plist = list(params.values())
    end_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    rows, checkpoints, pending = [], [], []
    log_path = out / "train_log.csv" if out is not None else None
    if log_path is not None and resume is None:
        write_log_csv([], log_path)

    for epoch in range(start_epoch, end_epoch):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            t0 = time.perf_counter()
            drop_rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            with ad.Tape() as tape:
                pred = net.backbone_forward(net_cfg, params, Xn[idx], rng=drop_rng)
                parts, objective, l_sup = _batch_loss(
                    cfg, pred, terms.take(idx), None if labels is None else labels[idx], gain[idx], fmax)
            value = float(objective.data)
            try:
                if not math.isfinite(value):
                    raise ad.NonFiniteGradientError(f"non-finite loss {value} at step {optim.step}")
                grads = tape.backward(objective, plist)
                lr = ad.adam_step(optim, plist, grads)
            except ad.NonFiniteGradientError as exc:
                ck = None
                if out is not None:
                    ck = _save(out / "last_good.npz", cfg, net_cfg, params, stats, optim, epoch,
                               {"diverged_at_step": optim.step})
                    rows_to_disk(log_path, pending)
                raise TrainingDivergedError(str(exc), ck) from exc
            total += value
            row = {"step": optim.step, "epoch": epoch + 1, "lr": lr, "l_d": parts.l_d, "l_p": parts.l_p,
                   "l_b": parts.l_b, "l_sup": l_sup, "l_total": value,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            rows.append(row)
            pending.append(row)
        if progress is not None:
            progress(epoch + 1, total / steps_per_epoch)
        done = epoch + 1
        if out is not None and (done % cfg.checkpoint_every == 0 or done == end_epoch):
            checkpoints.append(_save(out / f"epoch_{done:04d}.npz", cfg, net_cfg, params, stats, optim, done))
            rows_to_disk(log_path, pending)
            pending = []

    if out is not None and start_epoch >= end_epoch:
        checkpoints.append(_save(out / f"epoch_{end_epoch:04d}.npz", cfg, net_cfg, params, stats, optim, end_epoch))
    return TrainResult(cfg, net_cfg, params, stats, rows, checkpoints, optim)


# -- logs ------------------------------------------------------------------------

def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})


def rows_to_disk(path, rows) -> None:
    """Append rows to an existing log file."""
    if path is None or not rows:
        return
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list                 # per-muscle metric dicts (see data.metric_rows)
    predictions: list          # per trial, (W, N) clamped activations
    forces: list               # per trial, (W, N) forces from the muscle model
    latency: dict = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        vals = [r["mean"] for r in self.rows if r["metric"] == metric and np.isfinite(r["mean"])]
        return float(np.mean(vals)) if vals else math.nan

    def per_muscle(self, metric: str) -> dict:
        return {r["muscle"]: r["mean"] for r in self.rows if r["metric"] == metric}

    def summary(self) -> dict:
        return {k: self.mean(k) for k in ("activation_r2", "activation_nrmse", "force_r2", "force_nrmse")}


def evaluate(net_cfg: net.NetConfig, params: dict, stats: dat.NormStats, trials, names,
             latency_repeats: int = 20) -> EvalReport:
    """Metrics of clamped predictions against each trial's reference labels.

    Forces come from passing the clamped activations through the muscle
    model at the trial's own kinematics.
    """
    trials = list(trials)
    preds, forces = [], []
    for t in trials:
        a = net.predict(net_cfg, params, dat.normalize(stats, t.windows), clamp=True)
        preds.append(a)
        forces.append(t.forces(a))
    if any(t.labels is None for t in trials):
        raise ValueError("evaluation needs reference activations for every trial")
    if trials and trials[0].labels.shape[1] != len(names):
        raise ValueError(f"labels have {trials[0].labels.shape[1]} muscles, names list {len(names)}")
    rows = dat.metric_rows([t.labels for t in trials], preds, names, "activation")
    if all(t.force_labels is not None for t in trials):
        rows += dat.metric_rows([t.force_labels for t in trials], forces, names, "force")
    latency = {}
    if latency_repeats and trials:
        latency = measure_latency(net_cfg, params, dat.normalize(stats, trials[0].windows[0]), latency_repeats)
    return EvalReport(rows, preds, forces, latency)


def measure_latency(net_cfg: net.NetConfig, params: dict, window, repeats: int = 20) -> dict:
    """Wall time of single-window inference in milliseconds (after one warm-up)."""
    x = np.asarray(window, dtype=float)[None]
    net.predict(net_cfg, params, x)
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        net.predict(net_cfg, params, x)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    return {"median_ms": float(np.median(times)), "p95_ms": float(np.percentile(times, 95)),
            "max_ms": float(times.max()), "budget_ms": LATENCY_BUDGET_MS,
            "within_budget": bool(np.median(times) < LATENCY_BUDGET_MS)}


def write_eval_outputs(out_dir, trials, report: EvalReport, names) -> list[Path]:
    """Write ``metrics.csv`` plus, per trial, ``predictions/<trial>.csv`` and
    ``reference/<trial>.csv`` in the labels schema at the window end frames."""
    out = Path(out_dir)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "reference").mkdir(parents=True, exist_ok=True)
    dat.write_metrics_csv(report.rows, out / "metrics.csv")
    written = [out / "metrics.csv"]
    for t, a, f in zip(trials, report.predictions, report.forces):
        ref_f = t.force_labels if t.force_labels is not None else np.full_like(f, np.nan)
        for sub, acts, frc in (("predictions", a, f), ("reference", t.labels, ref_f)):
            path = out / sub / f"{t.name}.csv"
            dat.write_labels_csv(path, t.time, acts, frc, names)
            written.append(path)
    return written


def read_eval_traces(eval_dir) -> dict:
    """Trial name -> (time, predicted a, predicted F, reference a, reference F, names)."""
    eval_dir = Path(eval_dir)
    out = {}
    for path in sorted((eval_dir / "predictions").glob("*.csv")):
        t, a, f, names = dat.read_labels_csv(path)
        _, ra, rf, _ = dat.read_labels_csv(eval_dir / "reference" / path.name)
        out[path.stem] = (t, a, f, ra, rf, names)
    return out


# -- ablations -------------------------------------------------------------------

LOSS_VARIANTS = {
    "full": {},
    "no_lb": {"w_b": 0.0},
    "no_lp": {"w_p": 0.0},
    "no_ld": {"w_d": 0.0},
}


def ablation_suite(cfg: TrainConfig, train, test, names, variants=tuple(LOSS_VARIANTS),
                   backbones=net.BACKBONES, out_dir=None, progress=None) -> list[dict]:
    """Loss-term ablations on ``cfg.backbone`` plus full-loss runs of every backbone.

    Each row carries the variant, backbone, mean/sd across muscles of the
    held-out activation R^2, mean activation NRMSE and force R^2, and the
    mean clamped activation level.
    """
    runs = [(v, cfg.backbone) for v in variants]
    runs += [("full", b) for b in backbones if ("full", b) not in runs]
    rows = []
    for variant, backbone in runs:
        run_cfg = cfg.replace(backbone=backbone, **LOSS_VARIANTS[variant])
        sub = None if out_dir is None else Path(out_dir) / f"{variant}_{backbone}"
        if progress is not None:
            progress(f"{variant}/{backbone}")
        res = train_run(run_cfg, train, sub)
        rep = evaluate(res.net_config, res.params, res.stats, test, names, latency_repeats=0)
        rows.append(ablation_row(variant, backbone, rep))
    return rows


def ablation_row(variant: str, backbone: str, report: EvalReport) -> dict:
    """One ablation table row from a held-out evaluation."""
    r2 = np.array(list(report.per_muscle("activation_r2").values()), dtype=float)
    return {
        "variant": variant, "backbone": backbone,
        "activation_r2": float(np.nanmean(r2)), "activation_r2_sd": float(np.nanstd(r2)),
        "activation_nrmse": report.mean("activation_nrmse"), "force_r2": report.mean("force_r2"),
        "mean_activation": float(np.mean(np.concatenate(report.predictions))),
    }


ABLATION_FIELDS = ("variant", "backbone", "activation_r2", "activation_r2_sd", "activation_nrmse",
                   "force_r2", "mean_activation")


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k in ("variant", "backbone") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]
