"""Trajectory records, CSV ingestion, windowing, normalization, splits and metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn

log = logging.getLogger(__name__)

__all__ = [
    "JointTrajectory",
    "differentiate",
    "trajectory_states",
    "trajectory_grf",
    "read_trajectory_csv",
    "write_trajectory_csv",
    "read_labels_csv",
    "write_labels_csv",
    "WINDOW",
    "STRIDE",
    "make_windows",
    "window_features",
    "NormStats",
    "fit_norm_stats",
    "normalize",
    "denormalize",
    "DatasetSplit",
    "split_trials",
    "r_squared",
    "nrmse",
    "metric_rows",
    "write_metrics_csv",
    "read_metrics_csv",
]

WINDOW = 20
STRIDE = 2
JOINTS = ("hip", "knee", "ankle")
GRID_JITTER = 1e-9


@dataclass
class JointTrajectory:
    """Uniformly sampled hip/knee/ankle angles plus force-plate records.

    ``qdot``/``qddot`` may be None until :func:`differentiate` fills them.
    ``force_plate`` and ``cop_plate`` are (T, 2) in the plate frame;
    ``contact`` is a (T,) bool stance flag.
    """

    time: np.ndarray
    q: np.ndarray
    qdot: np.ndarray | None = None
    qddot: np.ndarray | None = None
    force_plate: np.ndarray | None = None
    cop_plate: np.ndarray | None = None
    contact: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 3)
        T = len(self.time)
        if self.q.shape[0] != T:
            raise ValueError("time and q lengths differ")
        if T >= 2:
            steps = np.diff(self.time)
            if np.any(steps <= 0):
                raise ValueError("time must be strictly increasing")
            if np.max(np.abs(steps - steps.mean())) > GRID_JITTER:
                raise ValueError("time grid is not uniform (missing frames are not interpolated)")
        for name in ("qdot", "qddot"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float).reshape(T, 3))
        self.force_plate = np.zeros((T, 2)) if self.force_plate is None else np.asarray(self.force_plate, float).reshape(T, 2)
        self.cop_plate = np.zeros((T, 2)) if self.cop_plate is None else np.asarray(self.cop_plate, float).reshape(T, 2)
        self.contact = (dyn.in_stance(self.force_plate) if self.contact is None
                        else np.asarray(self.contact, dtype=bool).reshape(T))
        arrays = [self.time, self.q, self.force_plate, self.cop_plate]
        arrays += [a for a in (self.qdot, self.qddot) if a is not None]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("trajectory contains non-finite values")

    def __len__(self):
        return len(self.time)

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0])

    @property
    def condition(self) -> str:
        return str(self.metadata.get("condition", ""))


def differentiate(traj: JointTrajectory, force: bool = False) -> JointTrajectory:
    """Fill missing velocities and accelerations by finite differences.

    Central differences inside, second-order one-sided stencils at both ends.
    Existing derivative columns are kept unless ``force``.
    """
    if len(traj) < 3:
        raise ValueError("differentiation needs at least 3 frames")
    qd = traj.qdot if traj.qdot is not None and not force else np.gradient(traj.q, traj.dt, axis=0, edge_order=2)
    qdd = traj.qddot if traj.qddot is not None and not force else np.gradient(qd, traj.dt, axis=0, edge_order=2)
    return JointTrajectory(traj.time, traj.q, qd, qdd, traj.force_plate, traj.cop_plate,
                           traj.contact, dict(traj.metadata))


def trajectory_states(traj: JointTrajectory) -> dyn.JointState:
    if traj.qdot is None or traj.qddot is None:
        traj = differentiate(traj)
    return dyn.JointState(traj.q, traj.qdot, traj.qddot)


def trajectory_grf(traj: JointTrajectory) -> dyn.GrfSample:
    return dyn.GrfSample(traj.force_plate, traj.cop_plate, traj.contact)


# -- CSV ----------------------------------------------------------------------

def _read_comment_header(fh):
    meta, lines = {}, []
    for line in fh:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k.strip()] = v.strip()
        else:
            lines.append(line)
    return meta, lines


def read_trajectory_csv(path) -> JointTrajectory:
    """Read the trajectory schema.

    Columns: time, q_hip, q_knee, q_ankle, optional qd_* / qdd_*, grf_fx,
    grf_fy, cop_x, cop_y, contact. A ``# degrees=true`` comment line marks
    angles (and their derivatives) in degrees; other ``key=value`` comment
    tokens become metadata.
    """
    with open(path, newline="") as fh:
        meta, lines = _read_comment_header(fh)
    rows = list(csv.DictReader(lines))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    cols = rows[0].keys()
    required = ["time", *(f"q_{j}" for j in JOINTS)]
    missing = [c for c in required if c not in cols]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")

    def col(name):
        try:
            return np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad value in column {name}") from exc

    def block(prefix):
        names = [f"{prefix}_{j}" for j in JOINTS]
        if all(n in cols for n in names):
            return np.stack([col(n) for n in names], axis=1)
        return None

    scale = math.pi / 180 if meta.get("degrees", "false").lower() == "true" else 1.0
    q = block("q") * scale
    qd, qdd = block("qd"), block("qdd")
    qd = None if qd is None else qd * scale
    qdd = None if qdd is None else qdd * scale
    zeros = np.zeros(len(rows))
    grf = np.stack([col(c) if c in cols else zeros for c in ("grf_fx", "grf_fy")], axis=1)
    cop = np.stack([col(c) if c in cols else zeros for c in ("cop_x", "cop_y")], axis=1)
    contact = None
    if "contact" in cols:
        contact = np.array([r["contact"].strip().lower() in ("1", "true", "yes") for r in rows])
    meta.pop("degrees", None)
    return JointTrajectory(col("time"), q, qd, qdd, grf, cop, contact, meta)


def write_trajectory_csv(traj: JointTrajectory, path, derivatives: bool = True) -> None:
    header = ["time", *(f"q_{j}" for j in JOINTS)]
    blocks = [traj.time[:, None], traj.q]
    if derivatives and traj.qdot is not None and traj.qddot is not None:
        header += [f"qd_{j}" for j in JOINTS] + [f"qdd_{j}" for j in JOINTS]
        blocks += [traj.qdot, traj.qddot]
    header += ["grf_fx", "grf_fy", "cop_x", "cop_y"]
    blocks += [traj.force_plate, traj.cop_plate]
    data = np.concatenate(blocks, axis=1)
    with open(path, "w", newline="") as fh:
        if traj.metadata:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in traj.metadata.items()) + "\n")
        w = csv.writer(fh)
        w.writerow(header + ["contact"])
        for row, c in zip(data, traj.contact):
            w.writerow([repr(float(v)) for v in row] + [int(c)])


def write_labels_csv(path, time, activations, forces, names) -> None:
    """Labels and predictions share this layout: time, a_<name>..., f_<name>..."""
    activations = np.asarray(activations)
    forces = np.asarray(forces)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *(f"a_{n}" for n in names), *(f"f_{n}" for n in names)])
        for t, a, f in zip(time, activations, forces):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in a), *(repr(float(v)) for v in f)])


def read_labels_csv(path):
    """Return ``(time, activations, forces, names)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    names = [h[2:] for h in header if h.startswith("a_")]
    n = len(names)
    if header[0] != "time" or len(header) != 1 + 2 * n or [h[2:] for h in header[1 + n:]] != names:
        raise ValueError(f"{path}: not a labels file")
    data = data.reshape(-1, 1 + 2 * n)
    return data[:, 0], data[:, 1:1 + n], data[:, 1 + n:], names


# -- windows and normalization -------------------------------------------------

def window_features(traj: JointTrajectory) -> np.ndarray:
    """(T, 9) features ordered joint-major: q, qd, qdd for hip, knee, ankle."""
    if traj.qdot is None or traj.qddot is None:
        traj = differentiate(traj)
    return np.stack([traj.q, traj.qdot, traj.qddot], axis=-1).reshape(len(traj), 9)


def make_windows(traj_or_features, window: int = WINDOW, stride: int = STRIDE):
    """Sliding windows starting at frame 0.

    Returns ``(windows, end_frames)`` with windows (W, window, 9); each
    window is paired with its last frame.
    """
    x = traj_or_features
    if isinstance(x, JointTrajectory):
        x = window_features(x)
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    if T < window:
        raise ValueError(f"trajectory has {T} frames, fewer than the window size {window}")
    starts = np.arange(0, T - window + 1, stride)
    idx = starts[:, None] + np.arange(window)
    return x[idx], starts + window - 1


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def as_dict(self):
        return {"norm_mean": self.mean, "norm_std": self.std}


def fit_norm_stats(windows) -> NormStats:
    """Per-channel statistics over every frame of the training windows."""
    flat = np.asarray(windows).reshape(-1, np.shape(windows)[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    flat_ch = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(flat_ch):
        log.warning("zero-variance input channels %s use a unit divisor", np.flatnonzero(flat_ch).tolist())
        std = np.where(flat_ch, 1.0, std)
    return NormStats(mean, std)


def normalize(stats: NormStats, x):
    return (np.asarray(x) - stats.mean) / stats.std


def denormalize(stats: NormStats, z):
    return np.asarray(z) * stats.std + stats.mean


# -- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    """Trial-level train/test partition.

    ``intra``: within every condition, a seeded shuffle sends
    ``train_frac`` of that condition's trials to training. ``loso_condition``: every trial tagged ``held_out`` is test.
    """

    mode: str = "intra"
    held_out: str = ""
    seed: int = 0
    train_frac: float = 0.8

    def __post_init__(self):
        if self.mode not in ("intra", "loso_condition"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "loso_condition" and not self.held_out:
            raise ValueError("loso_condition needs a held-out condition tag")


def split_trials(conditions, split: DatasetSplit):
    """Return (train, test) trial index arrays for trials with the given condition tags."""
    n = len(conditions)
    if split.mode == "loso_condition":
        test = np.array([i for i, c in enumerate(conditions) if str(c) == split.held_out], dtype=int)
        if test.size == 0:
            raise ValueError(f"no trials with condition {split.held_out!r}")
    else:
        # stratified: each condition contributes train_frac of its own trials
        rng = np.random.default_rng(split.seed)
        tags = np.array([str(c) for c in conditions])
        test = []
        for tag in sorted(set(tags)):
            members = np.flatnonzero(tags == tag)
            if members.size < 2:
                continue
            order = rng.permutation(members)
            n_train = min(members.size - 1, max(1, int(round(split.train_frac * members.size))))
            test.extend(order[n_train:])
        if not test:
            raise ValueError("an intra split needs some condition with at least two trials")
        test = np.sort(np.array(test, dtype=int))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


# -- metrics --------------------------------------------------------------------

def r_squared(actual, predicted) -> float:
    """1 - SSE/SST; NaN (with a warning) when ``actual`` is constant."""
    y = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if y.shape != p.shape or y.size < 2:
        raise ValueError("r_squared needs equal-length inputs of at least 2 samples")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        log.warning("R^2 undefined for a constant reference signal")
        return math.nan
    return 1.0 - float(np.sum((y - p) ** 2)) / sst


def nrmse(actual, predicted) -> float:
    """RMSE divided by the reference range; NaN (with a warning) for zero range."""
    y = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if y.shape != p.shape or y.size < 1:
        raise ValueError("nrmse needs equal-length inputs")
    rng = float(y.max() - y.min())
    if rng == 0.0:
        log.warning("NRMSE undefined for a zero-range reference signal")
        return math.nan
    return math.sqrt(float(np.mean((y - p) ** 2))) / rng


def metric_rows(actual_trials, predicted_trials, names, quantity="activation"):
    """Per-muscle R^2 and NRMSE per trial, summarized as mean and sd across trials.

    Rows are dicts with keys muscle, metric, mean, sd, n. Undefined
    per-trial values are skipped and counted out of ``n``.
    """
    rows = []
    for m, name in enumerate(names):
        for metric, fn in (("r2", r_squared), ("nrmse", nrmse)):
            vals = np.array([fn(a[:, m], p[:, m]) for a, p in zip(actual_trials, predicted_trials)])
            vals = vals[np.isfinite(vals)]
            rows.append({"muscle": name, "metric": f"{quantity}_{metric}",
                         "mean": float(vals.mean()) if vals.size else math.nan,
                         "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else math.nan,
                         "n": int(vals.size)})
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["muscle", "metric", "mean", "sd", "n"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean": repr(r["mean"]), "sd": repr(r["sd"])})


def read_metrics_csv(path):
    with open(Path(path), newline="") as fh:
        return [{"muscle": r["muscle"], "metric": r["metric"], "mean": float(r["mean"]),
                 "sd": float(r["sd"]), "n": int(r["n"])} for r in csv.DictReader(fh)]
