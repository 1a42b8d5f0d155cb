"""Physics-informed training objective and the supervised alternative.

The dynamics residual compares the torque the rigid-body model needs at a
frame with the torque the muscles deliver at the predicted activations.
Because muscle force is affine in activation at fixed kinematics, each
frame reduces to a (3, N) gain matrix and a passive torque, both
precomputed once per dataset; see :class:`FrameTerms`.

All losses accept either numpy arrays or :class:`~mskpinn.autodiff.Tensor`
predictions and return a scalar Tensor, so the same code serves training
(under a tape) and plain evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .muscle import MuscleSet, muscle_kinematics
from .oracle import ACT_MAX, ACT_MIN

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "FrameTerms",
    "frame_terms_for",
    "dynamics_loss",
    "dynamics_loss_terms",
    "performance_loss",
    "boundary_loss",
    "total_loss",
    "physics_loss",
    "supervised_mse",
    "penalized_optimum",
]


@dataclass(frozen=True)
class LossWeights:
    w_d: float = 3.0
    w_p: float = 1000.0
    w_b: float = 500.0

    def __post_init__(self):
        if min(self.w_d, self.w_p, self.w_b) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass
class LossBreakdown:
    """Component values of one evaluation.

    ``total`` keeps the graph for backpropagation; the float fields are
    detached copies for logging. ``joint_residual`` is the RMS torque
    residual per joint, N m.
    """

    l_d: float
    l_p: float
    l_b: float
    l_total: float
    total: ad.Tensor = field(repr=False)
    joint_residual: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class FrameTerms:
    """Affine torque model per frame: tau_muscle(a) = gains @ a + passive."""

    required: np.ndarray   # (T, 3) M qdd + C qd + G - tau_grf
    gains: np.ndarray      # (T, 3, N)
    passive: np.ndarray    # (T, 3)

    def __post_init__(self):
        T = self.required.shape[0]
        if self.gains.shape[0] != T or self.passive.shape[0] != T:
            raise ValueError("frame terms have mismatched lengths")

    def __len__(self):
        return self.required.shape[0]

    @property
    def target(self) -> np.ndarray:
        """Torque the activation-dependent part has to supply."""
        return self.required - self.passive

    def take(self, idx) -> "FrameTerms":
        return FrameTerms(self.required[idx], self.gains[idx], self.passive[idx])

    @classmethod
    def concat(cls, parts) -> "FrameTerms":
        parts = list(parts)
        return cls(np.concatenate([p.required for p in parts]),
                   np.concatenate([p.gains for p in parts]),
                   np.concatenate([p.passive for p in parts]))


def frame_terms_for(model: dyn.LimbModel, muscles: MuscleSet, states: dyn.JointState,
                    grf: dyn.GrfSample | None, dt: float, prev_fiber=None) -> FrameTerms:
    """Frame terms for consecutive samples spaced ``dt`` apart.

    GRF torques enter only where ``grf`` marks contact; ``grf=None`` means
    swing throughout.
    """
    required = dyn.required_torques(model, states, grf)
    mk = muscle_kinematics(muscles, states.q, dt, prev_fiber)
    return FrameTerms(np.atleast_2d(required), mk.torque_gains, mk.passive_torque)


def _residual(pred, terms: FrameTerms):
    a = ad.as_tensor(pred)
    if a.ndim != 2 or a.shape[0] != len(terms) or a.shape[1] != terms.gains.shape[2]:
        raise ValueError(f"predictions {a.shape} do not align with {len(terms)} frames "
                         f"of {terms.gains.shape[2]} muscles")
    delivered = ad.reshape(ad.matmul(ad.Tensor(terms.gains), ad.reshape(a, a.shape + (1,))), (a.shape[0], 3))
    return ad.Tensor(terms.target) - delivered


def dynamics_loss_terms(pred, terms: FrameTerms) -> ad.Tensor:
    """Mean over frames of the squared joint-torque residual norm, (N m)^2."""
    r = _residual(pred, terms)
    return ad.mean(ad.sum(ad.square(r), axis=1))


def dynamics_loss(model: dyn.LimbModel, muscles: MuscleSet, pred, states: dyn.JointState,
                  grf: dyn.GrfSample | None, dt: float, prev_fiber=None) -> ad.Tensor:
    """Dynamics residual evaluated directly from kinematics and GRF records."""
    return dynamics_loss_terms(pred, frame_terms_for(model, muscles, states, grf, dt, prev_fiber))


def performance_loss(pred) -> ad.Tensor:
    """Mean over frames of the summed squared activations."""
    a = ad.as_tensor(pred)
    return ad.mean(ad.sum(ad.square(a), axis=-1))


def boundary_loss(pred, lo: float = ACT_MIN, hi: float = ACT_MAX) -> ad.Tensor:
    """Mean over frames of squared excursions outside [lo, hi], summed over muscles."""
    a = ad.as_tensor(pred)
    below = ad.maximum(lo - a, 0.0)
    above = ad.maximum(a - hi, 0.0)
    return ad.mean(ad.sum(ad.square(below) + ad.square(above), axis=-1))


def total_loss(weights: LossWeights, l_d, l_p, l_b, joint_residual=None) -> LossBreakdown:
    """Weighted sum; zero-weighted terms are left out of the graph entirely."""
    parts = [(weights.w_d, ad.as_tensor(l_d)), (weights.w_p, ad.as_tensor(l_p)), (weights.w_b, ad.as_tensor(l_b))]
    total = ad.Tensor(0.0)
    for w, part in parts:
        if w:
            total = total + part * w
    return LossBreakdown(float(ad.as_tensor(l_d).data), float(ad.as_tensor(l_p).data), float(ad.as_tensor(l_b).data),
                         float(total.data), total,
                         np.zeros(3) if joint_residual is None else np.asarray(joint_residual))


def physics_loss(pred, terms: FrameTerms, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """All three components on one batch, combined."""
    r = _residual(pred, terms)
    l_d = ad.mean(ad.sum(ad.square(r), axis=1))
    rms = np.sqrt(np.mean(r.data ** 2, axis=0))
    return total_loss(weights, l_d, performance_loss(pred), boundary_loss(pred), rms)


def supervised_mse(pred, labels) -> ad.Tensor:
    a = ad.as_tensor(pred)
    labels = np.asarray(labels, dtype=float)
    if a.shape != labels.shape:
        raise ValueError(f"predictions {a.shape} and labels {labels.shape} differ in shape")
    return ad.mean(ad.square(a - labels))


def penalized_optimum(terms: FrameTerms, weights: LossWeights = LossWeights(),
                      lo: float = ACT_MIN, hi: float = ACT_MAX, max_iter: int = 100) -> np.ndarray:
    """Per-frame activations minimizing the weighted physics loss exactly.

    The objective is a convex piecewise quadratic, so a semismooth Newton
    iteration on the set of bound-violating muscles terminates once that
    set stops changing. No predictor can score lower on the physics loss,
    which makes this the reference point for what the loss rewards.
    """
    T, _, N = terms.gains.shape
    out = np.empty((T, N))
    eye = np.eye(N)
    for t in range(T):
        G, b = terms.gains[t], terms.target[t]
        H0 = weights.w_d * G.T @ G + weights.w_p * eye
        g0 = weights.w_d * G.T @ b
        below = np.zeros(N, bool)
        above = np.zeros(N, bool)
        for _ in range(max_iter):
            d = weights.w_b * (below | above)
            a = np.linalg.solve(H0 + np.diag(d), g0 + weights.w_b * (lo * below + hi * above))
            nb, na = a < lo, a > hi
            if np.array_equal(nb, below) and np.array_equal(na, above):
                break
            below, above = nb, na
        else:
            raise RuntimeError(f"penalized optimum did not settle at frame {t}")
        out[t] = a
    return out
