"""Reference solutions independent of the learned model.

* :func:`so_solve_frame` - per-frame static optimization (min sum a^2 subject
  to torque equilibrium and activation bounds) by a primal active-set method.
* :func:`so_trajectory` - the same, chained along a trajectory.
* :func:`synth_gait` - forward-dynamics gait generator whose stored
  kinematics reproduce the applied muscle torques exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .muscle import MuscleSet, muscle_kinematics

log = logging.getLogger(__name__)

__all__ = [
    "ACT_MIN",
    "ACT_MAX",
    "SoProblem",
    "SoResult",
    "so_solve_frame",
    "so_trajectory",
    "SoTrajectoryResult",
    "ExcitationSpec",
    "GaitReference",
    "GrfProfile",
    "CONDITIONS",
    "synth_gait",
    "synth_cycles",
    "SynthResult",
    "IntegrationDivergenceError",
]

ACT_MIN = 0.01
ACT_MAX = 1.0


# ---------------------------------------------------------------------------
# static optimization
# ---------------------------------------------------------------------------

@dataclass
class SoProblem:
    """Torque balance ``gains @ a + passive = required`` with ``lo <= a <= hi``.

    ``gains`` is (n_joints, n_muscles): column n holds muscle n's torque per
    unit activation, R_n * F_iso f_a f_v cos(phi).
    """

    required: np.ndarray
    gains: np.ndarray
    passive: np.ndarray | None = None
    lo: float = ACT_MIN
    hi: float = ACT_MAX

    def __post_init__(self):
        self.gains = np.atleast_2d(np.asarray(self.gains, dtype=float))
        self.required = np.atleast_1d(np.asarray(self.required, dtype=float))
        self.passive = (np.zeros_like(self.required) if self.passive is None
                        else np.atleast_1d(np.asarray(self.passive, dtype=float)))
        if not (np.all(np.isfinite(self.gains)) and np.all(np.isfinite(self.required))
                and np.all(np.isfinite(self.passive))):
            raise ValueError("static-optimization inputs must be finite")
        if not self.lo < self.hi:
            raise ValueError("activation bounds need lo < hi")


@dataclass
class SoResult:
    activations: np.ndarray
    feasible: bool
    violation: float      # ||gains a + passive - required||
    kkt_residual: float
    iterations: int


def _row_space(A, rtol=1e-12):
    """Orthonormal basis of range(A^T), columns."""
    if A.shape[1] == 0:
        return np.zeros((0, 0))
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size else 0
    return vt[:rank].T


def bounded_lsq(K, y, lb, ub, x0=None, max_iter=None):
    """min |K x - y|^2 subject to lb <= x <= ub (entries may be infinite).

    Primal active set: minimize over the free face with a minimum-norm
    step, stop at the first bound hit, and release the bound whose gradient
    sign is most wrong once the face is optimal. Works for rank-deficient and
    underdetermined ``K``.

    Returns ``(x, iterations)``.
    """
    K = np.atleast_2d(np.asarray(K, float))
    y = np.asarray(y, float)
    n = K.shape[1]
    lb = np.broadcast_to(np.asarray(lb, float), (n,))
    ub = np.broadcast_to(np.asarray(ub, float), (n,))
    x = np.zeros(n) if x0 is None else np.asarray(x0, float).copy()
    x = np.clip(np.where(np.isfinite(x), x, 0.0), lb, ub)
    at_lo = np.isfinite(lb) & (x <= lb)
    at_hi = np.isfinite(ub) & (x >= ub) & ~at_lo
    scale = max(1.0, float(np.linalg.norm(y)), float(np.linalg.norm(K)) * max(1.0, float(np.max(np.abs(x), initial=0.0))))
    tol = 1e-13 * scale
    max_iter = max_iter or 30 * (n + 1)
    for it in range(1, max_iter + 1):
        r = K @ x - y
        free = ~(at_lo | at_hi)
        p = np.zeros(n)
        if np.any(free):
            p[free] = -np.linalg.lstsq(K[:, free], r, rcond=None)[0]
        if np.linalg.norm(K @ p) <= tol:
            g = K.T @ r
            wrong = np.where(at_lo, -g, 0.0) + np.where(at_hi, g, 0.0)
            j = int(np.argmax(wrong))
            if wrong[j] <= tol * max(1.0, float(np.linalg.norm(K[:, j]))):
                return x, it
            at_lo[j] = at_hi[j] = False
            # move the released variable off its bound along the descent direction
            step = -g[j] / max(float(K[:, j] @ K[:, j]), 1e-300)
            x[j] = np.clip(x[j] + step, lb[j], ub[j])
            continue
        alpha, block, to_hi = 1.0, -1, False
        for i in np.flatnonzero(free):
            if p[i] < 0 and np.isfinite(lb[i]):
                t = (lb[i] - x[i]) / p[i]
                if t < alpha:
                    alpha, block, to_hi = t, i, False
            elif p[i] > 0 and np.isfinite(ub[i]):
                t = (ub[i] - x[i]) / p[i]
                if t < alpha:
                    alpha, block, to_hi = t, i, True
        x = x + max(alpha, 0.0) * p
        if block >= 0:
            if to_hi:
                x[block], at_hi[block] = ub[block], True
            else:
                x[block], at_lo[block] = lb[block], True
        x = np.clip(x, lb, ub)
    log.warning("bounded least squares iteration limit reached")
    return x, max_iter


def _kkt(a, c, A, lo, hi, at_lo, at_hi):
    """Multipliers and scaled KKT residual for min 1/2|a-c|^2, A a = b, box.

    Stationarity a - c = A^T lam + mu_lo - mu_hi is fitted with mu >= 0 on
    the active bounds only, so a zero residual certifies optimality even
    when the free columns of A are rank deficient.
    """
    g = a - c
    lo_idx = np.flatnonzero(at_lo)
    hi_idx = np.flatnonzero(at_hi)
    n, m = g.size, A.shape[0]
    E = np.zeros((n, lo_idx.size + hi_idx.size))
    E[lo_idx, np.arange(lo_idx.size)] = 1.0
    E[hi_idx, lo_idx.size + np.arange(hi_idx.size)] = -1.0
    K = np.hstack([A.T, E])
    if K.shape[1] == 0:
        lam, mu, resid = np.zeros(0), np.zeros(0), g
    else:
        lb = np.r_[np.full(m, -np.inf), np.zeros(E.shape[1])]
        sol, _ = bounded_lsq(K, g, lb, np.inf)
        lam, mu = sol[:m], sol[m:]
        resid = g - K @ sol
    scale = max(1.0, float(np.max(np.abs(g), initial=0.0)))
    return lam, mu, float(np.max(np.abs(resid), initial=0.0)) / scale


def _drop_candidate(a, c, A, at_lo, at_hi):
    """Active bound whose sign-free multiplier most strongly asks to leave."""
    g = a - c
    act = np.flatnonzero(at_lo | at_hi)
    K = np.hstack([A.T, np.eye(g.size)[:, act]])
    sol = np.linalg.lstsq(K, g, rcond=None)[0]
    mu = sol[A.shape[0]:]
    # at a lower bound the multiplier must be >= 0, at an upper bound <= 0
    wrong = np.where(at_lo[act], -mu, mu)
    k = int(np.argmax(wrong))
    return int(act[k]) if wrong[k] > 0 else int(act[np.argmax(np.abs(mu))])


def _active_set(A, b, c, lo, hi, a0, tol=1e-12, max_iter=None):
    """Primal active-set for min 1/2|a - c|^2 s.t. A a = b, lo <= a <= hi from feasible a0."""
    n = a0.size
    a = a0.copy()
    at_lo = np.abs(a - lo) <= 1e-12
    at_hi = np.abs(a - hi) <= 1e-12
    a[at_lo] = lo
    a[at_hi] = hi
    max_iter = max_iter or 20 * (n + 1)
    for it in range(1, max_iter + 1):
        free = ~(at_lo | at_hi)
        p = np.zeros(n)
        if np.any(free):
            Q = _row_space(A[:, free])
            gF = a[free] - c[free]
            p[free] = -(gF - Q @ (Q.T @ gF)) if Q.size else -gF
        if np.max(np.abs(p), initial=0.0) <= tol * max(1.0, np.max(np.abs(a))):
            _, _, res = _kkt(a, c, A, lo, hi, at_lo, at_hi)
            if res <= 1e-10 or not np.any(at_lo | at_hi):
                return a, at_lo, at_hi, it
            k = _drop_candidate(a, c, A, at_lo, at_hi)
            at_lo[k] = at_hi[k] = False
            continue
        alpha, block = 1.0, -1
        for i in np.flatnonzero(free):
            if p[i] < 0:
                step = (lo - a[i]) / p[i]
            elif p[i] > 0:
                step = (hi - a[i]) / p[i]
            else:
                continue
            if step < alpha:
                alpha, block = step, i
        a = a + alpha * p
        if block >= 0:
            if p[block] < 0:
                a[block], at_lo[block] = lo, True
            else:
                a[block], at_hi[block] = hi, True
    log.warning("active-set iteration limit reached")
    return a, at_lo, at_hi, max_iter


def _polish(A, b, a, lo, hi, at_lo, at_hi):
    """Least-norm correction of free variables so that A a = b to rounding."""
    free = ~(at_lo | at_hi)
    if not np.any(free) or A.shape[0] == 0:
        return a
    r = b - A @ a
    da = np.linalg.lstsq(A[:, free], r, rcond=None)[0]
    out = a.copy()
    out[free] = np.clip(a[free] + da, lo, hi)
    return out


def solve_box_qp(A, b, lo, hi, center=None, feas_tol=1e-9, check_kkt=True):
    """min 1/2|a - center|^2 s.t. A a = b, lo <= a <= hi (lexicographic if infeasible).

    Returns ``(a, feasible, violation, kkt_residual, iterations)``; the KKT
    residual is NaN when ``check_kkt`` is off.
    """
    A = np.atleast_2d(np.asarray(A, float))
    b = np.atleast_1d(np.asarray(b, float))
    n = A.shape[1]
    c = np.zeros(n) if center is None else np.asarray(center, float)

    # stage 1: closest achievable torque within the box
    if A.shape[0]:
        a1, _ = bounded_lsq(A, b, lo, hi, np.clip(c, lo, hi))
        viol = float(np.linalg.norm(A @ a1 - b))
    else:
        a1, viol = np.clip(c, lo, hi), 0.0
    scale = max(1.0, float(np.linalg.norm(b)))
    feasible = viol <= feas_tol * scale
    target = b if feasible else A @ a1

    # stage 2: effort (distance to center) at that torque
    a, at_lo, at_hi, iters = _active_set(A, target, c, lo, hi, a1)
    a = _polish(A, target, a, lo, hi, at_lo, at_hi)
    at_lo = np.abs(a - lo) <= 1e-12
    at_hi = np.abs(a - hi) <= 1e-12
    kkt = _kkt(a, c, A, lo, hi, at_lo, at_hi)[2] if check_kkt else math.nan
    violation = float(np.linalg.norm(A @ a - b))
    return a, feasible, violation, kkt, iters


def so_solve_frame(problem: SoProblem) -> SoResult:
    """Minimize sum a^2 subject to the frame's torque balance and bounds.

    Infeasible frames get the least torque violation first, then least
    effort among those, and ``feasible=False``.
    """
    a, feasible, viol, kkt, iters = solve_box_qp(
        problem.gains, problem.required - problem.passive, problem.lo, problem.hi)
    return SoResult(a, feasible, viol, kkt, iters)


@dataclass
class SoTrajectoryResult:
    activations: np.ndarray   # (T, N)
    forces: np.ndarray        # (T, N)
    feasible: np.ndarray      # (T,)
    violation: np.ndarray     # (T,)
    kkt_residual: np.ndarray  # (T,)
    required: np.ndarray      # (T, 3)

    @property
    def n_infeasible(self):
        return int(np.sum(~self.feasible))


def frame_terms(model: dyn.LimbModel, muscles: MuscleSet, traj):
    """Required torques and the affine activation-to-torque map for every frame."""
    from .data import trajectory_states, trajectory_grf

    states = trajectory_states(traj)
    tau_req = dyn.required_torques(model, states, trajectory_grf(traj))
    mk = muscle_kinematics(muscles, traj.q, traj.dt)
    return tau_req, mk


def so_trajectory(model: dyn.LimbModel, muscles: MuscleSet, traj) -> SoTrajectoryResult:
    tau_req, mk = frame_terms(model, muscles, traj)
    gains = mk.torque_gains
    passive = mk.passive_torque
    T, N = mk.gain.shape
    acts = np.zeros((T, N))
    feas = np.zeros(T, bool)
    viol = np.zeros(T)
    kkt = np.zeros(T)
    for t in range(T):
        r = so_solve_frame(SoProblem(tau_req[t], gains[t], passive[t]))
        acts[t], feas[t], viol[t], kkt[t] = r.activations, r.feasible, r.violation, r.kkt_residual
    if not np.all(feas):
        log.info("static optimization: %d of %d frames infeasible", int(np.sum(~feas)), T)
    return SoTrajectoryResult(acts, mk.forces(acts), feas, viol, kkt, tau_req)


# ---------------------------------------------------------------------------
# synthetic gait
# ---------------------------------------------------------------------------

class IntegrationDivergenceError(RuntimeError):
    pass


@dataclass
class ExcitationSpec:
    """Per-muscle periodic drive, clipped to the activation bounds.

    e_n(t) = base_n + sum_k amp[n, k] sin(2 pi (k + 1) t / period + phase[n, k])
    """

    base: np.ndarray
    amp: np.ndarray
    phase: np.ndarray
    period: float = 1.0

    def __call__(self, t):
        k = np.arange(1, self.amp.shape[1] + 1)
        arg = 2 * np.pi * np.multiply.outer(np.atleast_1d(t), k) / self.period
        val = self.base + np.einsum("nk,tnk->tn", self.amp, np.sin(arg[:, None, :] + self.phase[None]))
        out = np.clip(val, ACT_MIN, ACT_MAX)
        return out[0] if np.ndim(t) == 0 else out

    @classmethod
    def floor(cls, n, period=1.0):
        return cls(np.full(n, ACT_MIN), np.zeros((n, 1)), np.zeros((n, 1)), period)

    @classmethod
    def random(cls, n, seed=0, period=1.0, base=0.06, amp=0.04, harmonics=2):
        rng = np.random.default_rng(seed)
        return cls(np.full(n, base), rng.uniform(0, amp, (n, harmonics)) / np.arange(1, harmonics + 1),
                   rng.uniform(0, 2 * np.pi, (n, harmonics)), period)


@dataclass
class GaitReference:
    """Periodic joint-angle targets, q_j(phase) = c0 + sum_k A cos(2 pi k (phase - shift))."""

    offset: np.ndarray                       # (3,)
    amp: np.ndarray                          # (3, K)
    shift: np.ndarray                        # (3, K)
    period: float = 1.1

    def __call__(self, t):
        k = np.arange(1, self.amp.shape[1] + 1)
        w = 2 * np.pi * k / self.period
        arg = w * (np.asarray(t)[..., None, None] - self.shift * self.period)
        q = self.offset + np.sum(self.amp * np.cos(arg), axis=-1)
        qd = -np.sum(self.amp * w * np.sin(arg), axis=-1)
        qdd = -np.sum(self.amp * w * w * np.cos(arg), axis=-1)
        return q, qd, qdd

    @classmethod
    def walking(cls, period=1.1, scale=1.0, rng=None):
        offset = np.array([0.12, -0.45, -0.02])
        amp = np.array([[0.32, 0.03], [-0.42, -0.12], [0.10, 0.10]]) * scale
        shift = np.array([[0.95, 0.2], [0.72, 0.15], [0.40, 0.45]])
        if rng is not None:
            amp = amp * rng.normal(1.0, 0.05, amp.shape)
            shift = shift + rng.normal(0.0, 0.01, shift.shape)
        return cls(offset, amp, shift, period)


@dataclass
class GrfProfile:
    """Scripted stance force.

    Magnitude follows two raised-cosine humps bridged by a lower one; the
    COP advances linearly from heel to toe along the foot sole and the force
    points at a pivot near the hip that drifts forward. Both contact points
    lie in front of the ankle since the muscle set cannot dorsiflex.
    """

    stance_frac: float = 0.6
    weight: float = 320.0       # N
    peaks: tuple = (1.0, 0.95)
    valley: float = 0.6
    heel: tuple = (0.03, -0.07)  # foot frame, m
    toe: tuple = (0.15, -0.07)
    pivot_x: tuple = (-0.06, 0.06)

    def magnitude(self, s):
        def hump(c, w):
            u = np.clip(np.abs(s - c) / w, 0.0, 1.0)
            return 0.5 * (1 + np.cos(np.pi * u))
        return self.weight * (self.peaks[0] * hump(0.25, 0.25) + self.valley * hump(0.5, 0.25)
                              + self.peaks[1] * hump(0.75, 0.25))

    def sample(self, model: dyn.LimbModel, q, phase):
        """Plate-frame force and COP plus contact flag for one frame.

        The COP is the sole point of the foot in configuration ``q``, so the
        lever arm about the ankle never leaves the foot.
        """
        s = phase / self.stance_frac
        if s >= 1.0:
            return np.zeros(2), np.zeros(2), False
        theta_foot = float(np.sum(q))
        ankle = dyn.joint_positions(model, q)[2]
        heel, toe = np.array(self.heel), np.array(self.toe)
        cop_w = ankle + dyn._rot(theta_foot, heel + s * (toe - heel))
        pivot = np.array([self.pivot_x[0] + s * (self.pivot_x[1] - self.pivot_x[0]), 0.0])
        direction = (pivot - cop_w) / np.linalg.norm(pivot - cop_w)
        force_w = direction * self.magnitude(s)
        return force_w @ model.plate_matrix, dyn.world_to_plate(model, cop_w), True


# speed tag -> (cycle period s, amplitude scale, GRF scale)
CONDITIONS = {"0.9": (1.22, 0.85, 0.92), "1.3": (1.08, 1.0, 1.0), "1.7": (0.98, 1.12, 1.1)}


@dataclass
class SynthResult:
    trajectory: object        # data.JointTrajectory
    activations: np.ndarray   # (T, N) applied activations
    forces: np.ndarray        # (T, N)
    torques: np.ndarray       # (T, 3) applied muscle torques
    tracking_feasible: np.ndarray = field(default=None)


def synth_gait(model: dyn.LimbModel, muscles: MuscleSet, excitation: ExcitationSpec, duration: float,
               rate: float = 200.0, reference: GaitReference | None = None, grf: GrfProfile | None = None,
               kp: float = 150.0, kd: float = 25.0, substeps: int = 10, initial: dyn.JointState | None = None,
               metadata=None) -> SynthResult:
    """Integrate the limb forward under muscle torques.

    Without ``reference`` the activations are the excitations themselves
    (open loop). With a reference, activations are the point closest to the
    excitations that produces a computed-torque tracking command, which keeps
    the limb on a gait-like path.

    Inputs are refreshed every integrator step (``substeps`` per output
    frame) and held over it; the GRF lever arm changes fast enough under a
    light foot that holding inputs for a whole frame drifts. Output frames
    store the integrator's own acceleration and a muscle state whose fiber
    velocity is the backward difference at the output rate, so inverse
    dynamics of the output reproduces the recorded muscle torques exactly.
    """
    from .data import JointTrajectory

    dt = 1.0 / rate
    h = dt / substeps
    T = int(round(duration * rate))
    N = len(muscles)
    if initial is None:
        if reference is not None:
            q0, qd0, _ = reference(0.0)
            initial = dyn.JointState(q0, qd0)
        else:
            initial = dyn.JointState(np.zeros(3))
    if grf is not None and reference is None:
        raise ValueError("a GRF profile needs a gait reference for its phase")
    times = np.arange(T) * dt
    f_plate, cop_plate, contact = np.zeros((T, 2)), np.zeros((T, 2)), np.zeros(T, bool)
    q, qd, qdd, torques = (np.zeros((T, 3)) for _ in range(4))
    acts, forces = np.zeros((T, N)), np.zeros((T, N))
    track_ok = np.ones(T, bool)

    state = initial
    fiber_frame = fiber_step = None   # fiber length at the last output frame / last step
    for i in range((T - 1) * substeps + 1):
        t = i * h
        k, sub = divmod(i, substeps)
        record = sub == 0
        sample = dyn.SWING
        if grf is not None:
            sample = dyn.GrfSample(*grf.sample(model, state.q, (t / reference.period) % 1.0))
        a, f, tau, ok = np.zeros(N), np.zeros(N), np.zeros(3), True
        if N:
            mk = (muscle_kinematics(muscles, state.q[None], dt, fiber_frame) if record
                  else muscle_kinematics(muscles, state.q[None], h, fiber_step))
            a = excitation(t)
            if reference is not None:
                qr, qdr, qddr = reference(t)
                accel = qddr + kp * (qr - state.q) + kd * (qdr - state.qdot)
                tau_des = dyn.required_torques(model, dyn.JointState(state.q, state.qdot, accel), sample)
                a, ok, _, _, _ = solve_box_qp(mk.torque_gains[0], tau_des - mk.passive_torque[0],
                                              ACT_MIN, ACT_MAX, center=a, check_kkt=False)
            f = mk.forces(a[None])[0]
            tau = f @ mk.arms[0]
            fiber_step = mk.l_fiber[0]
            if record:
                fiber_frame = fiber_step
        if record:
            q[k], qd[k] = state.q, state.qdot
            qdd[k] = dyn.forward_accelerations(model, state.q, state.qdot, tau, sample)
            f_plate[k], cop_plate[k], contact[k] = sample.force_plate, sample.cop_plate, sample.in_contact
            acts[k], forces[k], torques[k], track_ok[k] = a, f, tau, ok
            if k == T - 1:
                break
        state = dyn.forward_step(model, state, tau, sample, h)
        if np.any(np.abs(state.q) > math.pi) or not np.all(np.isfinite(state.q)):
            raise IntegrationDivergenceError(
                f"joint excursion beyond +/-pi at t = {t + h:.4f} s: q = {state.q}")

    traj = JointTrajectory(time=times, q=q, qdot=qd, qddot=qdd, force_plate=f_plate,
                           cop_plate=cop_plate, contact=contact, metadata=dict(metadata or {}))
    return SynthResult(traj, acts, forces, torques, track_ok)


def synth_cycles(model: dyn.LimbModel, muscles: MuscleSet, n_cycles: int, condition: str = "1.3",
                 seed: int = 0, rate: float = 200.0, subject: str = "synthetic", **kw) -> list[SynthResult]:
    """Independent gait cycles for one speed condition, each with its own
    perturbed reference and excitation phases."""
    period, scale, grf_scale = CONDITIONS[condition]
    out = []
    for i in range(n_cycles):
        rng = np.random.default_rng([seed, i, int(float(condition) * 10)])
        ref = GaitReference.walking(period, scale, rng)
        exc = ExcitationSpec.random(len(muscles), seed=int(rng.integers(2**31)), period=period)
        prof = GrfProfile(weight=GrfProfile.weight * grf_scale * rng.normal(1.0, 0.03))
        meta = {"subject": subject, "condition": condition, "cycle": str(i)}
        out.append(synth_gait(model, muscles, exc, period, rate, ref, prof, metadata=meta, **kw))
    return out
