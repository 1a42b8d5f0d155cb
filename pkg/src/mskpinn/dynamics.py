"""Planar thigh/shank/foot dynamics with ground-reaction-force handling.

Conventions
-----------
The hip is the origin of the world frame (x forward, y up). Joint angles
q = (hip, knee, ankle) are counterclockwise-positive relative rotations, so
segment k has absolute angle theta_k = q_1 + ... + q_k. Every segment's
local frame has its distal joint along local -y at distance ``length``; at
q = 0 the thigh and shank hang straight down. The foot is the last link, so
its ``length`` only bounds its COM offset and contact points.

All functions broadcast over leading axes: ``q`` may be (3,) or (..., 3).
"""

from __future__ import annotations

import configparser
import math
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SegmentParams",
    "LimbModel",
    "JointState",
    "GrfSample",
    "SingularMassMatrixError",
    "NoContactError",
    "STANCE_FORCE_THRESHOLD",
    "com_kinematics",
    "joint_positions",
    "kinetic_energy",
    "potential_energy",
    "mass_matrix",
    "mass_matrix_partials",
    "mass_matrix_rate",
    "coriolis_matrix",
    "gravity_vector",
    "cop_to_world",
    "world_to_plate",
    "contact_jacobian",
    "grf_torques",
    "required_torques",
    "forward_accelerations",
    "forward_step",
    "in_stance",
    "load_limb_model",
    "save_limb_model",
]

STANCE_FORCE_THRESHOLD = 20.0  # N, vertical GRF marking stance when no flag is given
_MAX_CONDITION = 1e12


class SingularMassMatrixError(np.linalg.LinAlgError):
    pass


class NoContactError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentParams:
    mass: float
    inertia_com: float
    length: float
    com_offset: tuple[float, float]

    def __post_init__(self):
        if self.mass < 0 or self.inertia_com < 0:
            raise ValueError("segment mass and inertia must be nonnegative")
        if not self.length > 0:
            raise ValueError("segment length must be positive")
        if math.hypot(*self.com_offset) > self.length * (1 + 1e-12):
            raise ValueError("COM offset exceeds segment length")


@dataclass(frozen=True)
class LimbModel:
    segments: tuple[SegmentParams, SegmentParams, SegmentParams]
    gravity: float = 9.81
    plate_rotation: float = 0.0  # rad, {P} -> {W}
    plate_translation: tuple[float, float] = (0.0, 0.0)  # m

    def __post_init__(self):
        if len(self.segments) != 3:
            raise ValueError("LimbModel needs exactly 3 segments (thigh, shank, foot)")
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def plate_matrix(self) -> np.ndarray:
        c, s = math.cos(self.plate_rotation), math.sin(self.plate_rotation)
        return np.array([[c, -s], [s, c]])

    # cached per-segment arrays used by the closed-form expressions
    @cached_property
    def _arrays(self):
        m = np.array([s.mass for s in self.segments])
        inertia = np.array([s.inertia_com for s in self.segments])
        r = np.array([s.com_offset for s in self.segments], dtype=float)
        d = np.array([[0.0, -s.length] for s in self.segments])
        return m, inertia, r, d


@dataclass
class JointState:
    q: np.ndarray
    qdot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    qddot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        self.qddot = np.asarray(self.qddot, dtype=float)


@dataclass
class GrfSample:
    force_plate: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cop_plate: np.ndarray = field(default_factory=lambda: np.zeros(2))
    in_contact: bool = False

    def __post_init__(self):
        self.force_plate = np.asarray(self.force_plate, dtype=float)
        self.cop_plate = np.asarray(self.cop_plate, dtype=float)


SWING = GrfSample()


def in_stance(force_plate, in_contact=None, threshold=STANCE_FORCE_THRESHOLD):
    """Contact flag, falling back to a vertical-force threshold."""
    if in_contact is not None:
        return np.asarray(in_contact, dtype=bool)
    return np.asarray(force_plate)[..., 1] > threshold


# -- kinematics ---------------------------------------------------------------

def _rot(theta, v):
    """Rotate 2-vectors ``v`` (..., 2) by angles ``theta`` (...)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _segment_angles(q):
    return np.cumsum(q, axis=-1)


def _world_vectors(model, q):
    """Distal-joint vectors a_k and COM vectors c_k in the world frame."""
    _, _, r, d = model._arrays
    th = _segment_angles(np.asarray(q, dtype=float))
    a = np.stack([_rot(th[..., k], d[k]) for k in range(3)], axis=-2)
    c = np.stack([_rot(th[..., k], r[k]) for k in range(3)], axis=-2)
    return th, a, c


def joint_positions(model: LimbModel, q) -> np.ndarray:
    """World positions of hip, knee and ankle, shape (..., 3, 2)."""
    _, a, _ = _world_vectors(model, q)
    hip = np.zeros_like(a[..., 0, :])
    knee = a[..., 0, :]
    ankle = knee + a[..., 1, :]
    return np.stack([hip, knee, ankle], axis=-2)


def com_kinematics(model: LimbModel, state: JointState):
    """COM positions and velocities plus segment angles and angular velocities.

    Returns
    -------
    pos, vel : ndarray (..., 3, 2)
    theta, omega : ndarray (..., 3)
    """
    th, a, c = _world_vectors(model, state.q)
    omega = _segment_angles(np.asarray(state.qdot, dtype=float))
    joints = joint_positions(model, state.q)
    pos = joints + c
    # d/dt R(theta) v = omega * perp(R(theta) v)
    va = _perp(a) * omega[..., :, None]
    vc = _perp(c) * omega[..., :, None]
    vj = np.stack([np.zeros_like(va[..., 0, :]), va[..., 0, :], va[..., 0, :] + va[..., 1, :]], axis=-2)
    vel = vj + vc
    return pos, vel, th, omega


def kinetic_energy(model: LimbModel, state: JointState):
    m, inertia, _, _ = model._arrays
    _, vel, _, omega = com_kinematics(model, state)
    return 0.5 * np.sum(m * np.sum(vel * vel, axis=-1) + inertia * omega * omega, axis=-1)


def potential_energy(model: LimbModel, q):
    """Sum of m_k g y_com,k (hip at height zero)."""
    m, _, _, _ = model._arrays
    pos, _, _, _ = com_kinematics(model, JointState(q, np.zeros_like(np.asarray(q, float))))
    return model.gravity * np.sum(m * pos[..., 1], axis=-1)


# -- mass matrix and its derivatives ------------------------------------------
#
# With segment angular velocities w = S qdot (S lower-triangular ones),
# E = 1/2 w^T D w where D collects the segment-space inertia couplings:
#   D11 = I1 + m1|c1|^2 + (m2+m3)|a1|^2   D12 = m2 a1.c2 + m3 a1.a2
#   D22 = I2 + m2|c2|^2 + m3|a2|^2        D13 = m3 a1.c3
#   D33 = I3 + m3|c3|^2                   D23 = m3 a2.c3
# and M = S^T D S. The dot products of vectors carried by different
# segments only depend on the relative angle delta between them:
#   R(ta)u . R(tb)w = cos(delta)(u.w) - sin(delta)(u x w),  delta = tb - ta.

_S = np.tril(np.ones((3, 3)))


def _pair(u, w, delta):
    dot = u @ w
    cross = u[0] * w[1] - u[1] * w[0]
    return np.cos(delta) * dot - np.sin(delta) * cross, -np.sin(delta) * dot - np.cos(delta) * cross


def _segment_inertia(model, q):
    """D(q) and its derivatives with respect to q2 and q3 (q1 never appears)."""
    m, inertia, r, d = model._arrays
    q = np.asarray(q, dtype=float)
    q2, q3 = q[..., 1], q[..., 2]
    shape = q.shape[:-1]
    D = np.zeros(shape + (3, 3))
    dD2 = np.zeros(shape + (3, 3))
    dD3 = np.zeros(shape + (3, 3))

    D[..., 0, 0] = inertia[0] + m[0] * (r[0] @ r[0]) + (m[1] + m[2]) * (d[0] @ d[0])
    D[..., 1, 1] = inertia[1] + m[1] * (r[1] @ r[1]) + m[2] * (d[1] @ d[1])
    D[..., 2, 2] = inertia[2] + m[2] * (r[2] @ r[2])

    v12a, g12a = _pair(d[0], r[1], q2)
    v12b, g12b = _pair(d[0], d[1], q2)
    v13, g13 = _pair(d[0], r[2], q2 + q3)
    v23, g23 = _pair(d[1], r[2], q3)

    d12 = m[1] * v12a + m[2] * v12b
    D[..., 0, 1] = D[..., 1, 0] = d12
    D[..., 0, 2] = D[..., 2, 0] = m[2] * v13
    D[..., 1, 2] = D[..., 2, 1] = m[2] * v23

    dD2[..., 0, 1] = dD2[..., 1, 0] = m[1] * g12a + m[2] * g12b
    dD2[..., 0, 2] = dD2[..., 2, 0] = m[2] * g13
    dD3[..., 0, 2] = dD3[..., 2, 0] = m[2] * g13
    dD3[..., 1, 2] = dD3[..., 2, 1] = m[2] * g23
    return D, dD2, dD3


def mass_matrix(model: LimbModel, q) -> np.ndarray:
    """Generalized inertia M(q), the Hessian of kinetic energy in qdot."""
    D, _, _ = _segment_inertia(model, q)
    M = _S.T @ D @ _S
    return 0.5 * (M + np.swapaxes(M, -1, -2))  # exactly symmetric in floating point


def _partials_from(dD2, dD3):
    return np.stack([np.zeros_like(dD2), _S.T @ dD2 @ _S, _S.T @ dD3 @ _S], axis=-3)


def mass_matrix_partials(model: LimbModel, q) -> np.ndarray:
    """dM/dq_r stacked on axis -3: result[..., r, i, j] = dM_ij / dq_r."""
    _, dD2, dD3 = _segment_inertia(model, q)
    return _partials_from(dD2, dD3)


def mass_matrix_rate(model: LimbModel, state: JointState) -> np.ndarray:
    dM = mass_matrix_partials(model, state.q)
    return np.einsum("...rij,...r->...ij", dM, np.asarray(state.qdot, float))


def coriolis_matrix(model: LimbModel, state: JointState) -> np.ndarray:
    """C_ij = sum_r Gamma_ij^r qdot_r built from Christoffel symbols of the first kind."""
    return _coriolis_from(mass_matrix_partials(model, state.q), state.qdot)


def _coriolis_from(dM, qdot):
    """Coriolis matrix from dM stacked as [r, i, j]."""
    qd = np.asarray(qdot, dtype=float)
    # Gamma[i, j, r] = 1/2 (dM_ij/dq_r + dM_ir/dq_j - dM_jr/dq_i)
    t1 = np.moveaxis(dM, -3, -1)   # [i, j, r] <- dM_ij/dq_r
    t2 = np.swapaxes(dM, -3, -2)   # [i, j, r] <- dM_ir/dq_j
    t3 = dM                        # [i, j, r] <- dM_jr/dq_i
    gamma = 0.5 * (t1 + t2 - t3)
    return np.einsum("...ijr,...r->...ij", gamma, qd)


def gravity_vector(model: LimbModel, q) -> np.ndarray:
    """G_i = d/dq_i sum_k m_k g y_com,k."""
    m, _, _, _ = model._arrays
    _, a, c = _world_vectors(model, q)
    # dy(R(theta)u)/dtheta = x(R(theta)u)
    distal_mass = np.array([m[1] + m[2], m[2], 0.0])
    g_seg = model.gravity * (m * c[..., 0] + distal_mass * a[..., 0])
    return g_seg @ _S


# -- ground reaction forces ---------------------------------------------------

def cop_to_world(model: LimbModel, grf: GrfSample) -> np.ndarray:
    """COP in {W}: rotate from {P}, then translate."""
    if not np.all(grf.in_contact):
        raise NoContactError("no centre of pressure exists during swing")
    return grf.cop_plate @ model.plate_matrix.T + np.asarray(model.plate_translation)


def world_to_plate(model: LimbModel, p_world) -> np.ndarray:
    return (np.asarray(p_world) - np.asarray(model.plate_translation)) @ model.plate_matrix


def force_to_world(model: LimbModel, grf: GrfSample) -> np.ndarray:
    return grf.force_plate @ model.plate_matrix.T


def contact_jacobian(model: LimbModel, q, point_world) -> np.ndarray:
    """2x3 Jacobian of the foot material point currently at ``point_world``.

    Every joint is proximal to the foot, so column i is perp(p - joint_i).
    """
    joints = joint_positions(model, q)
    lever = np.asarray(point_world)[..., None, :] - joints  # (..., 3, 2)
    return np.swapaxes(_perp(lever), -1, -2)


def grf_torques(model: LimbModel, state: JointState, grf: GrfSample) -> np.ndarray:
    """Joint torques J_v^T F of the ground reaction force (virtual work)."""
    p = cop_to_world(model, grf)
    F = force_to_world(model, grf)
    J = contact_jacobian(model, state.q, p)
    return np.einsum("...ki,...k->...i", J, F)


def _grf_torques_or_zero(model, q, grf):
    if grf is None or not np.any(grf.in_contact):
        return np.zeros_like(np.asarray(q, dtype=float))
    contact = np.asarray(grf.in_contact, dtype=bool)
    if contact.ndim == 0:
        return grf_torques(model, JointState(q), grf)
    tau = np.zeros_like(np.asarray(q, dtype=float))
    sub = GrfSample(grf.force_plate[contact], grf.cop_plate[contact], True)
    tau[contact] = grf_torques(model, JointState(np.asarray(q)[contact]), sub)
    return tau


# -- inverse and forward dynamics ---------------------------------------------

def required_torques(model: LimbModel, state: JointState, grf: GrfSample | None = None) -> np.ndarray:
    """Muscle torque needed to realize ``state``: M qdd + C qd + G, minus GRF torque in stance."""
    M = mass_matrix(model, state.q)
    C = coriolis_matrix(model, state)
    G = gravity_vector(model, state.q)
    qd = np.asarray(state.qdot, float)[..., None]
    qdd = np.asarray(state.qddot, float)[..., None]
    tau = (M @ qdd + C @ qd)[..., 0] + G
    return tau - _grf_torques_or_zero(model, state.q, grf)


def _solve_mass(M, rhs):
    w = np.linalg.eigvalsh(M)
    lo, hi = w[..., 0], w[..., -1]
    if np.any(hi <= 0) or np.any(lo <= hi / _MAX_CONDITION):
        raise SingularMassMatrixError("mass matrix is singular or ill-conditioned (cond > 1e12)")
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def forward_accelerations(model: LimbModel, q, qdot, tau, grf: GrfSample | None = None):
    """qdd = M^-1 (tau + tau_grf - C qdot - G)."""
    st = JointState(q, qdot)
    D, dD2, dD3 = _segment_inertia(model, st.q)   # shared by M and C
    M = _S.T @ D @ _S
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    C = _coriolis_from(_partials_from(dD2, dD3), st.qdot)
    rhs = (np.asarray(tau, float) + _grf_torques_or_zero(model, q, grf)
           - (C @ st.qdot[..., None])[..., 0]
           - gravity_vector(model, q))
    return _solve_mass(M, rhs)


def forward_step(model: LimbModel, state: JointState, tau, grf: GrfSample | None, dt: float) -> JointState:
    """Advance one classic RK4 step with ``tau`` and ``grf`` held constant.

    The returned state's ``qddot`` is the acceleration at the new state under
    the same held inputs, so ``required_torques`` of it gives ``tau`` back.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")

    def f(q, qd):
        return qd, forward_accelerations(model, q, qd, tau, grf)

    q0, v0 = state.q, state.qdot
    k1q, k1v = f(q0, v0)
    k2q, k2v = f(q0 + 0.5 * dt * k1q, v0 + 0.5 * dt * k1v)
    k3q, k3v = f(q0 + 0.5 * dt * k2q, v0 + 0.5 * dt * k2v)
    k4q, k4v = f(q0 + dt * k3q, v0 + dt * k3v)
    q1 = q0 + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    v1 = v0 + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return JointState(q1, v1, forward_accelerations(model, q1, v1, tau, grf))


# -- config file --------------------------------------------------------------

_SEGMENT_NAMES = ("thigh", "shank", "foot")


def load_limb_model(path) -> LimbModel:
    """Read a ``key = value`` config with [thigh], [shank], [foot] and [world] sections."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    segs = []
    for name in _SEGMENT_NAMES:
        s = cp[name]
        segs.append(SegmentParams(
            mass=s.getfloat("mass"),
            inertia_com=s.getfloat("inertia"),
            length=s.getfloat("length"),
            com_offset=(s.getfloat("com_x"), s.getfloat("com_y")),
        ))
    w = cp["world"] if cp.has_section("world") else {}
    get = (lambda k, d: float(w.get(k, d)))
    return LimbModel(tuple(segs), gravity=get("gravity", 9.81),
                     plate_rotation=get("rotation_rad", 0.0),
                     plate_translation=(get("tx", 0.0), get("ty", 0.0)))


def save_limb_model(model: LimbModel, path) -> None:
    cp = configparser.ConfigParser()
    for name, s in zip(_SEGMENT_NAMES, model.segments):
        cp[name] = {"mass": repr(s.mass), "inertia": repr(s.inertia_com), "length": repr(s.length),
                    "com_x": repr(s.com_offset[0]), "com_y": repr(s.com_offset[1])}
    cp["world"] = {"gravity": repr(model.gravity), "rotation_rad": repr(model.plate_rotation),
                   "tx": repr(model.plate_translation[0]), "ty": repr(model.plate_translation[1])}
    with open(Path(path), "w") as fh:
        cp.write(fh)
