"""Hill-type muscle-tendon model with polynomial musculotendon geometry.

The tendon is rigid (tendon length equals slack length), which turns the
fiber-length / pennation pair into a closed form. Forces are

    F = F_iso * (a * f_v(v) * f_a(l) + f_p(l)) * cos(phi)

and joint torques are tau = R^T F with moment arms R = -dl_mt/dq.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "MUSCLE_NAMES",
    "CurveParams",
    "MuscleParams",
    "MuscleGeometry",
    "MuscleSet",
    "FIBER_FLOOR",
    "mt_length",
    "moment_arms",
    "fiber_geometry",
    "active_fl",
    "passive_fl",
    "force_vel",
    "muscle_force",
    "muscle_torques",
    "muscle_kinematics",
    "load_muscle_params",
    "load_muscle_geometry",
    "save_muscle_params",
    "save_muscle_geometry",
    "load_muscle_set",
]

MUSCLE_NAMES = ("PS", "RF", "BF", "SM", "IL", "VI", "VL", "VM", "GL", "GM")
FIBER_FLOOR = 0.1  # fraction of optimal fiber length


@dataclass(frozen=True)
class CurveParams:
    gamma: float = 0.2025      # active force-length width
    k_pe: float = 4.0          # passive exponential shape
    eps0: float = 0.6          # passive strain at F_iso
    a_f: float = 0.25          # force-velocity shortening curvature
    fv_max: float = 1.4        # eccentric plateau


DEFAULT_CURVES = CurveParams()


@dataclass(frozen=True)
class MuscleParams:
    f_iso_max: float
    l_fiber_opt: float
    penn_opt: float
    l_tendon_slack: float
    v_max: float
    name: str = ""

    def __post_init__(self):
        for key in ("f_iso_max", "l_fiber_opt", "l_tendon_slack", "v_max"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{self.name or 'muscle'}: {key} must be positive")
        if not 0 <= self.penn_opt < math.pi / 2:
            raise ValueError(f"{self.name or 'muscle'}: penn_opt must lie in [0, pi/2)")


@dataclass(frozen=True)
class MuscleGeometry:
    """l_mt(q) = sum_k coeffs[k] * prod_j q_j ** exponents[k, j]."""

    exponents: np.ndarray
    coeffs: np.ndarray
    spanned: tuple[int, ...] = ()
    q_min: np.ndarray | None = None
    q_max: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.exponents, dtype=int).reshape(-1, 3)
        c = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if len(e) != len(c):
            raise ValueError("exponents and coefficients differ in length")
        if np.any(e < 0) or np.any(e.sum(axis=1) > 4):
            raise ValueError("monomial exponents must be nonnegative with total degree <= 4")
        spanned = tuple(sorted(set(self.spanned))) or tuple(
            j + 1 for j in range(3) if np.any((e[:, j] > 0) & (c != 0)))
        for j in range(3):
            if (j + 1) not in spanned and np.any((e[:, j] > 0) & (c != 0)):
                raise ValueError(f"nonzero coefficient on non-spanned joint {j + 1}")
        object.__setattr__(self, "exponents", e)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "spanned", spanned)

    @classmethod
    def constant(cls, value: float):
        return cls(np.zeros((1, 3), int), np.array([value]), spanned=())


@dataclass
class MuscleSet:
    """Parameters and geometry for an ordered list of muscles."""

    params: list[MuscleParams]
    geoms: list[MuscleGeometry]
    curves: CurveParams = field(default_factory=CurveParams)

    def __post_init__(self):
        if len(self.params) != len(self.geoms):
            raise ValueError("params and geometry lists differ in length")

    @property
    def names(self):
        return [p.name for p in self.params]

    def __len__(self):
        return len(self.params)

    def subset(self, idx):
        return MuscleSet([self.params[i] for i in idx], [self.geoms[i] for i in idx], self.curves)

    def check_slack(self, q_samples) -> None:
        """Tendon slack must stay below every reachable musculotendon length."""
        for p, g in zip(self.params, self.geoms):
            lmt = mt_length(g, q_samples)
            if np.min(lmt) <= p.l_tendon_slack:
                raise ValueError(f"{p.name}: tendon slack length reached within the range of motion")
            if np.min(lmt) <= 0:
                raise ValueError(f"{p.name}: non-positive musculotendon length within the range of motion")


# -- geometry -----------------------------------------------------------------

def _warn_range(geom, q):
    if geom.q_min is None or geom.q_max is None:
        return
    if np.any(q < geom.q_min - 1e-9) or np.any(q > geom.q_max + 1e-9):
        log.warning("joint angles outside the declared range of motion; polynomial extrapolated")


def mt_length(geom: MuscleGeometry, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    _warn_range(geom, q)
    mono = np.prod(q[..., None, :] ** geom.exponents, axis=-1)
    return mono @ geom.coeffs


def moment_arms(geom: MuscleGeometry, q) -> np.ndarray:
    """R_j = -dl_mt/dq_j (shortening with positive q gives positive torque)."""
    q = np.asarray(q, dtype=float)
    out = np.zeros(q.shape)
    for j in range(3):
        e = geom.exponents[:, j]
        use = e > 0
        if not np.any(use):
            continue
        ed = geom.exponents[use].copy()
        ed[:, j] -= 1
        mono = np.prod(q[..., None, :] ** ed, axis=-1)
        out[..., j] = -(mono @ (geom.coeffs[use] * e[use]))
    return out


def fiber_geometry(params: MuscleParams, l_mt):
    """Fiber length and pennation under a rigid tendon.

    Solves l_m sin(phi) = l_o sin(phi_o) (constant thickness) together with
    l_m cos(phi) = l_mt - l_s. Lengths at or below the slack length, or
    fibers shorter than the floor, are clamped to ``FIBER_FLOOR * l_o``.

    Returns
    -------
    l_fiber, penn : ndarray
    clamped : ndarray of bool
    """
    l_mt = np.asarray(l_mt, dtype=float)
    h = params.l_fiber_opt * math.sin(params.penn_opt)
    along = l_mt - params.l_tendon_slack
    l_fiber = np.sqrt(along * along + h * h)
    floor = FIBER_FLOOR * params.l_fiber_opt
    clamped = (along <= 0) | (l_fiber < floor)
    l_fiber = np.where(clamped, floor, l_fiber)
    penn = np.arcsin(np.clip(h / l_fiber, -1.0, 1.0))
    if np.any(clamped):
        log.warning("%s: fiber length clamped to floor", params.name or "muscle")
    return l_fiber, penn, clamped


# -- characteristic curves ------------------------------------------------------

def active_fl(l_norm, curves: CurveParams = DEFAULT_CURVES):
    l_norm = np.asarray(l_norm, dtype=float)
    return np.exp(-((l_norm - 1.0) ** 2) / curves.gamma)


def passive_fl(l_norm, curves: CurveParams = DEFAULT_CURVES):
    l_norm = np.asarray(l_norm, dtype=float)
    stretch = np.maximum(l_norm - 1.0, 0.0)
    return (np.exp(curves.k_pe * stretch / curves.eps0) - 1.0) / (math.exp(curves.k_pe) - 1.0)


def force_vel(v_norm, curves: CurveParams = DEFAULT_CURVES):
    """Hill hyperbola for shortening, matched (C1) hyperbolic plateau for lengthening.

    v_norm < 0 is shortening; values below -1 are treated as -1.
    """
    v = np.maximum(np.asarray(v_norm, dtype=float), -1.0)
    af, fmax = curves.a_f, curves.fv_max
    conc = (1.0 + np.minimum(v, 0.0)) / (1.0 - np.minimum(v, 0.0) / af)
    # slope at zero is 1 + 1/a_f on both branches
    c = (fmax - 1.0) / (1.0 + 1.0 / af)
    vp = np.maximum(v, 0.0)
    ecc = fmax - (fmax - 1.0) * c / (c + vp)
    return np.where(v < 0, conc, ecc)


def muscle_force(params: MuscleParams, a, l_norm, v_norm, penn, curves: CurveParams = DEFAULT_CURVES):
    """F_iso (a f_v f_a + f_p) cos(phi). ``a`` may be an array or an autodiff Tensor."""
    active = params.f_iso_max * force_vel(v_norm, curves) * active_fl(l_norm, curves) * np.cos(penn)
    passive = params.f_iso_max * passive_fl(l_norm, curves) * np.cos(penn)
    return a * active + passive


# -- trajectory-level evaluation -------------------------------------------------

@dataclass
class MuscleKinematics:
    """Per-frame muscle state along a trajectory; forces are affine in activation.

    Arrays are (T, N) except ``arms`` which is (T, N, 3).
    """

    l_mt: np.ndarray
    l_fiber: np.ndarray
    penn: np.ndarray
    v_norm: np.ndarray
    arms: np.ndarray
    gain: np.ndarray      # force per unit activation, N
    passive: np.ndarray   # passive force, N
    clamped: np.ndarray

    def forces(self, activations):
        return activations * self.gain + self.passive

    def torques(self, activations):
        F = self.forces(activations)
        return np.einsum("tn,tnj->tj", F, self.arms)

    @property
    def torque_gains(self):
        """(T, 3, N) map from activations to joint torque."""
        return np.swapaxes(self.arms * self.gain[..., None], -1, -2)

    @property
    def passive_torque(self):
        return np.einsum("tn,tnj->tj", self.passive, self.arms)


def muscle_kinematics(muscles: MuscleSet, q, dt: float, prev_fiber=None) -> MuscleKinematics:
    """Muscle state for consecutive frames ``q`` (T, 3) sampled every ``dt``.

    Fiber velocity is the backward difference of fiber length; the first
    frame uses ``prev_fiber`` when given, else velocity zero.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    T, N = q.shape[0], len(muscles)
    out = {k: np.zeros((T, N)) for k in ("l_mt", "l_fiber", "penn", "v_norm", "gain", "passive")}
    arms = np.zeros((T, N, 3))
    clamped = np.zeros((T, N), dtype=bool)
    for n, (p, g) in enumerate(zip(muscles.params, muscles.geoms)):
        lmt = mt_length(g, q)
        lf, penn, cl = fiber_geometry(p, lmt)
        v = np.zeros(T)
        if T > 1:
            v[1:] = np.diff(lf) / dt
        if prev_fiber is not None:
            v[0] = (lf[0] - prev_fiber[n]) / dt
        vn = v / (p.v_max * p.l_fiber_opt)
        ln = lf / p.l_fiber_opt
        cosp = np.cos(penn)
        out["l_mt"][:, n] = lmt
        out["l_fiber"][:, n] = lf
        out["penn"][:, n] = penn
        out["v_norm"][:, n] = vn
        out["gain"][:, n] = p.f_iso_max * force_vel(vn, muscles.curves) * active_fl(ln, muscles.curves) * cosp
        out["passive"][:, n] = p.f_iso_max * passive_fl(ln, muscles.curves) * cosp
        arms[:, n] = moment_arms(g, q)
        clamped[:, n] = cl
    return MuscleKinematics(arms=arms, clamped=clamped, **out)


def muscle_torques(params, geoms, activations, q, qdot=None, prev_fiber=None, dt=None, curves=DEFAULT_CURVES):
    """Single-frame muscle torques.

    Returns ``(tau_h, forces, new_fiber)``. Without ``prev_fiber`` the fiber
    velocity is zero (first frame of a trajectory).
    """
    muscles = MuscleSet(list(params), list(geoms), curves)
    if prev_fiber is not None and not (dt and dt > 0):
        raise ValueError("dt > 0 required with prev_fiber")
    mk = muscle_kinematics(muscles, np.asarray(q, float)[None], dt or 1.0, prev_fiber)
    forces = mk.forces(np.asarray(activations, float)[None])[0]
    tau = forces @ mk.arms[0] if len(muscles) else np.zeros(3)
    return tau, forces, mk.l_fiber[0]


# -- files ------------------------------------------------------------------------

_PARAM_FIELDS = ("f_iso_max", "l_fiber_opt", "penn_opt", "l_tendon_slack", "v_max")


def load_muscle_params(path) -> list[MuscleParams]:
    """CSV with header ``name,f_iso_max,l_fiber_opt,penn_opt,l_tendon_slack,v_max``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    return [MuscleParams(name=r["name"].strip(), **{k: float(r[k]) for k in _PARAM_FIELDS}) for r in rows]


def save_muscle_params(params, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name",) + _PARAM_FIELDS)
        for p in params:
            w.writerow([p.name] + [repr(getattr(p, k)) for k in _PARAM_FIELDS])


_MONO = re.compile(r"^c(\d)(\d)(\d)$")


def load_muscle_geometry(path) -> dict[str, MuscleGeometry]:
    """One section per muscle: ``joints = 1,2``, optional ``q_min``/``q_max``
    triples, and monomials keyed ``cIJK = coefficient`` for q1^I q2^J q3^K."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = {}
    for name in cp.sections():
        sec = cp[name]
        exps, coeffs = [], []
        for key, val in sec.items():
            m = _MONO.match(key)
            if m:
                exps.append([int(x) for x in m.groups()])
                coeffs.append(float(val))
        joints = tuple(int(j) for j in sec.get("joints", "").replace(",", " ").split())
        rng = {k: np.array([float(x) for x in sec[k].replace(",", " ").split()]) for k in ("q_min", "q_max") if k in sec}
        out[name] = MuscleGeometry(np.array(exps, int).reshape(-1, 3), np.array(coeffs), joints, **rng)
    return out


def save_muscle_geometry(names, geoms, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name, g in zip(names, geoms):
        sec = {"joints": ",".join(str(j) for j in g.spanned)}
        if g.q_min is not None:
            sec["q_min"] = " ".join(repr(float(x)) for x in g.q_min)
            sec["q_max"] = " ".join(repr(float(x)) for x in g.q_max)
        for e, c in zip(g.exponents, g.coeffs):
            sec["c%d%d%d" % tuple(e)] = repr(float(c))
        cp[name] = sec
    with open(path, "w") as fh:
        cp.write(fh)


def load_muscle_set(params_path, geometry_path, order=MUSCLE_NAMES) -> MuscleSet:
    params = {p.name: p for p in load_muscle_params(params_path)}
    geoms = load_muscle_geometry(geometry_path)
    missing = [n for n in order if n not in params or n not in geoms]
    if missing:
        raise ValueError(f"muscles missing from files: {missing}")
    return MuscleSet([params[n] for n in order], [geoms[n] for n in order])
