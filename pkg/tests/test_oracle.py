import numpy as np
import pytest
from oracles import brute_force_box_qp, kkt_residual, random_box_qp
from scipy.optimize import lsq_linear

from mskpinn import data as dat
from mskpinn import dynamics as dyn
from mskpinn import loss as ls
from mskpinn import muscle as mus
from mskpinn import oracle as orc

LO, HI = orc.ACT_MIN, orc.ACT_MAX


# -- per-frame QP ---------------------------------------------------------------------

def test_single_muscle_equality():
    g = 37.0
    r = orc.so_solve_frame(orc.SoProblem([g * 0.4], [[g]]))
    assert r.feasible and r.activations[0] == pytest.approx(0.4, abs=1e-12)


def test_identical_agonists_split_evenly():
    g = 25.0
    r = orc.so_solve_frame(orc.SoProblem([g * 0.6], [[g, g]]))
    np.testing.assert_allclose(r.activations, [0.3, 0.3], atol=1e-12)


def test_passive_torque_shifts_the_target():
    r = orc.so_solve_frame(orc.SoProblem([5.0], [[10.0]], passive=[1.0]))
    assert r.activations[0] == pytest.approx(0.4, abs=1e-12)


def test_floor_torque_gives_floor_activations(limb, muscles):
    # a static pose whose load equals the torque of every muscle at the floor
    q = np.array([0.1, -0.3, 0.05])
    mk = mus.muscle_kinematics(muscles, q[None], 0.005)
    need = mk.torque_gains[0] @ np.full(10, LO) + mk.passive_torque[0]
    r = orc.so_solve_frame(orc.SoProblem(need, mk.torque_gains[0], mk.passive_torque[0]))
    np.testing.assert_allclose(r.activations, LO, atol=1e-10)


def test_random_instances_match_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(60):
        A, b = random_box_qp(rng)
        r = orc.so_solve_frame(orc.SoProblem(b, A))
        _, best = brute_force_box_qp(A, b, LO, HI)
        assert r.feasible
        assert abs(float(r.activations @ r.activations) - best) <= 1e-6
        assert np.all(r.activations >= LO) and np.all(r.activations <= HI)
        assert np.max(np.abs(A @ r.activations - b)) <= 1e-8
        assert kkt_residual(r.activations, A, LO, HI) <= 1e-8


def test_infeasible_frame_is_lexicographic_and_flagged():
    A = np.array([[10.0, 5.0], [1.0, -2.0]])
    b = np.array([40.0, 0.0])   # needs more than full activation
    r = orc.so_solve_frame(orc.SoProblem(b, A))
    assert not r.feasible
    best_violation = np.linalg.norm(A @ lsq_linear(A, b, bounds=(LO, HI), method="bvls").x - b)
    assert r.violation == pytest.approx(best_violation, rel=1e-9)
    assert np.all((r.activations >= LO) & (r.activations <= HI))


def test_bounded_lsq_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(30):
        K = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        y = rng.normal(size=K.shape[0]) * 3
        x, _ = orc.bounded_lsq(K, y, np.full(K.shape[1], -0.5), np.full(K.shape[1], 0.7))
        ref = lsq_linear(K, y, bounds=(-0.5, 0.7), method="bvls", tol=1e-15).x
        assert np.linalg.norm(K @ x - y) == pytest.approx(np.linalg.norm(K @ ref - y), rel=1e-9, abs=1e-12)


def test_problem_validation():
    with pytest.raises(ValueError):
        orc.SoProblem([np.nan], [[1.0]])
    with pytest.raises(ValueError):
        orc.SoProblem([1.0], [[1.0]], lo=1.0, hi=0.5)


# -- generator ---------------------------------------------------------------------------

def _mono(joint, arm, name, f_iso=300.0):
    """Single-joint muscle at optimal fiber length at q = 0; moment arm ``arm``."""
    e = np.zeros((2, 3), int)
    e[1, joint] = 1
    p = mus.MuscleParams(f_iso, 0.1, 0.0, 0.25, 10.0, name=name)
    return p, mus.MuscleGeometry(e, np.array([0.35, -arm]))


def non_redundant_set():
    """One flexor and one extensor per joint."""
    pairs = [_mono(j, s * 0.04, f"{'fe'[k]}{j}") for j in range(3) for k, s in enumerate((1, -1))]
    return mus.MuscleSet([p for p, _ in pairs], [g for _, g in pairs])


def test_passive_swing_reduces_to_forward_steps(limb):
    empty = mus.MuscleSet([], [])
    start = dyn.JointState(np.array([0.5, -0.3, 0.1]))
    res = orc.synth_gait(limb, empty, orc.ExcitationSpec.floor(0), 0.1, initial=start, substeps=4)
    state = start
    h = 0.005 / 4
    for k in range(len(res.trajectory.time)):
        np.testing.assert_array_equal(res.trajectory.q[k], state.q)
        for _ in range(4):
            state = dyn.forward_step(limb, state, np.zeros(3), dyn.SWING, h)
    assert np.all(res.torques == 0)


@pytest.fixture(scope="module")
def tracked(limb, muscles):
    exc = orc.ExcitationSpec.random(10, seed=4, period=1.08)
    return orc.synth_gait(limb, muscles, exc, 0.75, reference=orc.GaitReference.walking(1.08),
                          grf=orc.GrfProfile())


def test_generator_is_dynamics_consistent(limb, muscles, tracked):
    traj = tracked.trajectory
    assert np.any(traj.contact) and not np.all(traj.contact)
    tau_req = dyn.required_torques(limb, dat.trajectory_states(traj), dat.trajectory_grf(traj))
    assert np.max(np.abs(tau_req - tracked.torques)) <= 1e-6
    terms = ls.frame_terms_for(limb, muscles, dat.trajectory_states(traj), dat.trajectory_grf(traj), traj.dt)
    assert float(ls.dynamics_loss_terms(tracked.activations, terms).data) <= 1e-10


def test_seed_changes_trajectory_but_not_consistency(limb, muscles):
    # open loop, so the excitation seed drives the motion itself
    runs = [orc.synth_gait(limb, muscles, orc.ExcitationSpec.random(10, seed=s), 0.3,
                           initial=dyn.JointState(np.array([0.2, -0.4, 0.0])))
            for s in (5, 6)]
    assert not np.allclose(runs[0].trajectory.q, runs[1].trajectory.q)
    for r in runs:
        tau_req = dyn.required_torques(limb, dat.trajectory_states(r.trajectory))
        assert np.max(np.abs(tau_req - r.torques)) <= 1e-6


def test_tracked_seed_changes_activations_only(limb, muscles, tracked):
    exc = orc.ExcitationSpec.random(10, seed=5, period=1.08)
    other = orc.synth_gait(limb, muscles, exc, 0.2, reference=orc.GaitReference.walking(1.08),
                           grf=orc.GrfProfile())
    n = len(other.trajectory.time)
    assert not np.allclose(other.activations, tracked.activations[:n])


def test_redundant_round_trip_reproduces_torques(limb, muscles, tracked):
    so = orc.so_trajectory(limb, muscles, tracked.trajectory)
    assert np.all(so.feasible)
    tau_req = dyn.required_torques(limb, dat.trajectory_states(tracked.trajectory),
                                   dat.trajectory_grf(tracked.trajectory))
    mk = mus.muscle_kinematics(muscles, tracked.trajectory.q, tracked.trajectory.dt)
    assert np.max(np.abs(mk.torques(so.activations) - tau_req)) <= 1e-6
    assert not np.allclose(so.activations, tracked.activations, atol=1e-3)
    np.testing.assert_allclose(so.forces, mk.forces(so.activations), rtol=1e-14)


def test_non_redundant_round_trip_recovers_activations(limb):
    ms = non_redundant_set()
    n = len(ms)
    base = np.full(n, LO)
    amp = np.zeros((n, 1))
    base[[0, 3, 4]] = (0.25, 0.3, 0.2)   # hip flexor, knee extensor, ankle flexor
    amp[[0, 3, 4], 0] = (0.1, 0.1, 0.05)
    exc = orc.ExcitationSpec(base, amp, np.zeros((n, 1)), period=0.5)
    res = orc.synth_gait(limb, ms, exc, 0.3, initial=dyn.JointState(np.array([0.1, -0.2, 0.05])))
    so = orc.so_trajectory(limb, ms, res.trajectory)
    assert np.all(so.feasible)
    np.testing.assert_allclose(so.activations, res.activations, atol=1e-4)


def test_runaway_drive_raises_divergence(limb):
    p, g = _mono(0, 0.04, "hip_flexor", f_iso=20000.0)
    ms = mus.MuscleSet([p], [g])
    exc = orc.ExcitationSpec(np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(orc.IntegrationDivergenceError):
        orc.synth_gait(limb, ms, exc, 2.0)


def test_grf_profile_needs_reference(limb, muscles):
    with pytest.raises(ValueError):
        orc.synth_gait(limb, muscles, orc.ExcitationSpec.floor(10), 0.1, grf=orc.GrfProfile())
