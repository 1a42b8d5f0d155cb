"""
Planar leg dynamics in a few lines
==================================

The bundled three-segment leg (thigh, shank, foot) is simulated without
muscles, then run backwards through inverse dynamics. Run with
``python3 demos/01_leg_dynamics.py [out_dir]``.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mskpinn import default_limb_model  # noqa: E402
from mskpinn import dynamics as dyn  # noqa: E402

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
leg = default_limb_model()

# The mass matrix is symmetric positive definite and depends only on the
# knee and ankle angles.
q = np.array([0.4, -0.6, 0.1])
print("M(q) =\n", np.round(dyn.mass_matrix(leg, q), 4))

# %% Passive swing
# Released from a flexed pose with zero muscle torque, the leg swings as a
# triple pendulum. RK4 at 0.1 ms keeps the mechanical energy flat.
state = dyn.JointState(np.array([0.7, -0.5, 0.25]))
energy = lambda s: dyn.kinetic_energy(leg, s) + dyn.potential_energy(leg, s.q)  # noqa: E731
e0 = energy(state)
qs = [state.q]
for _ in range(5000):
    state = dyn.forward_step(leg, state, np.zeros(3), None, 1e-4)
    qs.append(state.q)
print(f"relative energy drift after 0.5 s: {abs(energy(state) - e0) / abs(e0):.2e}")

t = np.arange(len(qs)) * 1e-4
fig, ax = plt.subplots(figsize=(6, 3))
ax.plot(t, np.array(qs), label=["hip", "knee", "ankle"])
ax.set_xlabel("time (s)")
ax.set_ylabel("angle (rad)")
ax.legend()
fig.tight_layout()
fig.savefig(out / "passive_swing.svg")

# %% Forward and back
# Apply a torque for one step; inverse dynamics recovers it from the
# resulting state, because the stored acceleration belongs to that state.
tau = np.array([12.0, -8.0, 3.0])
after = dyn.forward_step(leg, state, tau, None, 1e-3)
print("applied  ", tau)
print("recovered", np.round(dyn.required_torques(leg, after), 10))

# %% Ground contact
# In stance a ground reaction force at the centre of pressure adds torque
# through the contact Jacobian of the foot.
ankle = dyn.joint_positions(leg, after.q)[2]
grf = dyn.GrfSample(np.array([40.0, 650.0]), dyn.world_to_plate(leg, ankle + [0.1, -0.05]), True)
print("GRF joint torques:", np.round(dyn.grf_torques(leg, after, grf), 2))
