"""
Reference activations by static optimization
============================================

One synthetic gait cycle is generated by forward dynamics, and static
optimization then recovers a minimum-effort activation pattern that
reproduces its joint torques. Run with
``python3 demos/02_static_optimization.py [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np

from mskpinn import data as dat
from mskpinn import default_limb_model, default_muscle_set
from mskpinn import dynamics as dyn
from mskpinn import muscle as mus
from mskpinn import oracle as orc
from mskpinn.report import plot_traces

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
leg, muscles = default_limb_model(), default_muscle_set()

# %% A single frame
# Static optimization minimizes the sum of squared activations subject to
# torque equilibrium and 0.01 <= a <= 1. Two identical muscles share a load
# evenly.
r = orc.so_solve_frame(orc.SoProblem([15.0], [[25.0, 25.0]]))
print("two identical agonists:", r.activations)

# %% A synthetic gait cycle
# The generator tracks a walking reference with its own muscle drive and
# records a dynamics-consistent trajectory at 200 Hz, with ground reaction
# forces during stance.
cycle = orc.synth_cycles(leg, muscles, 1, condition="1.3", seed=0)[0]
traj = cycle.trajectory
print(f"{len(traj)} frames, stance fraction {traj.contact.mean():.2f}")

# %% Solving every frame
so = orc.so_trajectory(leg, muscles, traj)
print(f"feasible frames: {so.feasible.mean():.0%}")
tau = dyn.required_torques(leg, dat.trajectory_states(traj), dat.trajectory_grf(traj))
mk = mus.muscle_kinematics(muscles, traj.q, traj.dt)
print(f"max torque mismatch: {np.max(np.abs(mk.torques(so.activations) - tau)):.1e} N m")

# The generator's own drive and the SO solution produce the same torques but
# different activations: ten muscles over three joints leave room to choose.
path = plot_traces(traj.time, cycle.activations, so.activations, muscles.names, out / "so_vs_generator.svg",
                   "generator drive (predicted) vs static optimization (reference)")
print("wrote", path)
