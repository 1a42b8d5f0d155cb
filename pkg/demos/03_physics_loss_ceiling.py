"""
What the physics loss rewards
=============================

The label-free loss trades the torque residual against effort and a soft
bound penalty. Its exact per-frame minimizer is computable, and comparing it
with static optimization shows how close any network trained on that loss
can get to the reference labels. Run with
``python3 demos/03_physics_loss_ceiling.py``.
"""

import numpy as np

from mskpinn import data as dat
from mskpinn import default_limb_model, default_muscle_set
from mskpinn import loss as ls
from mskpinn import oracle as orc
from mskpinn import train as tr

leg, muscles = default_limb_model(), default_muscle_set()
trial = tr.synthetic_trials(leg, muscles, 1, seed=1)[0]
prepared = tr.prepare_trial(leg, muscles, trial)

# %% The loss minimizer for several weightings
# With the default weights (dynamics 3, effort 1000, bound 500) the
# minimizer drives some muscles below zero: a "pushing" muscle cancels
# torque and lets the others relax, and the bound penalty is too soft to stop
# it. Clamping to [0.01, 1] at inference then breaks torque equilibrium.
# Stiffer bound weights remove the loophole and the optimum approaches the
# static-optimization labels.
for w_d, w_b in ((3.0, 500.0), (3.0, 5e3), (3.0, 5e4), (3.0, 5e5), (3000.0, 5e5)):
    w = ls.LossWeights(w_d=w_d, w_b=w_b)
    raw = ls.penalized_optimum(prepared.terms, w)
    a = np.clip(raw, orc.ACT_MIN, orc.ACT_MAX)
    rows = dat.metric_rows([prepared.labels], [a], muscles.names)
    r2 = np.mean([r["mean"] for r in rows if r["metric"] == "activation_r2"])
    print(f"w_d={w_d:>6g} w_b={w_b:>6g}: min raw activation {raw.min():6.3f}, "
          f"clamped mean R2 vs SO = {r2:6.3f}")

# %% Per muscle at the default weights
a = np.clip(ls.penalized_optimum(prepared.terms), orc.ACT_MIN, orc.ACT_MAX)
rows = dat.metric_rows([prepared.labels], [a], muscles.names)
for r in rows:
    if r["metric"] == "activation_r2":
        print(f"  {r['muscle']:>3}: R2 {r['mean']:6.2f}")
