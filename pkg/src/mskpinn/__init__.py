"""Label-free muscle activation estimation from joint kinematics.

A cross-joint attention and bidirectional GRU network is trained against a
physics-based loss (planar leg dynamics plus Hill-type muscles). Static
optimization and a forward-dynamics gait generator supply reference data.
"""

from .defaults import default_limb_model, default_muscle_set

__version__ = "0.1.0"
__all__ = ["default_limb_model", "default_muscle_set", "__version__"]
