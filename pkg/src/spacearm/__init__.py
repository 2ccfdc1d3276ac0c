"""Simulation and learning toolkit for free-floating manipulator capture.

The package is organized bottom-up:

* se3       -- rigid-body transforms and twists
* robot     -- manipulator model, kinematics, momentum-coupled Jacobians
* control   -- task-space PID with nullspace and singularity avoidance
* nn        -- dense networks with hand-written backprop
* env       -- episodic capture environment (two task variants)
* agent     -- twin-critic deterministic policy learner with ranked replay
* harness   -- experiment configs, training/eval loops, CLI backends
"""

__version__ = "0.1.0"

from .errors import SpacearmError
from .se3 import Pose, Rotation, Twist

__all__ = ["SpacearmError", "Pose", "Rotation", "Twist", "__version__"]
