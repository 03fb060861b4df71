"""2D mobile-robot localization and navigation at desk scale.

Subpackages map one-to-one onto the stack's layers: occupancy maps
(world_map), motion and sensor models (motion, sensing), the adaptive
particle filter (amcl), the EKF baseline (ekf), costmaps and planning
(costmap, nav), the kinematic simulator (sim), and the scenario CLI
(harness). The worlds module ships the generated maze test world.
"""

from .geometry import Pose2D, wrap_angle

__all__ = ["Pose2D", "wrap_angle"]
__version__ = "0.1.0"
