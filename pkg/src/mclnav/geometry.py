"""Planar pose arithmetic shared by every other module.

Angles are always radians normalized to (-pi, pi]; positions are meters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = a % TWO_PI
    if r > math.pi:
        r -= TWO_PI
    return r


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle."""
    r = np.mod(a, TWO_PI)
    return np.where(r > math.pi, r - TWO_PI, r)


@dataclass(frozen=True)
class Pose2D:
    """Position (x, y) in meters plus heading theta in radians.

    theta is normalized to (-pi, pi] on construction, so arithmetic on
    poses can never leak an out-of-range heading.
    """

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Pose of `other` expressed in this pose's parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def heading_error(self, other: "Pose2D") -> float:
        return wrap_angle(other.theta - self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @staticmethod
    def from_array(v) -> "Pose2D":
        return Pose2D(float(v[0]), float(v[1]), float(v[2]))


IDENTITY = Pose2D(0.0, 0.0, 0.0)


def compose_array(poses: np.ndarray, offset: Pose2D) -> np.ndarray:
    """Compose a fixed offset onto an (N, 3) pose array (e.g. a sensor mount)."""
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + c * offset.x - s * offset.y
    out[:, 1] = poses[:, 1] + s * offset.x + c * offset.y
    out[:, 2] = wrap_angle_array(poses[:, 2] + offset.theta)
    return out
