"""Sampled odometry motion model (differential-drive, rot-trans-rot form).

Relative odometry between two odometer poses is decomposed into an initial
rotation, a translation, and a final rotation. Sampling perturbs each
component with zero-mean Gaussian noise whose variance mixes the commanded
motion through the four alpha coefficients:

    var(rot1)  = a1*rot1^2 + a2*trans^2
    var(trans) = a3*trans^2 + a4*(rot1^2 + rot2^2)
    var(rot2)  = a1*rot2^2 + a2*trans^2
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2D, wrap_angle, wrap_angle_array

# Below this translation the rot-trans-rot split is degenerate: atan2 of a
# ~zero displacement is noise, so the whole heading change goes to rot2.
PURE_ROTATION_EPS = 1e-6


@dataclass(frozen=True)
class OdometryReading:
    """Successive odometer poses; the relative motion between them is u_t."""

    prev: Pose2D
    curr: Pose2D


@dataclass(frozen=True)
class MotionNoise:
    alpha1: float = 0.0
    alpha2: float = 0.0
    alpha3: float = 0.0
    alpha4: float = 0.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def as_tuple(self):
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4)


def decompose(u: OdometryReading) -> tuple[float, float, float]:
    """Split relative odometry into (rot1, trans, rot2), angles normalized."""
    dx = u.curr.x - u.prev.x
    dy = u.curr.y - u.prev.y
    trans = math.hypot(dx, dy)
    if trans < PURE_ROTATION_EPS:
        rot1 = 0.0
        rot2 = wrap_angle(u.curr.theta - u.prev.theta)
    else:
        rot1 = wrap_angle(math.atan2(dy, dx) - u.prev.theta)
        rot2 = wrap_angle(u.curr.theta - u.prev.theta - rot1)
    return rot1, trans, rot2


def apply_motion(pose: Pose2D, rot1: float, trans: float, rot2: float) -> Pose2D:
    """Advance a pose by a rot-trans-rot motion (the zero-noise update)."""
    heading = pose.theta + rot1
    return Pose2D(
        pose.x + trans * math.cos(heading),
        pose.y + trans * math.sin(heading),
        pose.theta + rot1 + rot2,
    )


def motion_variances(rot1: float, trans: float, rot2: float, noise: MotionNoise):
    a1, a2, a3, a4 = noise.as_tuple()
    return (
        a1 * rot1 * rot1 + a2 * trans * trans,
        a3 * trans * trans + a4 * (rot1 * rot1 + rot2 * rot2),
        a1 * rot2 * rot2 + a2 * trans * trans,
    )


def sample_motion(
    u: OdometryReading, noise: MotionNoise, pose: Pose2D, rng: np.random.Generator
) -> Pose2D:
    """Draw one noisy successor pose.

    Consumes exactly 3 standard normals from rng, in the order
    (rot1, trans, rot2), so replaying the generator state replays the pose.
    """
    eps = rng.standard_normal(3)
    rot1, trans, rot2 = decompose(u)
    v1, vt, v2 = motion_variances(rot1, trans, rot2, noise)
    return apply_motion(
        pose,
        rot1 + math.sqrt(v1) * eps[0],
        trans + math.sqrt(vt) * eps[1],
        rot2 + math.sqrt(v2) * eps[2],
    )


def sample_motion_array(
    u: OdometryReading, noise: MotionNoise, poses: np.ndarray, normals: np.ndarray
) -> np.ndarray:
    """Vectorized sample_motion over an (N, 3) pose array.

    normals is an (N, 3) block of standard normals; row i plays the role of
    particle i's private noise stream, same component order as
    sample_motion. Keeping the draw outside makes the result independent of
    how callers partition the particle set.
    """
    rot1, trans, rot2 = decompose(u)
    v1, vt, v2 = motion_variances(rot1, trans, rot2, noise)
    r1 = rot1 + math.sqrt(v1) * normals[:, 0]
    tr = trans + math.sqrt(vt) * normals[:, 1]
    r2 = rot2 + math.sqrt(v2) * normals[:, 2]
    heading = poses[:, 2] + r1
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + tr * np.cos(heading)
    out[:, 1] = poses[:, 1] + tr * np.sin(heading)
    out[:, 2] = wrap_angle_array(poses[:, 2] + r1 + r2)
    return out
