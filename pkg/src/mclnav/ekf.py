"""Extended Kalman filter pose tracker over odometry and range-bearing
landmark observations.

The belief is a single Gaussian, so the tracker is a unimodal baseline to
contrast with the particle filter: accurate while the linearization holds,
unable to represent the multiple hypotheses a teleported robot requires.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2D, wrap_angle
from .motion import MotionNoise, OdometryReading, apply_motion, decompose, motion_variances


class SingularInnovationError(RuntimeError):
    """Innovation covariance is not invertible."""


@dataclass(frozen=True)
class GaussianBelief:
    """Mean pose (x, y, theta) and 3x3 covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def pose(self) -> Pose2D:
        return Pose2D.from_array(self.mean)


@dataclass(frozen=True)
class LandmarkObservation:
    landmark_id: int
    range: float
    bearing: float
    noise: tuple[float, float]  # (var_range, var_bearing)

    def __post_init__(self):
        if self.range < 0:
            raise ValueError("range must be >= 0")


def motion_jacobians(pose: np.ndarray, rot1: float, trans: float):
    """G = d(next pose)/d(pose), V = d(next pose)/d(rot1, trans, rot2)."""
    heading = pose[2] + rot1
    sh, ch = math.sin(heading), math.cos(heading)
    G = np.array(
        [
            [1.0, 0.0, -trans * sh],
            [0.0, 1.0, trans * ch],
            [0.0, 0.0, 1.0],
        ]
    )
    V = np.array(
        [
            [-trans * sh, ch, 0.0],
            [trans * ch, sh, 0.0],
            [1.0, 0.0, 1.0],
        ]
    )
    return G, V


def ekf_predict(b: GaussianBelief, u: OdometryReading, noise: MotionNoise) -> GaussianBelief:
    """Propagate mean through the odometry composition and grow covariance
    by the linearized motion noise: G S G^T + V M V^T."""
    rot1, trans, rot2 = decompose(u)
    mean_pose = apply_motion(Pose2D.from_array(b.mean), rot1, trans, rot2)
    G, V = motion_jacobians(b.mean, rot1, trans)
    M = np.diag(motion_variances(rot1, trans, rot2, noise))
    cov = G @ b.covariance @ G.T + V @ M @ V.T
    return GaussianBelief(mean=mean_pose.as_array(), covariance=0.5 * (cov + cov.T))


def measurement_model(pose: np.ndarray, landmark: tuple[float, float]):
    """Expected (range, bearing) to a landmark and the Jacobian H (2x3)."""
    dx = landmark[0] - pose[0]
    dy = landmark[1] - pose[1]
    q = dx * dx + dy * dy
    r = math.sqrt(q)
    z_hat = np.array([r, wrap_angle(math.atan2(dy, dx) - pose[2])])
    H = np.array(
        [
            [-dx / r, -dy / r, 0.0],
            [dy / q, -dx / q, -1.0],
        ]
    )
    return z_hat, H


def ekf_update(
    b: GaussianBelief,
    obs: LandmarkObservation,
    landmark_pos: tuple[float, float],
    gate: float | None = None,
) -> GaussianBelief:
    """Range-bearing update against a known landmark position.

    The bearing innovation is wrapped before the gain multiply, and the
    covariance update uses the Joseph form so it stays PSD under roundoff.
    With `gate` set, observations whose squared Mahalanobis innovation
    exceeds it are rejected (belief returned unchanged).
    """
    z_hat, H = measurement_model(b.mean, landmark_pos)
    R = np.diag(obs.noise)
    S = H @ b.covariance @ H.T + R
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if abs(det) < 1e-18:
        raise SingularInnovationError(f"innovation covariance is singular: {S}")
    innovation = np.array([obs.range - z_hat[0], wrap_angle(obs.bearing - z_hat[1])])
    S_inv = np.linalg.inv(S)
    if gate is not None and float(innovation @ S_inv @ innovation) > gate:
        return b
    K = b.covariance @ H.T @ S_inv
    mean = b.mean + K @ innovation
    mean[2] = wrap_angle(mean[2])
    IKH = np.eye(3) - K @ H
    cov = IKH @ b.covariance @ IKH.T + K @ R @ K.T
    return GaussianBelief(mean=mean, covariance=0.5 * (cov + cov.T))
