"""Range-finder measurement models: likelihood-field and four-component beam.

Both models subsample the scan to at most max_beams evenly spaced beams and
multiply per-beam probabilities in log space, so a few hundred beams cannot
underflow the weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import IDENTITY, Pose2D, compose_array
from .world_map import DistanceField, OccupancyGrid, raycast_batch

LIKELIHOOD_FIELD = "likelihood_field"
BEAM = "beam"


@dataclass(frozen=True)
class LaserScan:
    """One sweep: per-beam bearings (sensor frame) and ranges, plus limits."""

    bearings: np.ndarray
    ranges: np.ndarray
    range_min: float
    range_max: float
    stamp: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.bearings, dtype=float)
        r = np.asarray(self.ranges, dtype=float)
        if b.shape != r.shape:
            raise ValueError(f"bearings {b.shape} and ranges {r.shape} differ")
        object.__setattr__(self, "bearings", b)
        object.__setattr__(self, "ranges", np.clip(r, self.range_min, self.range_max))

    def __len__(self):
        return len(self.bearings)


@dataclass(frozen=True)
class SensorModelConfig:
    """Mixture weights and shape parameters for both range models.

    The likelihood-field model uses z_hit and z_rand as-is (unnormalized);
    the beam model renormalizes all four weights into a proper density.
    mount is the sensor pose in the robot frame, composed by the filter
    before weighting.
    """

    z_hit: float = 0.95
    z_short: float = 0.1
    z_max: float = 0.05
    z_rand: float = 0.5
    sigma_hit: float = 0.2
    lambda_short: float = 0.1
    max_beams: int = 30
    model_type: str = LIKELIHOOD_FIELD
    likelihood_max_dist: float = 2.0
    max_range_epsilon: float = 0.01
    mount: Pose2D = field(default=IDENTITY)

    def __post_init__(self):
        for name in ("z_hit", "z_short", "z_max", "z_rand"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sigma_hit <= 0:
            raise ValueError("sigma_hit must be > 0")
        if self.lambda_short <= 0:
            raise ValueError("lambda_short must be > 0")
        if self.max_beams < 1:
            raise ValueError("max_beams must be >= 1")
        if self.model_type not in (LIKELIHOOD_FIELD, BEAM):
            raise ValueError(f"unknown model_type {self.model_type!r}")


def subsample_indices(n_beams: int, max_beams: int) -> np.ndarray:
    """Indices of at most max_beams evenly spaced beams; all beams if fewer."""
    if n_beams <= max_beams:
        return np.arange(n_beams)
    idx = np.round(np.linspace(0.0, n_beams - 1, max_beams)).astype(np.int64)
    return np.unique(idx)


def likelihood_field_log_weights(
    scan: LaserScan, poses: np.ndarray, dfield: DistanceField, cfg: SensorModelConfig
) -> np.ndarray:
    """Log sensor weight for each sensor pose in an (N, 3) array.

    Per beam with range < range_max the endpoint is projected into the map
    and scored p = z_hit * exp(-d^2 / (2 sigma^2)) + z_rand / range_max,
    where d is the saturated nearest-obstacle distance (endpoints that fall
    off the map use the saturation distance). Beams at range_max carry no
    information and are skipped; with no usable beams the weight is 1.
    """
    idx = subsample_indices(len(scan), cfg.max_beams)
    used = idx[scan.ranges[idx] < scan.range_max]
    n = poses.shape[0]
    if used.size == 0:
        return np.zeros(n)
    bearings = scan.bearings[used]
    ranges = scan.ranges[used]
    angles = poses[:, 2:3] + bearings[None, :]
    ex = poses[:, 0:1] + ranges[None, :] * np.cos(angles)
    ey = poses[:, 1:2] + ranges[None, :] * np.sin(angles)

    # Cell lookup, out-of-map endpoints at the saturation distance.
    c = math.cos(-dfield.origin.theta)
    s = math.sin(-dfield.origin.theta)
    gx = c * (ex - dfield.origin.x) - s * (ey - dfield.origin.y)
    gy = s * (ex - dfield.origin.x) + c * (ey - dfield.origin.y)
    ix = np.floor(gx / dfield.resolution).astype(np.int64)
    iy = np.floor(gy / dfield.resolution).astype(np.int64)
    inside = (ix >= 0) & (ix < dfield.width) & (iy >= 0) & (iy < dfield.height)
    d = np.full(ix.shape, cfg.likelihood_max_dist)
    d[inside] = dfield.dist[iy[inside], ix[inside]]

    p = cfg.z_hit * np.exp(-(d * d) / (2.0 * cfg.sigma_hit**2)) + cfg.z_rand / scan.range_max
    with np.errstate(divide="ignore"):  # p can be exactly 0 when z_rand is 0
        return np.log(p).sum(axis=1)


def likelihood_field_weight(
    scan: LaserScan, pose: Pose2D, dfield: DistanceField, cfg: SensorModelConfig
) -> float:
    """Likelihood-field weight of a single sensor pose (mount already composed)."""
    lw = likelihood_field_log_weights(scan, pose.as_array()[None, :], dfield, cfg)
    return float(np.exp(lw[0]))


def beam_densities(
    z: np.ndarray, z_star: np.ndarray, range_max: float, cfg: SensorModelConfig
) -> np.ndarray:
    """Four-component per-beam density at measured ranges z given expected z*."""
    w_sum = cfg.z_hit + cfg.z_short + cfg.z_max + cfg.z_rand
    zh, zs, zm, zr = (v / w_sum for v in (cfg.z_hit, cfg.z_short, cfg.z_max, cfg.z_rand))

    p_hit = np.exp(-((z - z_star) ** 2) / (2.0 * cfg.sigma_hit**2)) / (
        cfg.sigma_hit * math.sqrt(2.0 * math.pi)
    )
    lam = cfg.lambda_short
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        trunc = 1.0 - np.exp(-lam * z_star)
        p_short = np.where(
            (z <= z_star) & (trunc > 0), lam * np.exp(-lam * z) / np.where(trunc > 0, trunc, 1.0), 0.0
        )
    at_max = z >= range_max
    p_max = np.where(at_max, 1.0 / cfg.max_range_epsilon, 0.0)
    p_rand = np.where(~at_max, 1.0 / range_max, 0.0)
    return zh * p_hit + zs * p_short + zm * p_max + zr * p_rand


def beam_model_weight(
    scan: LaserScan, pose: Pose2D, grid: OccupancyGrid, cfg: SensorModelConfig,
    dfield: DistanceField | None = None,
) -> float:
    """Beam-model weight: expected ranges come from ray casting the map."""
    idx = subsample_indices(len(scan), cfg.max_beams)
    if idx.size == 0:
        return 1.0
    z = scan.ranges[idx]
    z_star = raycast_batch(grid, pose, scan.bearings[idx], scan.range_max, field=dfield)
    p = beam_densities(z, z_star, scan.range_max, cfg)
    return float(np.exp(np.log(p).sum()))
