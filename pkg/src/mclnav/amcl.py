"""Adaptive Monte Carlo localization.

One filter step runs the classic two loops: every particle is advanced
through the sampled odometry model and reweighted by the measurement model,
then (on resampling steps) a new set is drawn with probability proportional
to weight. The size of the resampled set adapts to the spread of the belief
via KLD sampling, bounded by min/max particle counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2D, compose_array, wrap_angle_array
from .motion import MotionNoise, OdometryReading, sample_motion_array
from .sensing import (
    BEAM,
    LIKELIHOOD_FIELD,
    LaserScan,
    SensorModelConfig,
    beam_model_weight,
    likelihood_field_log_weights,
    subsample_indices,
)
from .world_map import FREE, DistanceField, OccupancyGrid

SYSTEMATIC = "systematic"
MULTINOMIAL = "multinomial"


class StaleScanError(RuntimeError):
    """Scan timestamp outside the filter's staleness budget."""


@dataclass(frozen=True)
class Particle:
    pose: Pose2D
    weight: float


@dataclass(frozen=True)
class Belief:
    """Particle set: (M, 3) poses plus weights, with filter bookkeeping.

    Immutable; every filter operation returns a fresh generation.
    """

    poses: np.ndarray
    weights: np.ndarray
    normalized: bool = True
    step_index: int = 0
    diverged: bool = False
    low_quality_steps: int = 0
    holdoff: int = 0
    recovering: bool = False
    recovery_good_steps: int = 0
    recovery_wait: int = 0

    def __post_init__(self):
        object.__setattr__(self, "poses", np.asarray(self.poses, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.poses.ndim != 2 or self.poses.shape[1] != 3:
            raise ValueError(f"poses must be (M, 3), got {self.poses.shape}")
        if self.weights.shape != (self.poses.shape[0],):
            raise ValueError("weights length must match particle count")

    def __len__(self):
        return self.poses.shape[0]

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(Pose2D.from_array(p), float(w))
            for p, w in zip(self.poses, self.weights)
        ]


@dataclass(frozen=True)
class AmclConfig:
    min_particles: int = 25
    max_particles: int = 200
    initial_pose: Pose2D = field(default=Pose2D(0.0, 0.0, 0.0))
    kld_err: float = 0.05
    kld_z: float = 2.326
    bin_sizes: tuple[float, float, float] = (0.5, 0.5, math.pi / 12)
    resample_interval: int = 2
    transform_tolerance: float = 0.2
    motion_noise: MotionNoise = field(default=MotionNoise(0.005, 0.005, 0.010, 0.005))
    sensor: SensorModelConfig = field(default=SensorModelConfig())
    resampler: str = SYSTEMATIC
    convergence_radius: float = 0.3
    # Divergence watch: the best particle's per-beam geometric-mean
    # likelihood staying below divergence_threshold for divergence_window
    # consecutive updates flags the filter as lost. A matched belief sits
    # near z_hit + z_rand/range_max (~0.95 with the defaults); mismatched
    # beliefs rarely sustain 0.5.
    divergence_threshold: float = 0.5
    divergence_window: int = 5
    global_reinit_on_divergence: bool = False
    # Recovery loop (active while global_reinit_on_divergence): after a
    # re-init, resampling and the watch are suspended for reinit_holdoff
    # updates so several scans of evidence pick the collapse hypothesis.
    # The collapsed cluster then gets recovery_patience updates to refine:
    # a near-truth cluster climbs past recovery_exit_threshold as
    # resampling jitter pulls it onto the true pose, while a look-alike
    # region plateaus below the bar and triggers another global roll.
    reinit_holdoff: int = 15
    recovery_exit_threshold: float = 0.8
    recovery_exit_window: int = 3
    recovery_patience: int = 20

    def __post_init__(self):
        if not (0 < self.min_particles <= self.max_particles):
            raise ValueError("need 0 < min_particles <= max_particles")
        if self.kld_err <= 0:
            raise ValueError("kld_err must be > 0")
        if self.resample_interval < 1:
            raise ValueError("resample_interval must be >= 1")
        if self.resampler not in (SYSTEMATIC, MULTINOMIAL):
            raise ValueError(f"unknown resampler {self.resampler!r}")


# -- initialization ---------------------------------------------------------


def init_from_pose(
    cfg: AmclConfig,
    pose: Pose2D,
    covariance: tuple[float, float, float],
    rng: np.random.Generator,
) -> Belief:
    """Gaussian cloud of max_particles around a known pose. covariance is
    the diagonal (var_x, var_y, var_theta)."""
    if any(v < 0 for v in covariance):
        raise ValueError("covariance components must be >= 0")
    m = cfg.max_particles
    eps = rng.standard_normal((m, 3))
    poses = np.empty((m, 3))
    poses[:, 0] = pose.x + math.sqrt(covariance[0]) * eps[:, 0]
    poses[:, 1] = pose.y + math.sqrt(covariance[1]) * eps[:, 1]
    poses[:, 2] = wrap_angle_array(pose.theta + math.sqrt(covariance[2]) * eps[:, 2])
    return Belief(poses=poses, weights=np.full(m, 1.0 / m))


def init_global(cfg: AmclConfig, grid: OccupancyGrid, rng: np.random.Generator) -> Belief:
    """Uniform particles over free cells with uniform headings."""
    free_iy, free_ix = np.nonzero(grid.cells == FREE)
    if free_ix.size == 0:
        raise ValueError("map has no free cell to initialize in")
    m = cfg.max_particles
    choice = rng.integers(0, free_ix.size, size=m)
    offsets = rng.random((m, 2))
    headings = rng.uniform(-math.pi, math.pi, size=m)
    gx = (free_ix[choice] + offsets[:, 0]) * grid.resolution
    gy = (free_iy[choice] + offsets[:, 1]) * grid.resolution
    c = math.cos(grid.origin.theta)
    s = math.sin(grid.origin.theta)
    poses = np.empty((m, 3))
    poses[:, 0] = grid.origin.x + c * gx - s * gy
    poses[:, 1] = grid.origin.y + s * gx + c * gy
    poses[:, 2] = wrap_angle_array(headings)
    return Belief(poses=poses, weights=np.full(m, 1.0 / m))


# -- KLD adaptive size ------------------------------------------------------


def kld_sample_size(k: int, cfg: AmclConfig) -> int:
    """Particle count sufficient for the KLD bound given k occupied bins."""
    if k <= 1:
        return cfg.min_particles
    x = 2.0 / (9.0 * (k - 1))
    n = math.ceil(((k - 1) / (2.0 * cfg.kld_err)) * (1.0 - x + math.sqrt(x) * cfg.kld_z) ** 3)
    return int(min(max(n, cfg.min_particles), cfg.max_particles))


def occupied_bin_count(poses: np.ndarray, bin_sizes: tuple[float, float, float]) -> int:
    """Distinct (x, y, theta) histogram bins touched by the particle set."""
    bx, by, bt = bin_sizes
    keys = np.empty((poses.shape[0], 3), dtype=np.int64)
    keys[:, 0] = np.floor(poses[:, 0] / bx)
    keys[:, 1] = np.floor(poses[:, 1] / by)
    keys[:, 2] = np.floor(poses[:, 2] / bt)
    return int(np.unique(keys, axis=0).shape[0])


# -- resampling --------------------------------------------------------------


def systematic_resample(weights: np.ndarray, n: int, u: float) -> np.ndarray:
    """Low-variance resampling: n indices from one uniform draw u in [0, 1).

    Particle i receives either floor(n * w_i) or ceil(n * w_i) copies; the
    single stratified draw fixes which.
    """
    cum = np.cumsum(weights, dtype=float)
    cum /= cum[-1]
    cum[-1] = 1.0
    positions = (u + np.arange(n)) / n
    return np.searchsorted(cum, positions, side="right")


def multinomial_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Independent draws with probability proportional to weight."""
    cum = np.cumsum(weights, dtype=float)
    cum /= cum[-1]
    cum[-1] = 1.0
    return np.searchsorted(cum, rng.random(n), side="right")


# -- the filter step ----------------------------------------------------------


def _log_sensor_weights(scan, sensor_poses, dfield, grid, cfg):
    if cfg.sensor.model_type == LIKELIHOOD_FIELD:
        return likelihood_field_log_weights(scan, sensor_poses, dfield, cfg.sensor)
    lw = np.empty(sensor_poses.shape[0])
    for i, p in enumerate(sensor_poses):
        w = beam_model_weight(scan, Pose2D.from_array(p), grid, cfg.sensor, dfield)
        lw[i] = math.log(w) if w > 0 else -math.inf
    return lw


def _used_beams(scan: LaserScan, cfg: SensorModelConfig) -> int:
    idx = subsample_indices(len(scan), cfg.max_beams)
    if cfg.model_type == BEAM:
        return int(idx.size)
    return int(np.count_nonzero(scan.ranges[idx] < scan.range_max))


def step(
    belief: Belief,
    u: OdometryReading,
    z: LaserScan,
    dfield: DistanceField,
    grid: OccupancyGrid,
    cfg: AmclConfig,
    clock: float,
    rng: np.random.Generator,
) -> Belief:
    """One filter update: motion + sensor loop, then adaptive resampling.

    rng consumption order per call: (M, 3) motion normals, then one uniform
    on resampling steps, then global re-init draws if divergence recovery
    fires. The input belief is never mutated.

    Raises StaleScanError when the scan is older than transform_tolerance.
    """
    if clock - z.stamp > cfg.transform_tolerance:
        raise StaleScanError(
            f"scan stamp {z.stamp:.3f} older than clock {clock:.3f} "
            f"- tolerance {cfg.transform_tolerance:.3f}"
        )
    step_index = belief.step_index + 1

    # Loop 1: motion update and sensor reweighting, particle by particle
    # (row i of the noise block is particle i's stream).
    normals = rng.standard_normal((len(belief), 3))
    poses = sample_motion_array(u, cfg.motion_noise, belief.poses, normals)
    sensor_poses = compose_array(poses, cfg.sensor.mount)
    lw = _log_sensor_weights(z, sensor_poses, dfield, grid, cfg)
    with np.errstate(divide="ignore"):
        log_w = np.log(belief.weights) + lw

    # Normalize in log space; recentering by the max keeps hundreds of
    # beam products inside double range.
    m = np.max(log_w)
    diverged = False  # per-step detection, not sticky
    if not np.isfinite(m):
        weights = np.full(len(belief), 1.0 / len(belief))
        diverged = True
    else:
        w = np.exp(log_w - m)
        weights = w / w.sum()

    # Divergence watch on measurement quality, suspended while a fresh
    # re-init is still accumulating evidence.
    holdoff = max(belief.holdoff - 1, 0)
    n_beams = _used_beams(z, cfg.sensor)
    low_quality = belief.low_quality_steps
    recovering = belief.recovering
    good_steps = belief.recovery_good_steps
    wait = belief.recovery_wait
    reinit = diverged and cfg.global_reinit_on_divergence
    if n_beams > 0 and belief.holdoff == 0:
        quality = math.exp(np.max(lw) / n_beams)
        if recovering:
            if quality >= cfg.recovery_exit_threshold:
                good_steps += 1
                if good_steps >= cfg.recovery_exit_window:
                    recovering = False
                    good_steps = 0
                    wait = 0
            else:
                good_steps = 0
                wait += 1
                if wait >= cfg.recovery_patience:
                    diverged = True
                    reinit = cfg.global_reinit_on_divergence
        else:
            low_quality = low_quality + 1 if quality < cfg.divergence_threshold else 0
            if low_quality >= cfg.divergence_window:
                diverged = True
                reinit = cfg.global_reinit_on_divergence
    if reinit:
        fresh = init_global(cfg, grid, rng)
        return replace(
            fresh,
            step_index=step_index,
            diverged=True,
            holdoff=cfg.reinit_holdoff,
            recovering=True,
        )

    new = Belief(
        poses=poses,
        weights=weights,
        normalized=True,
        step_index=step_index,
        diverged=diverged,
        low_quality_steps=low_quality,
        holdoff=holdoff,
        recovering=recovering,
        recovery_good_steps=good_steps,
        recovery_wait=wait,
    )

    # Loop 2: adaptive resampling on every resample_interval-th update.
    if step_index % cfg.resample_interval == 0 and holdoff == 0:
        k = occupied_bin_count(poses, cfg.bin_sizes)
        n = kld_sample_size(k, cfg)
        if cfg.resampler == SYSTEMATIC:
            idx = systematic_resample(weights, n, rng.random())
        else:
            idx = multinomial_resample(weights, n, rng)
        new = replace(
            new,
            poses=poses[idx].copy(),
            weights=np.full(n, 1.0 / n),
        )
    return new


# -- point estimate -----------------------------------------------------------


def estimate(belief: Belief, convergence_radius: float = 0.3):
    """Weighted mean pose, 3x3 covariance, and a convergence flag.

    Heading is averaged circularly (atan2 of weighted sin/cos sums) and its
    residuals are wrapped before entering the covariance. Converged means
    the largest positional standard deviation is below convergence_radius.
    """
    if len(belief) == 0:
        raise ValueError("empty belief")
    if not belief.normalized:
        raise ValueError("belief must be normalized")
    w = belief.weights
    x = float(np.dot(w, belief.poses[:, 0]))
    y = float(np.dot(w, belief.poses[:, 1]))
    sin_sum = float(np.dot(w, np.sin(belief.poses[:, 2])))
    cos_sum = float(np.dot(w, np.cos(belief.poses[:, 2])))
    theta = math.atan2(sin_sum, cos_sum)

    d = np.empty_like(belief.poses)
    d[:, 0] = belief.poses[:, 0] - x
    d[:, 1] = belief.poses[:, 1] - y
    d[:, 2] = wrap_angle_array(belief.poses[:, 2] - theta)
    cov = (w[:, None] * d).T @ d

    pos_eigs = np.linalg.eigvalsh(cov[:2, :2])
    converged = bool(math.sqrt(max(pos_eigs[-1], 0.0)) < convergence_radius)
    return Pose2D(x, y, theta), cov, converged
