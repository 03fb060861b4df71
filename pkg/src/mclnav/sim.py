"""Kinematic 2D world: differential-drive robot, drifting odometry, simulated
laser against the ground-truth map, landmark observations, and scripted
scenario events (goals, kidnaps, teleop segments)."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .ekf import LandmarkObservation
from .geometry import Pose2D, wrap_angle
from .motion import MotionNoise, OdometryReading, sample_motion
from .sensing import LaserScan
from .world_map import OCCUPIED, DistanceField, OccupancyGrid, raycast_batch


@dataclass(frozen=True)
class LaserSpec:
    """Scanner geometry. Defaults: 270 degree fan, 540 beams, 0.1-30 m."""

    fov: float = 1.5 * math.pi
    n_beams: int = 540
    range_min: float = 0.1
    range_max: float = 30.0

    def bearings(self) -> np.ndarray:
        half = self.fov / 2.0
        return np.linspace(-half, half, self.n_beams)


@dataclass(frozen=True)
class RobotConfig:
    """Robot geometry. Chassis/wheel/caster dimensions are bookkeeping for
    the footprint; only footprint_radius and the mounts affect simulation."""

    name: str
    chassis: tuple[float, float, float]
    wheel_radius: float
    wheel_length: float
    caster_radius: float
    laser_mount: Pose2D
    camera_mount: Pose2D
    footprint_radius: float

    def __post_init__(self):
        for v in (*self.chassis, self.wheel_radius, self.wheel_length,
                  self.caster_radius, self.footprint_radius):
            if v <= 0:
                raise ValueError("robot dimensions must be > 0")
        half_diag = math.hypot(self.chassis[0] / 2.0, self.chassis[1] / 2.0)
        if self.footprint_radius < half_diag:
            raise ValueError(
                f"footprint_radius {self.footprint_radius} smaller than "
                f"chassis half-diagonal {half_diag:.4f}"
            )


UDACITY_BOT = RobotConfig(
    name="udacity_bot",
    chassis=(0.4, 0.2, 0.1),
    wheel_radius=0.1,
    wheel_length=0.05,
    caster_radius=0.0499,
    laser_mount=Pose2D(0.15, 0.0, 0.0),
    camera_mount=Pose2D(0.2, 0.0, 0.0),
    footprint_radius=0.25,
)

SAGAR_BOT = RobotConfig(
    name="sagar_bot",
    chassis=(0.4, 0.4, 0.1),
    wheel_radius=0.1,
    wheel_length=0.05,
    caster_radius=0.05,
    laser_mount=Pose2D(0.15, 0.0, 0.0),
    camera_mount=Pose2D(0.2, 0.0, 0.0),
    footprint_radius=0.3,
)

ROBOT_PRESETS = {r.name: r for r in (UDACITY_BOT, SAGAR_BOT)}


# -- scenario events ----------------------------------------------------------


@dataclass(frozen=True)
class SetGoal:
    pose: Pose2D


@dataclass(frozen=True)
class Kidnap:
    pose: Pose2D


@dataclass(frozen=True)
class TeleopSegment:
    v: float
    omega: float
    duration: float


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    action: SetGoal | Kidnap | TeleopSegment


@dataclass(frozen=True)
class SimState:
    """Ground truth plus the drifting odometer frame and the event queue."""

    true_pose: Pose2D
    odom_pose: Pose2D
    clock: float = 0.0
    pending_events: tuple[ScenarioEvent, ...] = ()
    fired_events: tuple[ScenarioEvent, ...] = ()
    tick: int = 0

    def __post_init__(self):
        times = [e.time for e in self.pending_events]
        if times != sorted(times):
            raise ValueError("scenario events must have non-decreasing times")


def make_state(start: Pose2D, events: list[ScenarioEvent] | None = None) -> SimState:
    events = sorted(events or [], key=lambda e: e.time)
    return SimState(true_pose=start, odom_pose=start, pending_events=tuple(events))


# -- footprint collision -------------------------------------------------------

_footprint_cache: dict[tuple[float, float], np.ndarray] = {}


def _footprint_offsets(radius: float, resolution: float) -> np.ndarray:
    """Cell offsets whose cells can overlap a disc of the given radius."""
    key = (radius, resolution)
    got = _footprint_cache.get(key)
    if got is None:
        # A cell overlaps the disc if its center is within radius plus half
        # the cell diagonal.
        reach = radius + resolution * math.sqrt(2.0) / 2.0
        r_cells = int(math.ceil(reach / resolution))
        span = np.arange(-r_cells, r_cells + 1)
        ox, oy = np.meshgrid(span, span)
        keep = (np.hypot(ox, oy) * resolution) <= reach
        got = np.stack([ox[keep], oy[keep]], axis=1)
        _footprint_cache[key] = got
    return got


def footprint_collides(world: OccupancyGrid, pose: Pose2D, radius: float) -> bool:
    """True when the disc footprint overlaps any occupied cell (or the map edge)."""
    cx, cy = world.world_to_cell(pose.x, pose.y)
    off = _footprint_offsets(radius, world.resolution)
    ix = cx + off[:, 0]
    iy = cy + off[:, 1]
    inside = (ix >= 0) & (ix < world.width) & (iy >= 0) & (iy < world.height)
    if not inside.all():
        return True
    return bool((world.cells[iy, ix] == OCCUPIED).any())


# -- stepping -------------------------------------------------------------------


def integrate_unicycle(pose: Pose2D, v: float, omega: float, dt: float) -> Pose2D:
    """Exact arc integration of a unicycle command."""
    if abs(omega) < 1e-12:
        return Pose2D(
            pose.x + v * dt * math.cos(pose.theta),
            pose.y + v * dt * math.sin(pose.theta),
            pose.theta,
        )
    r = v / omega
    th1 = pose.theta + omega * dt
    return Pose2D(
        pose.x + r * (math.sin(th1) - math.sin(pose.theta)),
        pose.y - r * (math.cos(th1) - math.cos(pose.theta)),
        th1,
    )


def sim_step(
    state: SimState,
    cmd: tuple[float, float],
    dt: float,
    world: OccupancyGrid,
    noise: MotionNoise,
    footprint_radius: float,
    rng: np.random.Generator,
) -> SimState:
    """Advance the world one tick.

    The true pose follows the exact unicycle arc unless the footprint would
    collide, in which case translation is dropped and only the heading
    change is applied. The odometer integrates the same true motion
    corrupted through the odometry noise model (one sample per tick). Due
    events fire after motion: a kidnap teleports the true pose while the
    odometer continues smoothly.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    v, omega = cmd
    candidate = integrate_unicycle(state.true_pose, v, omega, dt)
    if footprint_collides(world, candidate, footprint_radius):
        # Command truncated: hold position, allow rotation (disc footprint).
        candidate = Pose2D(state.true_pose.x, state.true_pose.y, candidate.theta)
    true_pose = candidate

    u = OdometryReading(prev=state.true_pose, curr=true_pose)
    odom_pose = sample_motion(u, noise, state.odom_pose, rng)

    clock = state.clock + dt
    pending = list(state.pending_events)
    fired = list(state.fired_events)
    while pending and pending[0].time <= clock + 1e-12:
        ev = pending.pop(0)
        if isinstance(ev.action, Kidnap):
            true_pose = ev.action.pose
        fired.append(ev)

    return SimState(
        true_pose=true_pose,
        odom_pose=odom_pose,
        clock=clock,
        pending_events=tuple(pending),
        fired_events=tuple(fired),
        tick=state.tick + 1,
    )


def take_fired_events(state: SimState) -> tuple[SimState, list[ScenarioEvent]]:
    """Pop events that fired since the last call (harness consumes these)."""
    fired = list(state.fired_events)
    return replace(state, fired_events=()), fired


def simulate_scan(
    state: SimState,
    world: OccupancyGrid,
    spec: LaserSpec,
    laser_mount: Pose2D,
    noise_sigma: float,
    rng: np.random.Generator,
    dfield: DistanceField | None = None,
) -> LaserScan:
    """Range scan from the laser mount pose against the ground-truth map.

    Each beam is a raycast plus Gaussian range noise, clamped to the
    scanner limits; beams that exit the map report range_max.
    """
    origin = state.true_pose.compose(laser_mount)
    bearings = spec.bearings()
    ranges = raycast_batch(world, origin, bearings, spec.range_max, field=dfield)
    if noise_sigma > 0:
        ranges = ranges + noise_sigma * rng.standard_normal(len(bearings))
    return LaserScan(
        bearings=bearings,
        ranges=ranges,
        range_min=spec.range_min,
        range_max=spec.range_max,
        stamp=state.clock,
    )


def simulate_landmarks(
    state: SimState,
    landmarks: dict[int, tuple[float, float]],
    max_range: float,
    noise: tuple[float, float],
    world: OccupancyGrid,
    rng: np.random.Generator,
    dfield: DistanceField | None = None,
) -> list[LandmarkObservation]:
    """Noisy range-bearing observations of landmarks in range and line of sight."""
    if not landmarks:
        raise ValueError("landmark table is empty")
    out = []
    pose = state.true_pose
    for lid in sorted(landmarks):
        lx, ly = landmarks[lid]
        dx = lx - pose.x
        dy = ly - pose.y
        r = math.hypot(dx, dy)
        if r > max_range:
            continue
        bearing = wrap_angle(math.atan2(dy, dx) - pose.theta)
        if r > 1e-9:
            seen = raycast_batch(
                world, pose, np.array([bearing]), max_range, field=dfield
            )[0]
            if seen < r - world.resolution:
                continue  # occluded
        eps = rng.standard_normal(2)
        out.append(
            LandmarkObservation(
                landmark_id=lid,
                range=max(0.0, r + math.sqrt(noise[0]) * eps[0]),
                bearing=wrap_angle(bearing + math.sqrt(noise[1]) * eps[1]),
                noise=noise,
            )
        )
    return out
