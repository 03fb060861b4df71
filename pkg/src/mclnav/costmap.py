"""Byte-cost grids for planning: obstacle marking, raytrace clearing, and
exponential-decay inflation around lethal cells.

Cost levels follow the usual convention: 0 free, 1..252 inflated band,
253 inscribed (within robot radius of an obstacle), 254 lethal, 255 unknown.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .geometry import Pose2D
from .sensing import LaserScan
from .world_map import OCCUPIED, UNKNOWN, OccupancyGrid, write_pgm

COST_FREE = 0
COST_INSCRIBED = 253
COST_LETHAL = 254
COST_UNKNOWN = 255

# Clearing samples the beam at this fraction of a cell; every cell whose
# chord under the beam is at least this long gets cleared.
_CLEAR_STEP_CELLS = 0.5


@dataclass(frozen=True)
class CostmapConfig:
    obstacle_range: float = 1.5
    raytrace_range: float = 4.0
    inflation_radius: float = 0.65
    robot_radius: float = 0.3
    update_frequency: float = 10.0
    publish_frequency: float = 10.0
    cost_scaling_factor: float = 10.0

    def __post_init__(self):
        if not (self.raytrace_range >= self.obstacle_range > 0):
            raise ValueError("need raytrace_range >= obstacle_range > 0")
        if self.robot_radius <= 0:
            raise ValueError("robot_radius must be > 0")
        if self.inflation_radius < self.robot_radius:
            warnings.warn(
                f"inflation_radius {self.inflation_radius} < robot_radius "
                f"{self.robot_radius}: inflation will not cover the footprint",
                stacklevel=2,
            )


@dataclass(frozen=True)
class Costmap:
    width: int
    height: int
    resolution: float
    origin: Pose2D
    cost: np.ndarray
    rolling: bool = False

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=np.uint8)
        if cost.shape != (self.height, self.width):
            raise ValueError(f"cost shape {cost.shape} != {self.height}x{self.width}")
        object.__setattr__(self, "cost", cost)

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        c = math.cos(-self.origin.theta)
        s = math.sin(-self.origin.theta)
        gx = c * (x - self.origin.x) - s * (y - self.origin.y)
        gy = s * (x - self.origin.x) + c * (y - self.origin.y)
        return int(math.floor(gx / self.resolution)), int(math.floor(gy / self.resolution))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        gx = (ix + 0.5) * self.resolution
        gy = (iy + 0.5) * self.resolution
        c = math.cos(self.origin.theta)
        s = math.sin(self.origin.theta)
        return self.origin.x + c * gx - s * gy, self.origin.y + s * gx + c * gy

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height


def from_static_map(grid: OccupancyGrid) -> Costmap:
    """Seed a global costmap from a static map: occupied -> lethal,
    unknown -> unknown (untraversable), free -> 0."""
    cost = np.zeros((grid.height, grid.width), dtype=np.uint8)
    cost[grid.cells == OCCUPIED] = COST_LETHAL
    cost[grid.cells == UNKNOWN] = COST_UNKNOWN
    return Costmap(grid.width, grid.height, grid.resolution, grid.origin, cost)


def empty_rolling(size_m: float, resolution: float, center: Pose2D) -> Costmap:
    """Local rolling window costmap centered on the robot, seeded free."""
    n = int(round(size_m / resolution))
    origin = _snapped_origin(center, size_m, resolution)
    return Costmap(n, n, resolution, origin, np.zeros((n, n), dtype=np.uint8), rolling=True)


def _snapped_origin(center: Pose2D, size_m: float, resolution: float) -> Pose2D:
    # Snap to the global cell lattice so recentering copies cells exactly.
    ox = math.floor((center.x - size_m / 2.0) / resolution) * resolution
    oy = math.floor((center.y - size_m / 2.0) / resolution) * resolution
    return Pose2D(ox, oy, 0.0)


def recenter(cm: Costmap, center: Pose2D) -> Costmap:
    """Shift a rolling window onto a new center, copying overlapping cells
    exactly and seeding newly exposed cells free."""
    if not cm.rolling:
        raise ValueError("recenter only applies to rolling costmaps")
    size_m = cm.width * cm.resolution
    new_origin = _snapped_origin(center, size_m, cm.resolution)
    shift_x = int(round((new_origin.x - cm.origin.x) / cm.resolution))
    shift_y = int(round((new_origin.y - cm.origin.y) / cm.resolution))
    if shift_x == 0 and shift_y == 0:
        return cm
    cost = np.zeros_like(cm.cost)
    src_x = slice(max(0, shift_x), min(cm.width, cm.width + shift_x))
    src_y = slice(max(0, shift_y), min(cm.height, cm.height + shift_y))
    dst_x = slice(max(0, -shift_x), max(0, -shift_x) + (src_x.stop - src_x.start))
    dst_y = slice(max(0, -shift_y), max(0, -shift_y) + (src_y.stop - src_y.start))
    if src_x.stop > src_x.start and src_y.stop > src_y.start:
        cost[dst_y, dst_x] = cm.cost[src_y, src_x]
    return replace(cm, origin=new_origin, cost=cost)


def mark_and_clear(cm: Costmap, scan: LaserScan, robot_pose: Pose2D, cfg: CostmapConfig) -> Costmap:
    """Fold one scan into the costmap.

    Cells traversed by each beam up to min(range, raytrace_range) are set
    free; endpoints of real returns (range < range_max) are excluded from
    clearing, and those within obstacle_range are marked lethal. Marking is
    applied after clearing, so a cell marked by one beam is never wiped by
    another beam of the same scan.
    """
    cost = cm.cost.copy()
    angles = robot_pose.theta + scan.bearings
    dirx = np.cos(angles)
    diry = np.sin(angles)
    real = scan.ranges < scan.range_max

    # Clearing: dense samples along each beam, mapped to unique cells.
    clear_len = np.minimum(scan.ranges, cfg.raytrace_range)
    step = cm.resolution * _CLEAR_STEP_CELLS
    n_steps = int(math.floor(cfg.raytrace_range / step)) + 1
    ts = np.arange(n_steps) * step
    t_grid = np.broadcast_to(ts, (len(scan), n_steps))
    valid = t_grid <= clear_len[:, None]
    px = robot_pose.x + t_grid * dirx[:, None]
    py = robot_pose.y + t_grid * diry[:, None]
    flat_x = px[valid]
    flat_y = py[valid]
    ix, iy = _cells_of(cm, flat_x, flat_y)
    inside = (ix >= 0) & (ix < cm.width) & (iy >= 0) & (iy < cm.height)
    clear_keys = np.unique(iy[inside] * cm.width + ix[inside])

    # Endpoint cells of real returns are never cleared.
    ex = robot_pose.x + scan.ranges[real] * dirx[real]
    ey = robot_pose.y + scan.ranges[real] * diry[real]
    eix, eiy = _cells_of(cm, ex, ey)
    e_inside = (eix >= 0) & (eix < cm.width) & (eiy >= 0) & (eiy < cm.height)
    endpoint_keys = np.unique(eiy[e_inside] * cm.width + eix[e_inside])

    clear_keys = np.setdiff1d(clear_keys, endpoint_keys, assume_unique=True)
    cost.ravel()[clear_keys] = COST_FREE

    # Marking: real returns within obstacle range become lethal.
    mark = real & (scan.ranges < cfg.obstacle_range)
    mx = robot_pose.x + scan.ranges[mark] * dirx[mark]
    my = robot_pose.y + scan.ranges[mark] * diry[mark]
    mix, miy = _cells_of(cm, mx, my)
    m_inside = (mix >= 0) & (mix < cm.width) & (miy >= 0) & (miy < cm.height)
    cost[miy[m_inside], mix[m_inside]] = COST_LETHAL

    return replace(cm, cost=cost)


def mark_scan(cm: Costmap, scan: LaserScan, robot_pose: Pose2D, cfg: CostmapConfig) -> Costmap:
    """Marking-only variant of mark_and_clear (no raytrace clearing)."""
    cost = cm.cost.copy()
    angles = robot_pose.theta + scan.bearings
    mark = (scan.ranges < scan.range_max) & (scan.ranges < cfg.obstacle_range)
    mx = robot_pose.x + scan.ranges[mark] * np.cos(angles[mark])
    my = robot_pose.y + scan.ranges[mark] * np.sin(angles[mark])
    mix, miy = _cells_of(cm, mx, my)
    inside = (mix >= 0) & (mix < cm.width) & (miy >= 0) & (miy < cm.height)
    cost[miy[inside], mix[inside]] = COST_LETHAL
    return replace(cm, cost=cost)


def _cells_of(cm: Costmap, x: np.ndarray, y: np.ndarray):
    c = math.cos(-cm.origin.theta)
    s = math.sin(-cm.origin.theta)
    gx = c * (x - cm.origin.x) - s * (y - cm.origin.y)
    gy = s * (x - cm.origin.x) + c * (y - cm.origin.y)
    return (
        np.floor(gx / cm.resolution).astype(np.int64),
        np.floor(gy / cm.resolution).astype(np.int64),
    )


def inflate(cm: Costmap, cfg: CostmapConfig) -> Costmap:
    """Spread cost outward from lethal cells.

    Within robot_radius the cell becomes inscribed; inside the inflation
    band the cost decays as round(252 * exp(-k (d - robot_radius))); beyond
    inflation_radius cells are untouched. Lethal cells keep their value.
    """
    lethal = cm.cost == COST_LETHAL
    cost = cm.cost.copy()
    if not lethal.any():
        return replace(cm, cost=cost)
    d = ndimage.distance_transform_edt(~lethal) * cm.resolution
    band = (~lethal) & (d <= cfg.inflation_radius)
    inscribed = band & (d <= cfg.robot_radius)
    decay = band & ~inscribed
    cost[inscribed] = COST_INSCRIBED
    cost[decay] = np.rint(
        252.0 * np.exp(-cfg.cost_scaling_factor * (d[decay] - cfg.robot_radius))
    ).astype(np.uint8)
    return replace(cm, cost=cost)


def save_snapshot(cm: Costmap, path_base, cfg: CostmapConfig | None = None) -> None:
    """Dump the costmap as a grayscale PGM plus a JSON sidecar."""
    from pathlib import Path

    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".pgm").write_bytes(write_pgm(255 - cm.cost))
    meta = {
        "width": cm.width,
        "height": cm.height,
        "resolution": cm.resolution,
        "origin": [cm.origin.x, cm.origin.y, cm.origin.theta],
        "rolling": cm.rolling,
        "encoding": "pixel = 255 - cost",
    }
    if cfg is not None:
        meta["config"] = {
            "obstacle_range": cfg.obstacle_range,
            "raytrace_range": cfg.raytrace_range,
            "inflation_radius": cfg.inflation_radius,
            "robot_radius": cfg.robot_radius,
            "update_frequency": cfg.update_frequency,
            "publish_frequency": cfg.publish_frequency,
            "cost_scaling_factor": cfg.cost_scaling_factor,
        }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2))
