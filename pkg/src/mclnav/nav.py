"""Global planning and local control.

The planner is 8-connected A* over an inflated costmap with edge cost
move_length * (1 + destination_cell_cost / 256) and a Euclidean heuristic
(admissible, since every multiplier is >= 1). The controller is a
pure-pursuit tracker with a rotate-in-place finish.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .costmap import COST_INSCRIBED, Costmap
from .geometry import Pose2D, wrap_angle

SQRT2 = math.sqrt(2.0)


class PlanningError(RuntimeError):
    pass


class NoPath(PlanningError):
    pass


class StartBlocked(PlanningError):
    pass


class GoalBlocked(PlanningError):
    pass


class LostPath(RuntimeError):
    """Robot deviated from the tracked path beyond the replan threshold."""


class NavStatus(Enum):
    TRACKING = "tracking"
    ROTATING = "rotating"
    REACHED = "reached"


@dataclass(frozen=True)
class Path:
    waypoints: list[Pose2D]
    cost: float

    def __len__(self):
        return len(self.waypoints)


@dataclass(frozen=True)
class GoalTolerance:
    xy: float = 0.2
    yaw: float = 0.1

    def __post_init__(self):
        if self.xy <= 0 or self.yaw <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass(frozen=True)
class VelocityLimits:
    v_max: float = 0.5
    omega_max: float = 1.0
    lookahead: float = 0.4
    heading_gain: float = 2.0
    lost_path_dist: float = 1.0


_NEIGHBORS = [
    (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
    (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2),
]


def traversable(cm: Costmap) -> np.ndarray:
    """Cells a plan may pass through: anything below inscribed cost."""
    return cm.cost < COST_INSCRIBED


def plan(cm: Costmap, start: Pose2D, goal: Pose2D) -> Path:
    """Minimum-cost 8-connected path from start to goal over the costmap.

    Raises StartBlocked / GoalBlocked when an endpoint cell is not
    traversable and NoPath when no route exists.
    """
    free = traversable(cm)
    sx, sy = cm.world_to_cell(start.x, start.y)
    gx, gy = cm.world_to_cell(goal.x, goal.y)
    if not cm.in_bounds(sx, sy) or not free[sy, sx]:
        raise StartBlocked(f"start cell ({sx}, {sy}) not traversable")
    if not cm.in_bounds(gx, gy) or not free[gy, gx]:
        raise GoalBlocked(f"goal cell ({gx}, {gy}) not traversable")

    w, h = cm.width, cm.height
    res = cm.resolution
    cost_mult = 1.0 + cm.cost.astype(np.float64).ravel() / 256.0
    free_flat = free.ravel()
    start_i = sy * w + sx
    goal_i = gy * w + gx

    g = np.full(w * h, np.inf)
    parent = np.full(w * h, -1, dtype=np.int64)
    closed = np.zeros(w * h, dtype=bool)
    g[start_i] = 0.0

    def heuristic(i):
        dx = (i % w) - gx
        dy = (i // w) - gy
        return math.hypot(dx, dy) * res

    heap = [(heuristic(start_i), start_i)]
    while heap:
        f, i = heapq.heappop(heap)
        if closed[i]:
            continue
        closed[i] = True
        if i == goal_i:
            break
        ix = i % w
        iy = i // w
        gi = g[i]
        for dx, dy, d in _NEIGHBORS:
            nx = ix + dx
            ny = iy + dy
            if nx < 0 or nx >= w or ny < 0 or ny >= h:
                continue
            j = ny * w + nx
            if closed[j] or not free_flat[j]:
                continue
            cand = gi + d * res * cost_mult[j]
            if cand < g[j]:
                g[j] = cand
                parent[j] = i
                heapq.heappush(heap, (cand + heuristic(j), j))
    if not closed[goal_i]:
        raise NoPath(f"no route from ({start.x:.2f}, {start.y:.2f}) to ({goal.x:.2f}, {goal.y:.2f})")

    cells = []
    i = goal_i
    while i != -1:
        cells.append(i)
        i = parent[i]
    cells.reverse()

    waypoints = []
    for k, i in enumerate(cells):
        x, y = cm.cell_center(i % w, i // w)
        if k + 1 < len(cells):
            nx, ny = cm.cell_center(cells[k + 1] % w, cells[k + 1] // w)
            theta = math.atan2(ny - y, nx - x)
        else:
            theta = goal.theta
        waypoints.append(Pose2D(x, y, theta))
    return Path(waypoints=waypoints, cost=float(g[goal_i]))


def path_cells(cm: Costmap, path: Path) -> list[tuple[int, int]]:
    return [cm.world_to_cell(p.x, p.y) for p in path.waypoints]


def path_blocked(cm: Costmap, path: Path) -> bool:
    """True when any remaining waypoint sits on a now-untraversable cell."""
    free = traversable(cm)
    for ix, iy in path_cells(cm, path):
        if not cm.in_bounds(ix, iy) or not free[iy, ix]:
            return True
    return False


def control_step(
    current: Pose2D,
    path: Path,
    tol: GoalTolerance,
    limits: VelocityLimits = VelocityLimits(),
) -> tuple[float, float, NavStatus]:
    """One pure-pursuit control tick.

    Steers toward the waypoint one lookahead ahead of the nearest path
    point. Within tol.xy of the final waypoint the robot rotates in place
    toward the goal heading; within both tolerances it reports REACHED with
    zero commands (a fixed point). Raises LostPath when the robot is
    further than limits.lost_path_dist from every waypoint.
    """
    if not path.waypoints:
        raise ValueError("empty path")
    goal = path.waypoints[-1]
    d_goal = current.distance_to(goal)
    if d_goal <= tol.xy:
        err = wrap_angle(goal.theta - current.theta)
        if abs(err) <= tol.yaw:
            return 0.0, 0.0, NavStatus.REACHED
        omega = _clamp(limits.heading_gain * err, limits.omega_max)
        return 0.0, omega, NavStatus.ROTATING

    dists = [current.distance_to(p) for p in path.waypoints]
    nearest = int(np.argmin(dists))
    if dists[nearest] > limits.lost_path_dist:
        raise LostPath(f"{dists[nearest]:.2f} m from path")

    target = path.waypoints[-1]
    travelled = 0.0
    for k in range(nearest, len(path.waypoints) - 1):
        travelled += path.waypoints[k].distance_to(path.waypoints[k + 1])
        if travelled >= limits.lookahead:
            target = path.waypoints[k + 1]
            break

    err = wrap_angle(math.atan2(target.y - current.y, target.x - current.x) - current.theta)
    omega = _clamp(limits.heading_gain * err, limits.omega_max)
    # Slow through turns; never reverse.
    v = limits.v_max * max(0.0, math.cos(err)) if abs(err) < math.pi / 2 else 0.0
    return v, omega, NavStatus.TRACKING


def _clamp(v: float, bound: float) -> float:
    return max(-bound, min(bound, v))


def dump_path_csv(path: Path, file_path) -> None:
    """Write waypoints as x,y,theta rows."""
    with open(file_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "theta"])
        for p in path.waypoints:
            writer.writerow([repr(p.x), repr(p.y), repr(p.theta)])
