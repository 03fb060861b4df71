"""Canonical test world: a 20 m x 20 m walled maze at 0.05 m/cell.

Two variants are generated: the base maze (what the localizer and planner
are given) and a blocked variant with one extra wall across the west
corridor (what the simulator uses as ground truth in detour scenarios, so
the obstacle is discovered by the sensors rather than known up front).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose2D
from .world_map import FREE, OCCUPIED, OccupancyGrid, write_pgm

SIZE_M = 20.0
RESOLUTION = 0.05

# Axis-aligned wall rectangles, meters: (x0, x1, y0, y1).
_BORDER = [
    (0.0, 20.0, 0.0, 0.2),
    (0.0, 20.0, 19.8, 20.0),
    (0.0, 0.2, 0.0, 20.0),
    (19.8, 20.0, 0.0, 20.0),
]
_WEST_CORRIDOR_WALL = (2.6, 3.0, 2.8, 17.2)
_MID_WALL = (3.0, 16.2, 12.0, 12.4)      # east gap at x > 16.2
_LOWER_WALL = (6.0, 16.0, 6.0, 6.4)      # east gap at x > 16.0
_PILLAR_CENTERS = [
    (5.0, 3.4), (9.2, 2.8), (12.0, 4.6),
    (5.2, 9.0), (10.0, 8.2), (14.0, 10.0),
    (5.5, 15.0), (9.5, 14.5), (13.5, 16.0),
]
_PILLAR_HALF = 0.25

# The blocked variant closes the west corridor here, well beyond the
# default obstacle marking range from the corridor entrance.
_CORRIDOR_BLOCK = (0.2, 2.6, 9.6, 10.0)

START = Pose2D(1.4, 1.4, math.pi / 2)
GOAL = Pose2D(1.4, 18.2, math.pi / 2)
KIDNAP_POSE = Pose2D(16.0, 3.5, 2.2)

LANDMARKS = {
    1: (1.0, 4.0),
    2: (2.0, 8.0),
    3: (1.2, 12.0),
    4: (1.8, 16.5),
    5: (6.0, 1.2),
    6: (15.0, 2.0),
    7: (17.5, 5.0),
    8: (18.5, 10.0),
    9: (17.0, 15.0),
    10: (10.0, 18.8),
    11: (4.0, 18.5),
    12: (8.0, 10.5),
}


@dataclass(frozen=True)
class MazeWorld:
    grid: OccupancyGrid
    blocked_grid: OccupancyGrid
    start: Pose2D
    goal: Pose2D
    kidnap_pose: Pose2D
    landmarks: dict[int, tuple[float, float]]


def _fill_rect(cells: np.ndarray, res: float, rect) -> None:
    x0, x1, y0, y1 = rect
    cells[
        int(round(y0 / res)) : int(round(y1 / res)),
        int(round(x0 / res)) : int(round(x1 / res)),
    ] = OCCUPIED


def _build(blocked: bool) -> OccupancyGrid:
    n = int(round(SIZE_M / RESOLUTION))
    cells = np.full((n, n), FREE, dtype=np.int8)
    rects = list(_BORDER) + [_WEST_CORRIDOR_WALL, _MID_WALL, _LOWER_WALL]
    for cx, cy in _PILLAR_CENTERS:
        rects.append((cx - _PILLAR_HALF, cx + _PILLAR_HALF, cy - _PILLAR_HALF, cy + _PILLAR_HALF))
    if blocked:
        rects.append(_CORRIDOR_BLOCK)
    for rect in rects:
        _fill_rect(cells, RESOLUTION, rect)
    return OccupancyGrid(
        width=n, height=n, resolution=RESOLUTION, origin=Pose2D(0.0, 0.0, 0.0), cells=cells
    )


def maze_world() -> MazeWorld:
    return MazeWorld(
        grid=_build(blocked=False),
        blocked_grid=_build(blocked=True),
        start=START,
        goal=GOAL,
        kidnap_pose=KIDNAP_POSE,
        landmarks=dict(LANDMARKS),
    )


def grid_to_pgm_yaml(grid: OccupancyGrid, image_name: str) -> tuple[bytes, str]:
    """Fixture file content for a generated grid (occupied black, free white)."""
    pixels = np.where(grid.cells == OCCUPIED, 0, 254).astype(np.uint8)
    yaml_text = (
        f"image: {image_name}\n"
        f"resolution: {grid.resolution}\n"
        f"origin: [{grid.origin.x}, {grid.origin.y}, {grid.origin.theta}]\n"
        "occupied_thresh: 0.65\n"
        "free_thresh: 0.196\n"
        "negate: 0\n"
    )
    return write_pgm(pixels), yaml_text


def write_world_files(out_dir) -> dict[str, Path]:
    """Write maze.pgm/.yaml and maze_blocked.pgm/.yaml into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = maze_world()
    paths = {}
    for name, grid in (("maze", world.grid), ("maze_blocked", world.blocked_grid)):
        pgm, yaml_text = grid_to_pgm_yaml(grid, f"{name}.pgm")
        (out / f"{name}.pgm").write_bytes(pgm)
        (out / f"{name}.yaml").write_text(yaml_text)
        paths[name] = out / f"{name}.yaml"
    return paths
