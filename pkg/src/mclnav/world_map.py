"""Occupancy-grid maps: PGM/YAML loading, ray casting, and the nearest-obstacle
distance field used by the likelihood-field sensor model.

Grid convention: `cells` is a row-major (height, width) int8 array indexed
[iy, ix]. Cell (0, 0)'s corner sits at `origin`; world coordinates of the
center of cell (ix, iy) are origin + ((ix + 0.5) * res, (iy + 0.5) * res)
rotated by origin.theta. PGM pixels map to cells in file order (pixel row 0
is grid row 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import ndimage

from .geometry import Pose2D

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

_REQUIRED_YAML_KEYS = ("image", "resolution", "origin", "occupied_thresh", "free_thresh", "negate")


class MapFormatError(ValueError):
    """Malformed PGM bytes or map YAML."""


@dataclass
class OccupancyGrid:
    """Ternary occupancy grid with world anchoring.

    cells holds FREE / OCCUPIED / UNKNOWN, shape (height, width), row-major.
    """

    width: int
    height: int
    resolution: float
    origin: Pose2D
    cells: np.ndarray

    def __post_init__(self):
        if self.resolution <= 0:
            raise MapFormatError(f"non-positive resolution {self.resolution}")
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.shape != (self.height, self.width):
            raise MapFormatError(
                f"cell array shape {self.cells.shape} does not match "
                f"{self.height}x{self.width}"
            )

    # -- coordinate transforms -------------------------------------------

    def world_to_grid_frame(self, x, y):
        """World point -> meters in the grid frame (origin corner at 0,0)."""
        c = math.cos(-self.origin.theta)
        s = math.sin(-self.origin.theta)
        dx = np.asarray(x, dtype=float) - self.origin.x
        dy = np.asarray(y, dtype=float) - self.origin.y
        return c * dx - s * dy, s * dx + c * dy

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        gx, gy = self.world_to_grid_frame(x, y)
        return int(math.floor(gx / self.resolution)), int(math.floor(gy / self.resolution))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        gx = (ix + 0.5) * self.resolution
        gy = (iy + 0.5) * self.resolution
        c = math.cos(self.origin.theta)
        s = math.sin(self.origin.theta)
        return self.origin.x + c * gx - s * gy, self.origin.y + s * gx + c * gy

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def cell_indices_array(self, x: np.ndarray, y: np.ndarray):
        """Vectorized world -> cell indices. Returns (ix, iy) int arrays."""
        gx, gy = self.world_to_grid_frame(x, y)
        ix = np.floor(gx / self.resolution).astype(np.int64)
        iy = np.floor(gy / self.resolution).astype(np.int64)
        return ix, iy

    def state_at(self, x: float, y: float) -> int:
        ix, iy = self.world_to_cell(x, y)
        if not self.in_bounds(ix, iy):
            raise IndexError(f"point ({x}, {y}) outside map")
        return int(self.cells[iy, ix])

    def occupied_mask(self) -> np.ndarray:
        return self.cells == OCCUPIED

    def free_mask(self) -> np.ndarray:
        return self.cells == FREE


@dataclass
class DistanceField:
    """Per-cell Euclidean distance (meters) to the nearest occupied cell,
    saturated at max_dist. Zero exactly on occupied cells."""

    width: int
    height: int
    resolution: float
    origin: Pose2D
    max_dist: float
    dist: np.ndarray = field(repr=False)

    def distance_at_cells(self, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        """Distance lookup with out-of-map cells mapped to max_dist."""
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        out = np.full(ix.shape, self.max_dist, dtype=float)
        out[inside] = self.dist[iy[inside], ix[inside]]
        return out


# -- PGM / YAML loading ---------------------------------------------------


def parse_pgm(data: bytes) -> np.ndarray:
    """Parse binary (P5) PGM bytes into a (rows, cols) uint8 array.

    Only maxval 255 raw PGM is accepted; ASCII (P2) is rejected.
    """
    if not data.startswith(b"P5"):
        raise MapFormatError("not a binary P5 PGM")
    # Header tokens may be separated by arbitrary whitespace and '#' comments.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MapFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise MapFormatError(f"bad PGM header token: {e}") from e
    if width <= 0 or height <= 0:
        raise MapFormatError(f"bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise MapFormatError(f"unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise MapFormatError(
            f"pixel count mismatch: header says {width * height}, got {len(pixels)}"
        )
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def write_pgm(values: np.ndarray) -> bytes:
    """Encode a (rows, cols) uint8 array as binary P5 bytes."""
    arr = np.asarray(values, dtype=np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def load_map(yaml_text: str, pgm_bytes: bytes) -> OccupancyGrid:
    """Build an OccupancyGrid from map YAML metadata plus P5 PGM pixels.

    Per-pixel occupancy probability is (255 - v) / 255, or v / 255 when
    negate is set. A cell is OCCUPIED above occupied_thresh, FREE below
    free_thresh, UNKNOWN in between.
    """
    meta = yaml.safe_load(yaml_text)
    if not isinstance(meta, dict):
        raise MapFormatError("map YAML is not a mapping")
    missing = [k for k in _REQUIRED_YAML_KEYS if k not in meta]
    if missing:
        raise MapFormatError(f"map YAML missing keys: {missing}")
    resolution = float(meta["resolution"])
    if resolution <= 0:
        raise MapFormatError(f"non-positive resolution {resolution}")
    origin = meta["origin"]
    if len(origin) != 3:
        raise MapFormatError("origin must be [x, y, yaw]")
    occupied_thresh = float(meta["occupied_thresh"])
    free_thresh = float(meta["free_thresh"])
    negate = int(meta["negate"])

    pixels = parse_pgm(pgm_bytes)
    v = pixels.astype(np.float64)
    p = v / 255.0 if negate else (255.0 - v) / 255.0
    cells = np.full(pixels.shape, UNKNOWN, dtype=np.int8)
    cells[p > occupied_thresh] = OCCUPIED
    cells[p < free_thresh] = FREE

    h, w = pixels.shape
    return OccupancyGrid(
        width=w,
        height=h,
        resolution=resolution,
        origin=Pose2D(float(origin[0]), float(origin[1]), float(origin[2])),
        cells=cells,
    )


def load_map_file(yaml_path) -> OccupancyGrid:
    """Load a map whose YAML references a PGM image relative to itself."""
    from pathlib import Path

    yaml_path = Path(yaml_path)
    yaml_text = yaml_path.read_text()
    meta = yaml.safe_load(yaml_text)
    if not isinstance(meta, dict) or "image" not in meta:
        raise MapFormatError(f"{yaml_path} is not a map YAML")
    image = Path(meta["image"])
    if not image.is_absolute():
        image = yaml_path.parent / image
    return load_map(yaml_text, image.read_bytes())


# -- ray casting -----------------------------------------------------------

# Sphere-trace jumps stop this many cells short of the field distance so a
# jump can never land inside or beyond an occupied cell.
_JUMP_MARGIN_CELLS = 1.5


def raycast(
    grid: OccupancyGrid,
    origin: Pose2D,
    bearing: float,
    max_range: float,
    *,
    block_unknown: bool = False,
    field: DistanceField | None = None,
) -> float:
    """Distance along a ray to the first blocking cell boundary.

    The ray starts at `origin` and points along origin.theta + bearing.
    Returns max_range if nothing is hit inside the map. Blocking cells are
    OCCUPIED, plus UNKNOWN when block_unknown is set. Passing the map's
    distance field lets long free stretches be skipped; the returned
    distance is the same either way.
    """
    if max_range <= 0:
        raise ValueError(f"max_range must be positive, got {max_range}")
    gx, gy = grid.world_to_grid_frame(origin.x, origin.y)
    if not (0 <= gx < grid.width * grid.resolution and 0 <= gy < grid.height * grid.resolution):
        raise IndexError(f"raycast start ({origin.x}, {origin.y}) outside map")
    theta = origin.theta + bearing - grid.origin.theta
    out = _raycast_core(
        grid.cells,
        grid.resolution,
        np.array([gx]),
        np.array([gy]),
        np.array([math.cos(theta)]),
        np.array([math.sin(theta)]),
        float(max_range),
        block_unknown,
        field.dist if field is not None else None,
    )
    return float(out[0])


def raycast_batch(
    grid: OccupancyGrid,
    origin: Pose2D,
    bearings: np.ndarray,
    max_range: float,
    *,
    block_unknown: bool = False,
    field: DistanceField | None = None,
) -> np.ndarray:
    """raycast() over many bearings from one origin, as a single array pass."""
    gx, gy = grid.world_to_grid_frame(origin.x, origin.y)
    if not (0 <= gx < grid.width * grid.resolution and 0 <= gy < grid.height * grid.resolution):
        raise IndexError(f"raycast start ({origin.x}, {origin.y}) outside map")
    bearings = np.asarray(bearings, dtype=float)
    theta = origin.theta + bearings - grid.origin.theta
    n = len(bearings)
    return _raycast_core(
        grid.cells,
        grid.resolution,
        np.full(n, gx),
        np.full(n, gy),
        np.cos(theta),
        np.sin(theta),
        float(max_range),
        block_unknown,
        field.dist if field is not None else None,
    )


def _raycast_core(cells, res, sx, sy, dx, dy, max_range, block_unknown, field_dist):
    """Lockstep DDA over a batch of rays, in grid-frame meters.

    Each ray walks every cell it pierces (Amanatides-Woo traversal); the
    hit distance is the ray parameter at which it enters the first blocking
    cell. Boundary crossings are recomputed from cell indices at every
    step, so the walk is a pure function of (start, direction, cell): when
    a distance field is supplied, rays far from any obstacle jump ahead by
    the field value and land on exactly the same boundaries the plain walk
    would find.
    """
    h, w = cells.shape
    n = len(sx)
    blocked = cells == OCCUPIED
    if block_unknown:
        blocked = blocked | (cells == UNKNOWN)

    result = np.full(n, max_range, dtype=float)
    ix = np.floor(sx / res).astype(np.int64)
    iy = np.floor(sy / res).astype(np.int64)
    np.clip(ix, 0, w - 1, out=ix)
    np.clip(iy, 0, h - 1, out=iy)

    hit_start = blocked[iy, ix]
    result[hit_start] = 0.0
    live = ~hit_start

    # Compacted per-ray state; `ids` maps rows back to result slots.
    ids = np.nonzero(live)[0]
    ix, iy = ix[ids], iy[ids]
    sx, sy, dx, dy = sx[ids], sy[ids], dx[ids], dy[ids]
    t = np.zeros(ids.size)
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore"):
        inv_dx = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_dy = np.where(dy != 0, 1.0 / dy, np.inf)
    off_x = (step_x > 0).astype(np.int64)
    off_y = (step_y > 0).astype(np.int64)

    margin = _JUMP_MARGIN_CELLS * res
    jump_threshold = margin + res  # only jump when it buys more than a cell

    while ids.size:
        if field_dist is not None:
            safe = field_dist[iy, ix] - margin
            jump = safe > jump_threshold
            if np.any(jump):
                t = np.where(jump, t + safe, t)
                ix = np.where(jump, np.floor((sx + t * dx) / res).astype(np.int64), ix)
                iy = np.where(jump, np.floor((sy + t * dy) / res).astype(np.int64), iy)
                keep = ~(jump & (t >= max_range))  # jumped past max_range: no hit
                if not keep.all():
                    (ids, ix, iy, sx, sy, dx, dy, t, step_x, step_y, inv_dx, inv_dy,
                     off_x, off_y) = (
                        arr[keep] for arr in (ids, ix, iy, sx, sy, dx, dy, t, step_x,
                                              step_y, inv_dx, inv_dy, off_x, off_y)
                    )
                    jump = jump[keep]
                if ids.size == 0:
                    break
                moved = jump  # rays that jumped skip this step's DDA advance
            else:
                moved = None
        else:
            moved = None

        # Next crossing per axis, from the current cell index.
        with np.errstate(invalid="ignore"):
            t_max_x = np.where(np.isinf(inv_dx), np.inf, ((ix + off_x) * res - sx) * inv_dx)
            t_max_y = np.where(np.isinf(inv_dy), np.inf, ((iy + off_y) * res - sy) * inv_dy)
        go_x = t_max_x < t_max_y
        t_enter = np.where(go_x, t_max_x, t_max_y)
        nix = ix + np.where(go_x, step_x, 0)
        niy = iy + np.where(go_x, 0, step_y)
        if moved is not None:
            # Jumped rays stay put this iteration; their cell is known free.
            nix = np.where(moved, ix, nix)
            niy = np.where(moved, iy, niy)
            t_enter = np.where(moved, t, t_enter)
        ix, iy = nix, niy

        oob = (ix < 0) | (ix >= w) | (iy < 0) | (iy >= h)
        past = t_enter >= max_range
        keep = ~(oob | past)
        if not keep.all():
            (ids, ix, iy, sx, sy, dx, dy, t, step_x, step_y, inv_dx, inv_dy,
             off_x, off_y, t_enter) = (
                arr[keep] for arr in (ids, ix, iy, sx, sy, dx, dy, t, step_x, step_y,
                                      inv_dx, inv_dy, off_x, off_y, t_enter)
            )
            if moved is not None:
                moved = moved[keep]
        if ids.size == 0:
            break
        is_hit = blocked[iy, ix]
        if moved is not None:
            is_hit = is_hit & ~moved  # jump landings are inside free space
        if np.any(is_hit):
            result[ids[is_hit]] = np.minimum(t_enter[is_hit], max_range)
            keep = ~is_hit
            (ids, ix, iy, sx, sy, dx, dy, t, step_x, step_y, inv_dx, inv_dy,
             off_x, off_y, t_enter) = (
                arr[keep] for arr in (ids, ix, iy, sx, sy, dx, dy, t, step_x, step_y,
                                      inv_dx, inv_dy, off_x, off_y, t_enter)
            )
        t = t_enter
    return result


# -- distance field ---------------------------------------------------------


def build_distance_field(grid: OccupancyGrid, max_dist: float) -> DistanceField:
    """Exact saturated Euclidean distance transform over cell centers."""
    if max_dist <= 0:
        raise ValueError(f"max_dist must be positive, got {max_dist}")
    occupied = grid.occupied_mask()
    if occupied.any():
        # Exact EDT in cell units, then scale; occupied cells come out 0.
        d = ndimage.distance_transform_edt(~occupied) * grid.resolution
        dist = np.minimum(d, max_dist)
    else:
        dist = np.full((grid.height, grid.width), max_dist, dtype=float)
    return DistanceField(
        width=grid.width,
        height=grid.height,
        resolution=grid.resolution,
        origin=grid.origin,
        max_dist=float(max_dist),
        dist=dist,
    )
