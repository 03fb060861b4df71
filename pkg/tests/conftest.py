import numpy as np
import pytest

from mclnav.geometry import Pose2D
from mclnav.world_map import FREE, OCCUPIED, OccupancyGrid
from mclnav import worlds


def grid_from_rows(rows, resolution=1.0, origin=Pose2D(0.0, 0.0, 0.0)):
    """Build a grid from strings: '#' occupied, '.' free, '?' unknown.

    rows[0] is the bottom row (iy = 0), matching world y order.
    """
    lookup = {"#": OCCUPIED, ".": FREE, "?": -1}
    cells = np.array([[lookup[ch] for ch in row] for row in rows], dtype=np.int8)
    h, w = cells.shape
    return OccupancyGrid(width=w, height=h, resolution=resolution, origin=origin, cells=cells)


@pytest.fixture(scope="session")
def maze():
    return worlds.maze_world()
