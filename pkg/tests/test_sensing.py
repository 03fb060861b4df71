import math

import numpy as np
import pytest

from conftest import grid_from_rows
from mclnav.geometry import Pose2D
from mclnav.sensing import (
    BEAM,
    LaserScan,
    SensorModelConfig,
    beam_densities,
    beam_model_weight,
    likelihood_field_weight,
    likelihood_field_log_weights,
    subsample_indices,
)
from mclnav.world_map import build_distance_field, raycast

TABLE = SensorModelConfig()  # z_hit 0.95, z_rand 0.5, sigma_hit 0.2, max_dist 2.0


def scan_of(bearings, ranges, range_max=30.0, range_min=0.1):
    return LaserScan(
        bearings=np.asarray(bearings, dtype=float),
        ranges=np.asarray(ranges, dtype=float),
        range_min=range_min,
        range_max=range_max,
    )


@pytest.fixture()
def room():
    rows = ["#" * 12] + ["#" + "." * 10 + "#" for _ in range(10)] + ["#" * 12]
    grid = grid_from_rows(rows, resolution=1.0)
    return grid, build_distance_field(grid, 2.0)


# -- likelihood field --------------------------------------------------------


def test_single_beam_on_obstacle(room):
    grid, field = room
    # beam endpoint lands inside a wall cell (d = 0): p = z_hit + z_rand/z_max
    pose = Pose2D(6.0, 6.0, 0.0)
    scan = scan_of([0.0], [11.3 - 6.0])
    w = likelihood_field_weight(scan, pose, field, TABLE)
    assert w == pytest.approx(0.95 + 0.5 / 30.0, abs=1e-6)


def test_single_beam_saturated_distance():
    grid = grid_from_rows(["." * 60] * 3, resolution=1.0)
    grid.cells[1, 59] = 1
    field = build_distance_field(grid, 2.0)
    # endpoint far from any obstacle: d saturates at 2.0
    pose = Pose2D(5.0, 1.5, 0.0)
    scan = scan_of([0.0], [10.0])
    w = likelihood_field_weight(scan, pose, field, TABLE)
    expect = 0.95 * math.exp(-(2.0**2) / (2 * 0.2**2)) + 0.5 / 30.0
    assert w == pytest.approx(expect, rel=1e-9)
    assert w == pytest.approx(0.5 / 30.0, abs=1e-6)


def test_all_beams_at_range_max_gives_weight_one(room):
    grid, field = room
    scan = scan_of([0.0, 0.5, 1.0], [30.0, 30.0, 30.0])
    assert likelihood_field_weight(scan, Pose2D(6, 6, 0), field, TABLE) == 1.0


def test_out_of_map_endpoint_uses_saturation(room):
    grid, field = room
    pose = Pose2D(6.0, 6.0, 0.0)
    scan = scan_of([0.0], [25.0])  # endpoint far outside the 12 m map
    w = likelihood_field_weight(scan, pose, field, TABLE)
    expect = 0.95 * math.exp(-(2.0**2) / (2 * 0.2**2)) + 0.5 / 30.0
    assert w == pytest.approx(expect, rel=1e-9)


def test_weight_monotone_in_endpoint_distance(room):
    grid, field = room
    cfg = TABLE
    pose = Pose2D(1.6, 6.0, 0.0)
    # beam pointing +x toward the x=11 wall: closer endpoints score higher
    prev = -1.0
    for r in (6.0, 8.5, 9.5):  # d saturated, 1.0, 0.0
        w = likelihood_field_weight(scan_of([0.0], [r]), pose, field, cfg)
        assert w > prev
        prev = w
    # beyond saturation the weight is flat, never increasing with d
    w_far = likelihood_field_weight(scan_of([0.0], [3.0]), pose, field, cfg)
    w_farther = likelihood_field_weight(scan_of([0.0], [5.0]), pose, field, cfg)
    assert w_far == pytest.approx(w_farther)


def test_log_weights_match_scalar(room):
    grid, field = room
    rng = np.random.default_rng(0)
    scan = scan_of(np.linspace(-1.3, 1.3, 24), rng.uniform(1.0, 9.0, 24))
    poses = np.column_stack([
        rng.uniform(2, 10, 8), rng.uniform(2, 10, 8), rng.uniform(-3, 3, 8)
    ])
    lw = likelihood_field_log_weights(scan, poses, field, TABLE)
    for i in range(8):
        w = likelihood_field_weight(scan, Pose2D.from_array(poses[i]), field, TABLE)
        assert math.log(w) == pytest.approx(lw[i], abs=1e-9)


def test_weights_positive_and_finite(room):
    grid, field = room
    rng = np.random.default_rng(3)
    for _ in range(50):
        scan = scan_of(rng.uniform(-2, 2, 16), rng.uniform(0.1, 30.0, 16))
        pose = Pose2D(rng.uniform(1.2, 10.8), rng.uniform(1.2, 10.8), rng.uniform(-3, 3))
        w = likelihood_field_weight(scan, pose, field, TABLE)
        assert w > 0.0
        assert math.isfinite(w)


# -- subsampling ---------------------------------------------------------------


def test_subsample_noop_when_enough_budget():
    assert list(subsample_indices(10, 30)) == list(range(10))
    assert list(subsample_indices(30, 30)) == list(range(30))


def test_subsample_even_spacing_and_cap():
    idx = subsample_indices(540, 30)
    assert len(idx) <= 30
    assert idx[0] == 0
    assert idx[-1] == 539
    gaps = np.diff(idx)
    assert gaps.min() >= 17 and gaps.max() <= 20


def test_subsample_strictly_increasing():
    for n, m in [(31, 30), (100, 7), (541, 30), (2, 1)]:
        idx = subsample_indices(n, m)
        assert (np.diff(idx) > 0).all()
        assert len(idx) <= m


# -- beam model -----------------------------------------------------------------


def test_beam_density_mode_at_expected_range():
    z_star = np.array([5.0])
    at_mode = beam_densities(np.array([5.0]), z_star, 30.0, TABLE)
    off = beam_densities(np.array([5.5]), z_star, 30.0, TABLE)
    off2 = beam_densities(np.array([4.5]), z_star, 30.0, TABLE)
    assert at_mode[0] >= off[0]
    assert at_mode[0] >= off2[0]


def test_beam_density_max_range_component():
    z_star = np.array([30.0])
    d = beam_densities(np.array([30.0]), z_star, 30.0, TABLE)
    # the max-range spike dominates: z_max/eps normalized by weight sum
    w_sum = 0.95 + 0.1 + 0.05 + 0.5
    assert d[0] >= (0.05 / w_sum) / 0.01


def test_beam_density_hand_evaluated_mixture():
    cfg = TABLE
    z = 4.0
    z_star = 5.0
    w_sum = cfg.z_hit + cfg.z_short + cfg.z_max + cfg.z_rand
    p_hit = math.exp(-((z - z_star) ** 2) / (2 * cfg.sigma_hit**2)) / (
        cfg.sigma_hit * math.sqrt(2 * math.pi)
    )
    p_short = cfg.lambda_short * math.exp(-cfg.lambda_short * z) / (
        1.0 - math.exp(-cfg.lambda_short * z_star)
    )
    p_rand = 1.0 / 30.0
    expect = (cfg.z_hit * p_hit + cfg.z_short * p_short + cfg.z_rand * p_rand) / w_sum
    got = beam_densities(np.array([z]), np.array([z_star]), 30.0, cfg)
    assert got[0] == pytest.approx(expect, abs=1e-9)


def test_beam_model_weight_hand_built_map():
    rows = [
        "##########",
        "#........#",
        "#........#",
        "#........#",
        "#........#",
        "#........#",
        "#........#",
        "#........#",
        "#........#",
        "##########",
    ]
    grid = grid_from_rows(rows, resolution=1.0)
    cfg = SensorModelConfig(model_type=BEAM, max_beams=3)
    pose = Pose2D(5.0, 5.0, 0.0)
    bearings = np.array([0.0, math.pi / 2, math.pi])
    ranges = np.array([3.9, 4.1, 4.0])
    scan = scan_of(bearings, ranges)
    got = beam_model_weight(scan, pose, grid, cfg)
    expect = 1.0
    for b, z in zip(bearings, ranges):
        z_star = raycast(grid, pose, float(b), 30.0)
        expect *= float(beam_densities(np.array([z]), np.array([z_star]), 30.0, cfg)[0])
    assert got == pytest.approx(expect, rel=1e-9)


def test_sensor_config_validation():
    with pytest.raises(ValueError):
        SensorModelConfig(sigma_hit=0.0)
    with pytest.raises(ValueError):
        SensorModelConfig(max_beams=0)
    with pytest.raises(ValueError):
        SensorModelConfig(z_hit=-0.1)
    with pytest.raises(ValueError):
        SensorModelConfig(model_type="nope")


def test_scan_clamps_ranges_and_validates_shapes():
    scan = LaserScan(bearings=np.array([0.0, 1.0]), ranges=np.array([0.01, 99.0]),
                     range_min=0.1, range_max=30.0)
    assert scan.ranges[0] == 0.1
    assert scan.ranges[1] == 30.0
    with pytest.raises(ValueError):
        LaserScan(bearings=np.array([0.0]), ranges=np.array([1.0, 2.0]),
                  range_min=0.1, range_max=30.0)


def test_ground_truth_pose_beats_displaced_pose(maze):
    from mclnav import sim as sm

    grid = maze.grid
    field = build_distance_field(grid, 2.0)
    truth_field = build_distance_field(grid, 5.0)
    spec = sm.LaserSpec()
    rng = np.random.default_rng(17)
    wins = 0
    trials = 0
    free_y, free_x = np.nonzero(grid.cells == 0)
    while trials < 100:
        i = rng.integers(0, len(free_x))
        x, y = grid.cell_center(int(free_x[i]), int(free_y[i]))
        theta = rng.uniform(-math.pi, math.pi)
        # keep a clear margin so the displaced pose stays in-map
        if not (1.0 < x < 19.0 and 1.0 < y < 19.0):
            continue
        state = sm.make_state(Pose2D(x, y, theta))
        scan = sm.simulate_scan(state, grid, spec, Pose2D(0, 0, 0), 0.0,
                                np.random.default_rng(int(rng.integers(1 << 30))), truth_field)
        w_true = likelihood_field_weight(scan, Pose2D(x, y, theta), field, TABLE)
        ang = rng.uniform(-math.pi, math.pi)
        shifted = Pose2D(x + 0.5 * math.cos(ang), y + 0.5 * math.sin(ang), theta)
        w_off = likelihood_field_weight(scan, shifted, field, TABLE)
        wins += w_true >= w_off
        trials += 1
    assert wins >= 95
