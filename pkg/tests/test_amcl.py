import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from conftest import grid_from_rows
from mclnav.amcl import (
    AmclConfig,
    Belief,
    StaleScanError,
    estimate,
    init_from_pose,
    init_global,
    kld_sample_size,
    multinomial_resample,
    occupied_bin_count,
    step,
    systematic_resample,
)
from mclnav.geometry import Pose2D
from mclnav.motion import MotionNoise, OdometryReading
from mclnav.sensing import LaserScan, SensorModelConfig
from mclnav.world_map import FREE, build_distance_field

TABLE = AmclConfig()  # min 25, max 200, Table-2 alphas and laser params


def rng_for(seed=0):
    return np.random.default_rng(seed)


def empty_scan(stamp=0.0):
    return LaserScan(bearings=np.array([0.0]), ranges=np.array([30.0]),
                     range_min=0.1, range_max=30.0, stamp=stamp)


def still_reading():
    return OdometryReading(Pose2D(0, 0, 0), Pose2D(0, 0, 0))


@pytest.fixture()
def open_room():
    rows = ["#" * 12] + ["#" + "." * 10 + "#" for _ in range(10)] + ["#" * 12]
    grid = grid_from_rows(rows[::-1], resolution=1.0)
    return grid, build_distance_field(grid, 2.0)


# -- initialization -------------------------------------------------------------


def test_init_from_pose_zero_covariance_is_exact():
    b = init_from_pose(TABLE, Pose2D(0, 0, 0), (0.0, 0.0, 0.0), rng_for())
    assert len(b) == 200
    assert np.all(b.poses == 0.0)
    assert np.allclose(b.weights, 1.0 / 200)


def test_init_from_pose_weights_sum_to_one():
    b = init_from_pose(TABLE, Pose2D(1, 2, 0.5), (0.3, 0.1, 0.05), rng_for(5))
    assert b.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_init_from_pose_sample_variance():
    cfg = AmclConfig(min_particles=25, max_particles=20000)
    n = cfg.max_particles
    b = init_from_pose(cfg, Pose2D(0, 0, 0), (0.25, 0.04, 0.01), rng_for(2))
    var = b.poses[:, 0].var(ddof=1)
    se = 0.25 * math.sqrt(2.0 / (n - 1))
    assert abs(var - 0.25) < 3 * se


def test_init_from_pose_rejects_negative_covariance():
    with pytest.raises(ValueError):
        init_from_pose(TABLE, Pose2D(0, 0, 0), (-0.1, 0, 0), rng_for())


def test_init_global_single_free_cell():
    grid = grid_from_rows(["###", "#.#", "###"])
    b = init_global(TABLE, grid, rng_for(1))
    assert len(b) == 200
    assert np.all((b.poses[:, 0] >= 1.0) & (b.poses[:, 0] <= 2.0))
    assert np.all((b.poses[:, 1] >= 1.0) & (b.poses[:, 1] <= 2.0))


def test_init_global_all_particles_on_free_cells(maze):
    b = init_global(TABLE, maze.grid, rng_for(3))
    for x, y in b.poses[:, :2]:
        ix, iy = maze.grid.world_to_cell(x, y)
        assert maze.grid.cells[iy, ix] == FREE


def test_init_global_requires_free_cell():
    grid = grid_from_rows(["##", "##"])
    with pytest.raises(ValueError):
        init_global(TABLE, grid, rng_for())


def test_init_global_uniformity_chi_square(open_room):
    from scipy import stats

    grid, _ = open_room
    cfg = AmclConfig(min_particles=25, max_particles=10_000)
    b = init_global(cfg, grid, rng_for(7))
    # occupancy counts over the 100 free cells
    counts = np.zeros(grid.cells.shape, dtype=int)
    for x, y in b.poses[:, :2]:
        ix, iy = grid.world_to_cell(x, y)
        counts[iy, ix] += 1
    free = grid.cells == FREE
    assert counts[~free].sum() == 0
    _, p = stats.chisquare(counts[free])
    assert p > 0.01
    # headings uniform over 12 bins
    bins = np.floor((b.poses[:, 2] + math.pi) / (math.pi / 6)).astype(int).clip(0, 11)
    _, p_theta = stats.chisquare(np.bincount(bins, minlength=12))
    assert p_theta > 0.01


# -- KLD sample size -------------------------------------------------------------


def kld_oracle(k, err, z):
    """High-precision evaluation of the chi-square upper-bound formula."""
    getcontext().prec = 60
    k = Decimal(k)
    x = Decimal(2) / (Decimal(9) * (k - 1))
    val = (k - 1) / (Decimal(2) * Decimal(repr(err))) * (
        (Decimal(1) - x + x.sqrt() * Decimal(repr(z))) ** 3
    )
    return int(math.ceil(val))


def test_kld_sample_size_floor_and_ceiling():
    assert kld_sample_size(0, TABLE) == 25
    assert kld_sample_size(1, TABLE) == 25
    assert kld_sample_size(10_000, TABLE) == 200


def test_kld_sample_size_matches_high_precision_oracle():
    cfg = AmclConfig(min_particles=1, max_particles=10**9, kld_err=0.05, kld_z=2.326)
    for k in list(range(2, 200)) + [500, 1000, 4321]:
        expect = kld_oracle(k, 0.05, 2.326)
        assert kld_sample_size(k, cfg) == expect, k


def test_kld_sample_size_k10_reference_value():
    cfg = AmclConfig(min_particles=1, max_particles=10**9, kld_err=0.05, kld_z=2.326)
    assert kld_sample_size(10, cfg) == kld_oracle(10, 0.05, 2.326)
    # clamped by the production bounds
    assert kld_sample_size(10, TABLE) == min(max(kld_oracle(10, 0.05, 2.326), 25), 200)


def test_kld_sample_size_monotone_in_k():
    cfg = AmclConfig(min_particles=1, max_particles=10**9)
    values = [kld_sample_size(k, cfg) for k in range(2, 300)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_occupied_bin_count():
    poses = np.array([
        [0.1, 0.1, 0.0],
        [0.2, 0.3, 0.1],    # same bin as above
        [0.9, 0.1, 0.0],    # new x bin
        [0.1, 0.1, 3.0],    # new theta bin
    ])
    assert occupied_bin_count(poses, (0.5, 0.5, math.pi / 12)) == 3


# -- resampling --------------------------------------------------------------------


def test_systematic_resample_equal_weights_is_identity():
    w = np.full(8, 1.0 / 8)
    for u in (0.0, 0.3, 0.77, 0.999):
        idx = systematic_resample(w, 8, u)
        assert list(idx) == list(range(8))


def test_systematic_resample_degenerate_weights():
    w = np.zeros(16)
    w[0] = 1.0
    idx = systematic_resample(w, 16, 0.42)
    assert np.all(idx == 0)


@pytest.mark.parametrize("weights", [
    [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.125] * 8,
    [0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05],
    [0.7, 0.05, 0.05, 0.05, 0.05, 0.04, 0.03, 0.03],
    [0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.0, 0.0],
])
def test_systematic_copy_counts_bracketed_exhaustively(weights):
    w = np.array(weights)
    m = 8
    grid = np.linspace(0.0, 1.0, 1000, endpoint=False)
    totals = np.zeros(m)
    for u in grid:
        idx = systematic_resample(w, m, float(u))
        counts = np.bincount(idx, minlength=m)
        for i in range(m):
            assert math.floor(m * w[i]) <= counts[i] <= math.ceil(m * w[i]), (i, u)
        totals += counts
    # expected copy count over the uniform draw: m * w_i (within grid error)
    np.testing.assert_allclose(totals / len(grid), m * w, atol=0.01)


def test_multinomial_resample_distribution():
    w = np.array([0.6, 0.3, 0.1])
    idx = multinomial_resample(w, 30_000, rng_for(11))
    freq = np.bincount(idx, minlength=3) / 30_000
    assert np.abs(freq - w).max() < 0.01


# -- step ---------------------------------------------------------------------------


def static_cfg(**kw):
    defaults = dict(
        min_particles=8,
        max_particles=8,
        motion_noise=MotionNoise(),
        resample_interval=1,
        sensor=SensorModelConfig(),
    )
    defaults.update(kw)
    return AmclConfig(**defaults)


def test_step_no_motion_empty_scan_is_identity(open_room):
    grid, field = open_room
    cfg = static_cfg()
    poses = np.array([[2.0 + i, 2.0, 0.1 * i] for i in range(8)])
    belief = Belief(poses=poses, weights=np.full(8, 1 / 8))
    out = step(belief, still_reading(), empty_scan(), field, grid, cfg, 0.0, rng_for(3))
    # equal weights + systematic resampling at n == M: identical multiset
    assert np.array_equal(out.poses, poses)
    assert np.allclose(out.weights, 1 / 8)


def test_step_concentrates_all_weight_on_single_survivor(open_room):
    grid, field = open_room
    cfg = static_cfg()
    # one particle adjacent to the east wall, rest mid-room: ten forward
    # beam endpoints land on the wall only for particle 0, collapsing the
    # normalized weight of every other particle to ~1e-18
    poses = np.tile(np.array([2.0, 2.0, 0.0]), (8, 1))
    poses[0] = [10.2, 6.0, 0.0]
    belief = Belief(poses=poses, weights=np.full(8, 1 / 8))
    scan = LaserScan(bearings=np.full(10, 0.0), ranges=np.full(10, 1.0),
                     range_min=0.1, range_max=30.0, stamp=0.0)
    out = step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(4))
    assert np.allclose(out.poses, poses[0])


def test_step_rejects_stale_scan(open_room):
    grid, field = open_room
    cfg = static_cfg(transform_tolerance=0.2)
    belief = Belief(poses=np.zeros((8, 3)) + 2.0, weights=np.full(8, 1 / 8))
    with pytest.raises(StaleScanError):
        step(belief, still_reading(), empty_scan(stamp=0.0), field, grid, cfg, 0.5, rng_for())


def test_step_particle_count_stays_in_bounds(open_room):
    grid, field = open_room
    cfg = AmclConfig(min_particles=25, max_particles=200, resample_interval=1,
                     motion_noise=MotionNoise(0.005, 0.005, 0.01, 0.005))
    belief = init_global(cfg, grid, rng_for(5))
    u = OdometryReading(Pose2D(0, 0, 0), Pose2D(0.05, 0, 0))
    scan = LaserScan(bearings=np.linspace(-1, 1, 20), ranges=np.full(20, 4.0),
                     range_min=0.1, range_max=30.0)
    for k in range(10):
        scan = LaserScan(bearings=scan.bearings, ranges=scan.ranges,
                         range_min=0.1, range_max=30.0, stamp=0.0)
        belief = step(belief, u, scan, field, grid, cfg, 0.0, rng_for(100 + k))
        assert cfg.min_particles <= len(belief) <= cfg.max_particles
        assert belief.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.isfinite(belief.weights).all()
        assert np.isfinite(belief.poses).all()


def test_step_is_deterministic_given_seed(open_room):
    grid, field = open_room
    cfg = AmclConfig(min_particles=10, max_particles=50, resample_interval=2)
    u = OdometryReading(Pose2D(0, 0, 0), Pose2D(0.1, 0, 0.05))
    scan = LaserScan(bearings=np.linspace(-1, 1, 15), ranges=np.full(15, 3.0),
                     range_min=0.1, range_max=30.0)
    outs = []
    for _ in range(2):
        belief = init_from_pose(cfg, Pose2D(5, 5, 0), (0.1, 0.1, 0.05), rng_for(9))
        for k in range(6):
            belief = step(belief, u, scan, field, grid, cfg, 0.0, rng_for(50 + k))
        outs.append(belief)
    assert np.array_equal(outs[0].poses, outs[1].poses)
    assert np.array_equal(outs[0].weights, outs[1].weights)


def test_step_resample_interval_skips_resampling(open_room):
    grid, field = open_room
    cfg = static_cfg(resample_interval=2, max_particles=8, min_particles=2)
    # beam endpoints land at x = 4..11: the two easternmost particles sit
    # close enough to the x=11 wall to score differently from the rest
    poses = np.array([[2.0 + i, 2.0, 0.0] for i in range(8)])
    belief = Belief(poses=poses, weights=np.full(8, 1 / 8))
    scan = LaserScan(bearings=np.array([0.0]), ranges=np.array([2.0]),
                     range_min=0.1, range_max=30.0)
    out1 = step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(6))
    # first call (step_index 1, interval 2): weights updated, no resample
    assert len(out1) == 8
    assert not np.allclose(out1.weights, 1 / 8)
    out2 = step(out1, still_reading(), scan, field, grid, cfg, 0.0, rng_for(7))
    # second call resamples back to uniform weights
    assert np.allclose(out2.weights, 1.0 / len(out2))


def test_step_all_weights_zero_recovers_uniform(open_room):
    grid, field = open_room
    # z_rand = 0 and z_hit = 0 force literal zero per-beam probability
    sensor = SensorModelConfig(z_hit=0.0, z_rand=0.0, z_short=0.0, z_max=1.0)
    cfg = static_cfg(sensor=sensor)
    poses = np.tile(np.array([5.0, 5.0, 0.0]), (8, 1))
    belief = Belief(poses=poses, weights=np.full(8, 1 / 8))
    scan = LaserScan(bearings=np.array([0.0]), ranges=np.array([2.0]),
                     range_min=0.1, range_max=30.0)
    out = step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(8))
    assert out.diverged
    assert out.weights.sum() == pytest.approx(1.0)


def test_step_multinomial_resampler_fidelity_mode(open_room):
    grid, field = open_room
    cfg = static_cfg(resampler="multinomial", max_particles=64, min_particles=64)
    poses = np.tile(np.array([10.2, 6.0, 0.0]), (64, 1))
    poses[32:] = [2.0, 2.0, 0.0]
    belief = Belief(poses=poses, weights=np.full(64, 1 / 64))
    scan = LaserScan(bearings=np.full(6, 0.0), ranges=np.full(6, 1.0),
                     range_min=0.1, range_max=30.0)
    out = step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(12))
    # wall-adjacent hypothesis dominates; multinomial draws land there
    assert np.allclose(out.poses, [10.2, 6.0, 0.0])
    assert len(out) == 64


def test_step_beam_model_path(open_room):
    grid, field = open_room
    sensor = SensorModelConfig(model_type="beam", max_beams=5)
    cfg = static_cfg(sensor=sensor)
    # particle 0 at the true pose; particle 1 shifted a meter
    poses = np.array([[6.0, 6.0, 0.0]] * 4 + [[5.0, 5.0, 0.5]] * 4)
    belief = Belief(poses=poses, weights=np.full(8, 1 / 8))
    # a scan consistent with (6, 6, 0): wall east at 5.0 m
    from mclnav.world_map import raycast_batch

    bearings = np.linspace(-0.8, 0.8, 5)
    truth = raycast_batch(grid, Pose2D(6.0, 6.0, 0.0), bearings, 30.0)
    scan = LaserScan(bearings=bearings, ranges=truth, range_min=0.1, range_max=30.0)
    out = step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(13))
    assert np.allclose(out.poses[:, 0], 6.0)
    assert np.allclose(out.poses[:, 1], 6.0)


def test_step_does_not_mutate_input(open_room):
    grid, field = open_room
    cfg = static_cfg()
    poses = np.array([[2.0 + i, 2.0, 0.0] for i in range(8)])
    belief = Belief(poses=poses.copy(), weights=np.full(8, 1 / 8))
    scan = LaserScan(bearings=np.array([0.0]), ranges=np.array([1.5]),
                     range_min=0.1, range_max=30.0)
    step(belief, still_reading(), scan, field, grid, cfg, 0.0, rng_for(10))
    assert np.array_equal(belief.poses, poses)
    assert np.allclose(belief.weights, 1 / 8)


# -- estimate ---------------------------------------------------------------------


def test_estimate_single_particle():
    b = Belief(poses=np.array([[1.0, 2.0, 0.5]]), weights=np.array([1.0]))
    mean, cov, converged = estimate(b)
    assert (mean.x, mean.y, mean.theta) == pytest.approx((1.0, 2.0, 0.5))
    assert np.allclose(cov, 0.0)
    assert converged


def test_estimate_circular_mean_across_pi():
    b = Belief(
        poses=np.array([[0.0, 0.0, 3.1], [0.0, 0.0, -3.1]]),
        weights=np.array([0.5, 0.5]),
    )
    mean, _, _ = estimate(b)
    assert abs(mean.theta) == pytest.approx(math.pi, abs=1e-9)


def test_estimate_symmetric_positions_center():
    b = Belief(
        poses=np.array([[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0],
                        [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]]),
        weights=np.full(4, 0.25),
    )
    mean, cov, converged = estimate(b)
    assert mean.x == pytest.approx(0.0)
    assert mean.y == pytest.approx(0.0)
    assert not converged  # spread 1 m > 0.3 m radius


def test_estimate_empty_belief_raises():
    b = Belief(poses=np.zeros((0, 3)), weights=np.zeros(0))
    with pytest.raises(ValueError):
        estimate(b)


def test_estimate_requires_normalized():
    b = Belief(poses=np.zeros((2, 3)), weights=np.array([2.0, 2.0]), normalized=False)
    with pytest.raises(ValueError):
        estimate(b)


def test_estimate_weighted_mean():
    b = Belief(
        poses=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        weights=np.array([0.25, 0.75]),
    )
    mean, _, _ = estimate(b)
    assert mean.x == pytest.approx(0.75)


def test_config_validation():
    with pytest.raises(ValueError):
        AmclConfig(min_particles=0)
    with pytest.raises(ValueError):
        AmclConfig(min_particles=10, max_particles=5)
    with pytest.raises(ValueError):
        AmclConfig(kld_err=0.0)
    with pytest.raises(ValueError):
        AmclConfig(resampler="bogus")


def test_belief_particles_view():
    b = Belief(poses=np.array([[1.0, 2.0, 0.3]]), weights=np.array([1.0]))
    parts = b.particles
    assert len(parts) == 1
    assert parts[0].pose == Pose2D(1.0, 2.0, 0.3)
    assert parts[0].weight == 1.0
