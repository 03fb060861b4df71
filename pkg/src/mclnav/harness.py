"""Scenario runner and CLI.

Wires the simulator to the localization filters and the navigation stack at
fixed simulation-time rates, and emits machine-readable artifacts per run:
metrics.jsonl (one record per publish tick), trajectory.csv, plan.csv,
costmap snapshots, and summary.json.

Exit codes: 0 success; 1 goal/convergence not achieved; 2 config error;
3 no path to the goal for more than 30 s; 4 filter divergence without
recovery.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import amcl as amcl_mod
from . import costmap as costmap_mod
from . import ekf as ekf_mod
from . import nav as nav_mod
from . import sim as sim_mod
from . import worlds
from .geometry import Pose2D, wrap_angle
from .motion import MotionNoise, OdometryReading
from .seeding import DOMAIN_FILTER, DOMAIN_INIT, DOMAIN_LANDMARK, DOMAIN_ODOM, DOMAIN_SCAN, stream
from .sensing import SensorModelConfig
from .world_map import build_distance_field, load_map_file

EXIT_OK = 0
EXIT_NOT_ACHIEVED = 1
EXIT_CONFIG = 2
EXIT_NO_PATH = 3
EXIT_DIVERGED = 4

NO_PATH_BUDGET_S = 30.0
LOCAL_MAP_SIZE_M = 6.0

_MAZE_CACHE: dict[str, object] = {}


class ConfigError(ValueError):
    pass


# Per-robot costmap defaults (obstacle_range, raytrace_range,
# inflation_radius, robot_radius).
_ROBOT_COSTMAP_DEFAULTS = {
    "udacity_bot": dict(obstacle_range=1.5, raytrace_range=4.0, inflation_radius=0.65, robot_radius=0.3),
    "sagar_bot": dict(obstacle_range=5.0, raytrace_range=8.0, inflation_radius=0.55, robot_radius=0.4),
}


@dataclass
class RunConfig:
    map_ref: str
    truth_map_ref: str
    robot: sim_mod.RobotConfig
    estimator: str
    seed: int
    duration: float
    out_dir: Path
    stop_when_done: bool
    odom_hz: float
    scan_hz: float
    init_mode: str
    initial_pose: Pose2D
    init_cov: tuple[float, float, float]
    amcl: amcl_mod.AmclConfig
    costmap: costmap_mod.CostmapConfig
    tolerance: nav_mod.GoalTolerance
    limits: nav_mod.VelocityLimits
    replan_period: float
    scan_sigma: float
    sim_noise: MotionNoise
    laser: sim_mod.LaserSpec
    landmark_max_range: float
    landmark_noise: tuple[float, float]
    ekf_gate: float | None
    landmarks: dict[int, tuple[float, float]] = field(default_factory=dict)
    events: list[sim_mod.ScenarioEvent] = field(default_factory=list)
    raw: dict = field(default_factory=dict)


def _resolve_map(ref: str, base_dir: Path):
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in ("maze", "maze_blocked"):
            raise ConfigError(f"unknown builtin map {ref!r}")
        if "world" not in _MAZE_CACHE:
            _MAZE_CACHE["world"] = worlds.maze_world()
        world = _MAZE_CACHE["world"]
        return world.grid if name == "maze" else world.blocked_grid
    path = Path(ref)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigError(f"map file not found: {path}")
    return load_map_file(path)


def _pose_from(value, what: str) -> Pose2D:
    try:
        x, y, theta = (float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what} must be [x, y, theta]: {e}") from e
    return Pose2D(x, y, theta)


def _events_from(raw_events) -> list[sim_mod.ScenarioEvent]:
    events = []
    for item in raw_events or []:
        if "t" not in item:
            raise ConfigError(f"event missing 't': {item}")
        t = float(item["t"])
        if "set_goal" in item:
            action = sim_mod.SetGoal(_pose_from(item["set_goal"], "set_goal"))
        elif "kidnap" in item:
            action = sim_mod.Kidnap(_pose_from(item["kidnap"], "kidnap"))
        elif "teleop" in item:
            tele = item["teleop"]
            action = sim_mod.TeleopSegment(
                v=float(tele["v"]), omega=float(tele["omega"]), duration=float(tele["duration"])
            )
        else:
            raise ConfigError(f"event needs set_goal, kidnap, or teleop: {item}")
        events.append(sim_mod.ScenarioEvent(time=t, action=action))
    return sorted(events, key=lambda e: e.time)


def load_config(
    config_path,
    robot: str | None = None,
    estimator: str | None = None,
    seed: int | None = None,
    out_dir=None,
) -> RunConfig:
    """Parse and validate a scenario YAML, with optional CLI overrides."""
    config_path = Path(config_path)
    try:
        raw = yaml.safe_load(config_path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"bad YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a YAML mapping")
    base_dir = config_path.parent

    robot_name = robot or raw.get("robot", "udacity_bot")
    if robot_name not in sim_mod.ROBOT_PRESETS:
        raise ConfigError(f"unknown robot preset {robot_name!r}")
    robot_cfg = sim_mod.ROBOT_PRESETS[robot_name]

    est = (estimator or raw.get("estimator", "amcl")).lower()
    if est == "both":
        raise ConfigError("estimator 'both' is only valid for the compare command")
    if est not in ("amcl", "ekf"):
        raise ConfigError(f"estimator must be amcl or ekf, got {est!r}")

    if seed is None:
        if "seed" not in raw:
            raise ConfigError("seed must be set explicitly (config key 'seed' or --seed)")
        seed = int(raw["seed"])

    duration = float(raw.get("duration", 60.0))
    if duration <= 0:
        raise ConfigError("duration must be > 0")

    rates = raw.get("rates", {})
    odom_hz = float(rates.get("odom_hz", 20.0))
    scan_hz = float(rates.get("scan_hz", 10.0))
    if odom_hz <= 0 or scan_hz <= 0:
        raise ConfigError("rates must be > 0")

    initial_pose = _pose_from(raw.get("initial_pose", [0.0, 0.0, 0.0]), "initial_pose")
    init_mode = raw.get("init_mode", "pose")
    if init_mode not in ("pose", "global"):
        raise ConfigError(f"init_mode must be pose or global, got {init_mode!r}")
    init_cov = tuple(float(v) for v in raw.get("init_cov", [0.25, 0.25, 0.04]))
    if len(init_cov) != 3:
        raise ConfigError("init_cov must have 3 entries")

    a = dict(raw.get("amcl", {}))
    amcl_initial = Pose2D(
        float(a.pop("initial_pose_x", initial_pose.x)),
        float(a.pop("initial_pose_y", initial_pose.y)),
        float(a.pop("initial_pose_a", initial_pose.theta)),
    )
    sensor = SensorModelConfig(
        z_hit=float(a.pop("laser_z_hit", 0.95)),
        z_short=float(a.pop("laser_z_short", 0.1)),
        z_max=float(a.pop("laser_z_max", 0.05)),
        z_rand=float(a.pop("laser_z_rand", 0.5)),
        sigma_hit=float(a.pop("laser_sigma_hit", 0.2)),
        lambda_short=float(a.pop("laser_lambda_short", 0.1)),
        max_beams=int(a.pop("laser_max_beams", 30)),
        model_type=str(a.pop("laser_model_type", "likelihood_field")),
        likelihood_max_dist=float(a.pop("laser_likelihood_max_dist", 2.0)),
        mount=robot_cfg.laser_mount,
    )
    motion_noise = MotionNoise(
        alpha1=float(a.pop("odom_alpha1", 0.005)),
        alpha2=float(a.pop("odom_alpha2", 0.005)),
        alpha3=float(a.pop("odom_alpha3", 0.010)),
        alpha4=float(a.pop("odom_alpha4", 0.005)),
    )
    try:
        amcl_cfg = amcl_mod.AmclConfig(
            min_particles=int(a.pop("min_particles", 25)),
            max_particles=int(a.pop("max_particles", 200)),
            initial_pose=amcl_initial,
            kld_err=float(a.pop("kld_err", 0.05)),
            kld_z=float(a.pop("kld_z", 2.326)),
            resample_interval=int(a.pop("resample_interval", 2)),
            transform_tolerance=float(a.pop("transform_tolerance", 0.2)),
            motion_noise=motion_noise,
            sensor=sensor,
            resampler=str(a.pop("resampler", amcl_mod.SYSTEMATIC)),
            convergence_radius=float(a.pop("convergence_radius", 0.3)),
            divergence_threshold=float(a.pop("divergence_threshold", 0.5)),
            divergence_window=int(a.pop("divergence_window", 5)),
            global_reinit_on_divergence=bool(a.pop("global_reinit_on_divergence", False)),
            reinit_holdoff=int(a.pop("reinit_holdoff", 15)),
            recovery_exit_threshold=float(a.pop("recovery_exit_threshold", 0.8)),
            recovery_exit_window=int(a.pop("recovery_exit_window", 3)),
            recovery_patience=int(a.pop("recovery_patience", 20)),
        )
    except ValueError as e:
        raise ConfigError(f"bad amcl config: {e}") from e
    if a:
        raise ConfigError(f"unknown amcl keys: {sorted(a)}")

    c = dict(_ROBOT_COSTMAP_DEFAULTS[robot_name])
    c.update(raw.get("costmap", {}))
    try:
        cost_cfg = costmap_mod.CostmapConfig(
            obstacle_range=float(c.pop("obstacle_range")),
            raytrace_range=float(c.pop("raytrace_range")),
            inflation_radius=float(c.pop("inflation_radius")),
            robot_radius=float(c.pop("robot_radius")),
            update_frequency=float(c.pop("update_frequency", 10.0)),
            publish_frequency=float(c.pop("publish_frequency", 10.0)),
            cost_scaling_factor=float(c.pop("cost_scaling_factor", 10.0)),
        )
    except ValueError as e:
        raise ConfigError(f"bad costmap config: {e}") from e
    if c:
        raise ConfigError(f"unknown costmap keys: {sorted(c)}")

    mb = dict(raw.get("move_base", {}))
    try:
        tolerance = nav_mod.GoalTolerance(
            xy=float(mb.pop("xy_goal_tolerance", 0.2)),
            yaw=float(mb.pop("yaw_goal_tolerance", 0.1)),
        )
    except ValueError as e:
        raise ConfigError(f"bad tolerances: {e}") from e
    vel_scale = float(mb.pop("vel_scale", 1.0))
    limits = nav_mod.VelocityLimits(
        v_max=float(mb.pop("max_vel", 0.5)) * vel_scale,
        omega_max=float(mb.pop("max_omega", 1.0)) * vel_scale,
        lookahead=float(mb.pop("lookahead", 0.4)),
    )
    replan_period = float(mb.pop("replan_period", 5.0))
    if mb:
        raise ConfigError(f"unknown move_base keys: {sorted(mb)}")

    s = dict(raw.get("sim", {}))
    sim_noise = MotionNoise(
        alpha1=float(s.pop("odom_alpha1", 0.005)),
        alpha2=float(s.pop("odom_alpha2", 0.005)),
        alpha3=float(s.pop("odom_alpha3", 0.010)),
        alpha4=float(s.pop("odom_alpha4", 0.005)),
    )
    laser = sim_mod.LaserSpec(
        fov=float(s.pop("laser_fov", 1.5 * math.pi)),
        n_beams=int(s.pop("laser_beams", 540)),
        range_min=float(s.pop("laser_range_min", 0.1)),
        range_max=float(s.pop("laser_range_max", 30.0)),
    )
    scan_sigma = float(s.pop("scan_sigma", 0.01))
    landmark_max_range = float(s.pop("landmark_max_range", 10.0))
    landmark_noise = (
        float(s.pop("landmark_range_var", 0.0025)),
        float(s.pop("landmark_bearing_var", 0.0004)),
    )
    ekf_gate = s.pop("ekf_gate", 9.21)
    ekf_gate = None if ekf_gate is None else float(ekf_gate)
    if s:
        raise ConfigError(f"unknown sim keys: {sorted(s)}")

    map_ref = raw.get("map", "builtin:maze")
    truth_ref = raw.get("truth_map", map_ref)
    # Resolve now so missing files fail at parse time.
    _resolve_map(map_ref, base_dir)
    _resolve_map(truth_ref, base_dir)

    if "landmarks" in raw:
        landmarks = {int(k): (float(v[0]), float(v[1])) for k, v in raw["landmarks"].items()}
    elif map_ref.startswith("builtin:"):
        landmarks = dict(worlds.LANDMARKS)
    else:
        landmarks = {}

    out = Path(out_dir) if out_dir is not None else Path(raw.get("out_dir", "runs/run"))
    if not out.is_absolute():
        out = Path(os.environ.get("MCLNAV_OUT", ".")) / out

    return RunConfig(
        map_ref=map_ref,
        truth_map_ref=truth_ref,
        robot=robot_cfg,
        estimator=est,
        seed=seed,
        duration=duration,
        out_dir=out,
        stop_when_done=bool(raw.get("stop_when_done", True)),
        odom_hz=odom_hz,
        scan_hz=scan_hz,
        init_mode=init_mode,
        initial_pose=initial_pose,
        init_cov=init_cov,
        amcl=amcl_cfg,
        costmap=cost_cfg,
        tolerance=tolerance,
        limits=limits,
        replan_period=replan_period,
        scan_sigma=scan_sigma,
        sim_noise=sim_noise,
        laser=laser,
        landmark_max_range=landmark_max_range,
        landmark_noise=landmark_noise,
        ekf_gate=ekf_gate,
        landmarks=landmarks,
        events=_events_from(raw.get("events")),
        raw=raw,
    )


def _every(odom_hz: float, rate_hz: float, what: str) -> int:
    ratio = odom_hz / rate_hz
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError(f"{what} rate {rate_hz} must divide odom rate {odom_hz}")
    return int(round(ratio))


def _nearest_traversable(cm, pose: Pose2D, max_radius: float) -> Pose2D | None:
    free = nav_mod.traversable(cm)
    ix0, iy0 = cm.world_to_cell(pose.x, pose.y)
    r_cells = int(math.ceil(max_radius / cm.resolution))
    best = None
    best_d = None
    for dy in range(-r_cells, r_cells + 1):
        for dx in range(-r_cells, r_cells + 1):
            ix, iy = ix0 + dx, iy0 + dy
            if not cm.in_bounds(ix, iy) or not free[iy, ix]:
                continue
            d = dx * dx + dy * dy
            if best_d is None or d < best_d:
                best_d = d
                best = (ix, iy)
    if best is None:
        return None
    x, y = cm.cell_center(*best)
    return Pose2D(x, y, pose.theta)


@dataclass
class _EkfTracker:
    belief: ekf_mod.GaussianBelief
    convergence_radius: float

    def pose(self) -> Pose2D:
        return self.belief.pose

    def converged(self) -> bool:
        eigs = np.linalg.eigvalsh(self.belief.covariance[:2, :2])
        return bool(math.sqrt(max(float(eigs[-1]), 0.0)) < self.convergence_radius)


def run_scenario(
    config_path,
    robot: str | None = None,
    estimator: str | None = None,
    seed: int | None = None,
    out_dir=None,
) -> int:
    """Execute one scenario; returns the process exit code."""
    try:
        cfg = load_config(config_path, robot=robot, estimator=estimator, seed=seed, out_dir=out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return _execute(cfg)


def _execute(cfg: RunConfig) -> int:
    base_dir = Path(".")
    static_grid = _resolve_map(cfg.map_ref, base_dir)
    truth_grid = _resolve_map(cfg.truth_map_ref, base_dir)
    dfield = build_distance_field(static_grid, cfg.amcl.sensor.likelihood_max_dist)
    truth_field = build_distance_field(truth_grid, 5.0)  # raycast acceleration only

    scan_every = _every(cfg.odom_hz, cfg.scan_hz, "scan")
    publish_every = _every(cfg.odom_hz, cfg.costmap.publish_frequency, "publish")
    update_every = _every(cfg.odom_hz, cfg.costmap.update_frequency, "costmap update")
    dt = 1.0 / cfg.odom_hz
    n_ticks = int(round(cfg.duration * cfg.odom_hz))

    landmarks = cfg.landmarks

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)

    state = sim_mod.make_state(cfg.initial_pose, cfg.events)
    state = _fire_initial_events(state)
    state, fired0 = sim_mod.take_fired_events(state)

    # Estimator setup.
    init_rng = stream(cfg.seed, DOMAIN_INIT, 0)
    use_amcl = cfg.estimator == "amcl"
    belief = None
    ekf_tracker = None
    if use_amcl:
        if cfg.init_mode == "global":
            belief = amcl_mod.init_global(cfg.amcl, static_grid, init_rng)
        else:
            belief = amcl_mod.init_from_pose(cfg.amcl, cfg.amcl.initial_pose, cfg.init_cov, init_rng)
        est_pose, _, est_converged = amcl_mod.estimate(belief, cfg.amcl.convergence_radius)
    else:
        ekf_tracker = _EkfTracker(
            belief=ekf_mod.GaussianBelief(
                mean=cfg.amcl.initial_pose.as_array(), covariance=np.diag(cfg.init_cov)
            ),
            convergence_radius=cfg.amcl.convergence_radius,
        )
        est_pose = ekf_tracker.pose()
        est_converged = ekf_tracker.converged()

    # Costmaps: the global map is static-seeded and marking-only; the local
    # rolling window is fully sensor-driven (mark + clear).
    global_raw = costmap_mod.from_static_map(static_grid)
    global_infl = costmap_mod.inflate(global_raw, cfg.costmap)
    local_raw = costmap_mod.empty_rolling(LOCAL_MAP_SIZE_M, static_grid.resolution, cfg.initial_pose)

    goal: Pose2D | None = None
    goals_set = 0
    goals_reached = 0
    goal_done = False
    path: nav_mod.Path | None = None
    last_plan_t = -math.inf
    want_plan = False
    no_path_since: float | None = None
    nav_status = "idle"
    teleop: tuple[float, sim_mod.TeleopSegment] | None = None

    time_to_converge = None
    time_to_goal = None
    goal_true_error = None
    goal_est_error = None
    kidnap_times: list[float] = []
    divergence_events = 0
    last_divergence_t = None

    prev_odom = state.odom_pose
    scan_idx = 0
    cmd = (0.0, 0.0)
    exit_code: int | None = None
    records = 0

    def handle_events(evts, now):
        nonlocal goal, goals_set, goal_done, path, want_plan, teleop, kidnap_times, nav_status
        for ev in evts:
            if isinstance(ev.action, sim_mod.SetGoal):
                goal = ev.action.pose
                goals_set += 1
                goal_done = False
                path = None
                want_plan = True
                nav_status = "tracking"
            elif isinstance(ev.action, sim_mod.Kidnap):
                kidnap_times.append(ev.time)
            elif isinstance(ev.action, sim_mod.TeleopSegment):
                teleop = (ev.time + ev.action.duration, ev.action)

    handle_events(fired0, 0.0)

    metrics_path = out / "metrics.jsonl"
    traj_path = out / "trajectory.csv"
    with open(metrics_path, "w") as metrics_file, open(traj_path, "w") as traj_file:
        traj_file.write("t,true_x,true_y,true_theta,est_x,est_y,est_theta\n")

        for tick in range(1, n_ticks + 1):
            now = state.clock

            # Command selection: teleop overrides the controller.
            if teleop is not None and now >= teleop[0]:
                teleop = None
            if teleop is not None:
                seg = teleop[1]
                cmd = (seg.v, seg.omega)
            elif goal is not None and path is not None and not goal_done:
                try:
                    v, omega, status = nav_mod.control_step(est_pose, path, cfg.tolerance, cfg.limits)
                    cmd = (v, omega)
                    nav_status = status.value
                    if status is nav_mod.NavStatus.REACHED and not goal_done:
                        goal_done = True
                        goals_reached += 1
                        if time_to_goal is None:
                            time_to_goal = now
                        goal_true_error = state.true_pose.distance_to(goal)
                        goal_est_error = est_pose.distance_to(goal)
                        cmd = (0.0, 0.0)
                except nav_mod.LostPath:
                    want_plan = True
                    cmd = (0.0, 0.0)
                    nav_status = "lost"
            else:
                cmd = (0.0, 0.0)

            state = sim_mod.sim_step(
                state, cmd, dt, truth_grid, cfg.sim_noise,
                cfg.robot.footprint_radius, stream(cfg.seed, DOMAIN_ODOM, tick),
            )
            state, fired = sim_mod.take_fired_events(state)
            if fired:
                handle_events(fired, state.clock)

            if tick % scan_every == 0:
                scan_idx += 1
                scan = sim_mod.simulate_scan(
                    state, truth_grid, cfg.laser, cfg.robot.laser_mount,
                    cfg.scan_sigma, stream(cfg.seed, DOMAIN_SCAN, scan_idx), truth_field,
                )
                u = OdometryReading(prev=prev_odom, curr=state.odom_pose)
                prev_odom = state.odom_pose

                if use_amcl:
                    belief = amcl_mod.step(
                        belief, u, scan, dfield, static_grid, cfg.amcl,
                        state.clock, stream(cfg.seed, DOMAIN_FILTER, scan_idx),
                    )
                    if belief.diverged:
                        divergence_events += 1
                        last_divergence_t = state.clock
                    est_pose, _, est_converged = amcl_mod.estimate(belief, cfg.amcl.convergence_radius)
                else:
                    ekf_tracker.belief = ekf_mod.ekf_predict(ekf_tracker.belief, u, cfg.amcl.motion_noise)
                    if landmarks:
                        obs_list = sim_mod.simulate_landmarks(
                            state, landmarks, cfg.landmark_max_range, cfg.landmark_noise,
                            truth_grid, stream(cfg.seed, DOMAIN_LANDMARK, scan_idx), truth_field,
                        )
                        for obs in obs_list:
                            ekf_tracker.belief = ekf_mod.ekf_update(
                                ekf_tracker.belief, obs, landmarks[obs.landmark_id], gate=cfg.ekf_gate
                            )
                    est_pose = ekf_tracker.pose()
                    est_converged = ekf_tracker.converged()

                pos_err_now = est_pose.distance_to(state.true_pose)
                if time_to_converge is None and est_converged and pos_err_now < cfg.amcl.convergence_radius:
                    time_to_converge = state.clock

                if tick % update_every == 0:
                    sensor_pose = est_pose.compose(cfg.robot.laser_mount)
                    local_raw = costmap_mod.recenter(local_raw, est_pose)
                    local_raw = costmap_mod.mark_and_clear(local_raw, scan, sensor_pose, cfg.costmap)
                    global_raw, n_new = _mark_global(global_raw, scan, sensor_pose, cfg.costmap)
                    if n_new:
                        global_infl = costmap_mod.inflate(global_raw, cfg.costmap)
                        if path is not None and nav_mod.path_blocked(global_infl, path):
                            want_plan = True
                            path = None

            # Planning.
            if goal is not None and not goal_done:
                periodic = state.clock - last_plan_t >= cfg.replan_period
                if want_plan or path is None or periodic:
                    path, no_path_since, planned = _try_plan(
                        global_infl, est_pose, goal, state.clock, no_path_since, out
                    )
                    if planned:
                        want_plan = False
                        last_plan_t = state.clock
                        nav_status = "tracking"
                    else:
                        nav_status = "no_path"
                        if no_path_since is not None and state.clock - no_path_since > NO_PATH_BUDGET_S:
                            exit_code = EXIT_NO_PATH
            if goal_done:
                nav_status = "reached"

            if tick % publish_every == 0:
                pos_err = est_pose.distance_to(state.true_pose)
                head_err = abs(wrap_angle(state.true_pose.theta - est_pose.theta))
                record = {
                    "t": state.clock,
                    "est": [est_pose.x, est_pose.y, est_pose.theta],
                    "true": [state.true_pose.x, state.true_pose.y, state.true_pose.theta],
                    "position_error": pos_err,
                    "heading_error": head_err,
                    "n_particles": len(belief) if use_amcl else 1,
                    "converged": est_converged,
                    "status": nav_status,
                }
                metrics_file.write(json.dumps(record, separators=(",", ":")) + "\n")
                traj_file.write(
                    f"{state.clock!r},{state.true_pose.x!r},{state.true_pose.y!r},"
                    f"{state.true_pose.theta!r},{est_pose.x!r},{est_pose.y!r},{est_pose.theta!r}\n"
                )
                records += 1

                if exit_code is not None:
                    break
                done_events = not state.pending_events and teleop is None
                if cfg.stop_when_done and goals_set > 0 and goal_done and done_events:
                    break

    costmap_mod.save_snapshot(global_infl, out / "global_costmap", cfg.costmap)
    costmap_mod.save_snapshot(costmap_mod.inflate(local_raw, cfg.costmap), out / "local_costmap", cfg.costmap)

    final_err = est_pose.distance_to(state.true_pose)
    # Still lost at the end: the watch re-flags a mismatched belief on every
    # update, so the final belief state is the recovery verdict.
    lost_at_end = use_amcl and (belief.diverged or belief.recovering)
    if exit_code is None:
        if divergence_events > 0 and lost_at_end:
            exit_code = EXIT_DIVERGED
        elif goals_set > 0:
            exit_code = EXIT_OK if goals_reached == goals_set else EXIT_NOT_ACHIEVED
        else:
            # Localization-only run: the belief must both claim convergence
            # and actually sit near the true pose.
            ok = est_converged and final_err < 0.5
            exit_code = EXIT_OK if ok else EXIT_NOT_ACHIEVED

    summary = {
        "seed": cfg.seed,
        "robot": cfg.robot.name,
        "estimator": cfg.estimator,
        "exit_code": exit_code,
        "success": exit_code == EXIT_OK,
        "time_to_converge_s": time_to_converge,
        "time_to_goal_s": time_to_goal,
        "goal_true_error_m": goal_true_error,
        "goal_est_error_m": goal_est_error,
        "final_error_m": final_err,
        "converged_at_end": bool(est_converged),
        "divergence_events": divergence_events,
        "last_divergence_t": last_divergence_t,
        "kidnap_times": kidnap_times,
        "goals_set": goals_set,
        "goals_reached": goals_reached,
        "sim_time_s": state.clock,
        "records": records,
        "config": {
            "map": cfg.map_ref,
            "truth_map": cfg.truth_map_ref,
            "min_particles": cfg.amcl.min_particles,
            "max_particles": cfg.amcl.max_particles,
            "publish_frequency": cfg.costmap.publish_frequency,
            "convergence_radius": cfg.amcl.convergence_radius,
            "xy_goal_tolerance": cfg.tolerance.xy,
            "yaw_goal_tolerance": cfg.tolerance.yaw,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return exit_code


def _fire_initial_events(state: sim_mod.SimState):
    """Apply events scheduled at t <= 0 before the loop starts."""
    pending = list(state.pending_events)
    fired = list(state.fired_events)
    true_pose = state.true_pose
    while pending and pending[0].time <= 0.0:
        ev = pending.pop(0)
        if isinstance(ev.action, sim_mod.Kidnap):
            true_pose = ev.action.pose
        fired.append(ev)
    return replace(
        state, true_pose=true_pose, pending_events=tuple(pending), fired_events=tuple(fired)
    )


def _mark_global(cm, scan, sensor_pose, cfg):
    """Marking-only update for the static-seeded global costmap; returns the
    updated map and the number of newly lethal cells."""
    before = cm.cost == costmap_mod.COST_LETHAL
    marked = costmap_mod.mark_scan(cm, scan, sensor_pose, cfg)
    n_new = int(((marked.cost == costmap_mod.COST_LETHAL) & ~before).sum())
    return marked, n_new


def _try_plan(cm, est_pose, goal, now, no_path_since, out_dir):
    start = est_pose
    free = nav_mod.traversable(cm)
    six, siy = cm.world_to_cell(start.x, start.y)
    if not (cm.in_bounds(six, siy) and free[siy, six]):
        snapped = _nearest_traversable(cm, start, 0.4)
        if snapped is None:
            return None, now if no_path_since is None else no_path_since, False
        start = snapped
    try:
        path = nav_mod.plan(cm, start, goal)
    except nav_mod.PlanningError:
        return None, now if no_path_since is None else no_path_since, False
    nav_mod.dump_path_csv(path, out_dir / "plan.csv")
    return path, None, True


# -- estimator comparison ------------------------------------------------------


def compare_estimators(config_path, out_dir=None) -> int:
    """Run AMCL and EKF on the identical scenario (same seed and noise
    streams) and write a side-by-side comparison report."""
    try:
        cfg = load_config(config_path, estimator="amcl", out_dir=out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    root = cfg.out_dir
    codes = {}
    for est in ("amcl", "ekf"):
        codes[est] = run_scenario(config_path, estimator=est, out_dir=root / est)
        if codes[est] == EXIT_CONFIG:
            return EXIT_CONFIG

    report = {"runs": codes, "kidnap_times": None, "estimators": {}}
    for est in ("amcl", "ekf"):
        run_dir = root / est
        metrics = read_metrics(run_dir / "metrics.jsonl")
        summary = json.loads((run_dir / "summary.json").read_text())
        kidnaps = summary["kidnap_times"]
        report["kidnap_times"] = kidnaps
        errors = [m["position_error"] for m in metrics]
        entry = {
            "exit_code": codes[est],
            "final_error_m": errors[-1] if errors else None,
            "mean_error_m": float(np.mean(errors)) if errors else None,
            "max_error_m": float(np.max(errors)) if errors else None,
            "recovered_after_kidnap": None,
            "recovery_time_s": None,
            "min_error_after_kidnap_m": None,
        }
        if kidnaps:
            k = kidnaps[-1]
            entry["recovered_after_kidnap"] = False
            post = [m["position_error"] for m in metrics if m["t"] > k]
            if post:
                entry["min_error_after_kidnap_m"] = float(np.min(post))
            for m in metrics:
                if k < m["t"] <= k + 20.0 and m["position_error"] < 0.5:
                    entry["recovered_after_kidnap"] = True
                    entry["recovery_time_s"] = m["t"] - k
                    break
        report["estimators"][est] = entry
    (root / "comparison.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


# -- artifact rendering ---------------------------------------------------------


def render_artifacts(run_dir) -> list[Path]:
    """Render trajectory, particle-count, and error plots for a finished run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    if not metrics_path.exists():
        raise FileNotFoundError(f"missing {metrics_path}")
    metrics = read_metrics(metrics_path)
    summary = json.loads((run_dir / "summary.json").read_text())
    t = [m["t"] for m in metrics]
    files = []

    # Trajectory over the global costmap.
    fig, ax = plt.subplots(figsize=(7, 7))
    snap = run_dir / "global_costmap.pgm"
    if snap.exists():
        from .world_map import parse_pgm

        pixels = parse_pgm(snap.read_bytes())
        meta = json.loads((run_dir / "global_costmap.json").read_text())
        ox, oy, _ = meta["origin"]
        extent = [
            ox, ox + meta["width"] * meta["resolution"],
            oy, oy + meta["height"] * meta["resolution"],
        ]
        ax.imshow(pixels, cmap="gray", origin="lower", extent=extent, vmin=0, vmax=255)
    ax.plot([m["true"][0] for m in metrics], [m["true"][1] for m in metrics], "b-", label="true")
    ax.plot([m["est"][0] for m in metrics], [m["est"][1] for m in metrics], "r--", label="estimate")
    plan_path = run_dir / "plan.csv"
    if plan_path.exists():
        rows = plan_path.read_text().splitlines()[1:]
        px = [float(r.split(",")[0]) for r in rows]
        py = [float(r.split(",")[1]) for r in rows]
        ax.plot(px, py, "g:", linewidth=1, label="last plan")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right")
    ax.set_title("trajectory")
    f = run_dir / "trajectory_map.png"
    fig.savefig(f, dpi=110)
    plt.close(fig)
    files.append(f)

    # Particle count over time.
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, [m["n_particles"] for m in metrics], "k-")
    ylim = [summary["config"]["min_particles"], summary["config"]["max_particles"]]
    ax.set_ylim(ylim)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("particles")
    f = run_dir / "particles_vs_time.png"
    fig.savefig(f, dpi=110)
    plt.close(fig)
    files.append(f)

    # Error over time.
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, [m["position_error"] for m in metrics], "b-", label="position [m]")
    ax.plot(t, [m["heading_error"] for m in metrics], "r-", label="heading [rad]")
    for k in summary.get("kidnap_times", []):
        ax.axvline(k, color="gray", linestyle=":")
    ax.legend()
    ax.set_xlabel("t [s]")
    f = run_dir / "error_vs_time.png"
    fig.savefig(f, dpi=110)
    plt.close(fig)
    files.append(f)

    (run_dir / "render_meta.json").write_text(
        json.dumps({"particles_ylim": ylim, "files": [p.name for p in files]}, indent=2)
    )
    return files


# -- batch mode -------------------------------------------------------------------


def _batch_one(args):
    config_path, seed, out_dir = args
    return seed, run_scenario(config_path, seed=seed, out_dir=out_dir)


def run_batch(config_path, seeds: list[int], workers: int = 1, out_root=None) -> dict[int, int]:
    """Run one scenario over many seeds as independent workers."""
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return {}
    root = Path(out_root) if out_root is not None else cfg.out_dir
    jobs = [(str(config_path), s, root / f"seed_{s}") for s in seeds]
    results: dict[int, int] = {}
    if workers <= 1:
        for job in jobs:
            seed, code = _batch_one(job)
            results[seed] = code
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for seed, code in pool.map(_batch_one, jobs):
                results[seed] = code
    (root / "batch_summary.json").write_text(
        json.dumps({str(k): v for k, v in sorted(results.items())}, indent=2)
    )
    return results


# -- CLI ----------------------------------------------------------------------------


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mclnav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--robot", choices=sorted(sim_mod.ROBOT_PRESETS))
    p_run.add_argument("--estimator", choices=["amcl", "ekf", "both"])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")

    p_cmp = sub.add_parser("compare", help="run AMCL and EKF on the same scenario")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--out")

    p_render = sub.add_parser("render", help="render plots for a finished run")
    p_render.add_argument("run_dir")

    p_batch = sub.add_parser("batch", help="run a scenario over a seed range")
    p_batch.add_argument("config")
    p_batch.add_argument("--seeds", required=True, help="e.g. 1..10 or 1,2,5")
    p_batch.add_argument("--workers", type=int, default=1)
    p_batch.add_argument("--out")

    p_world = sub.add_parser("write-world", help="write the maze fixture as PGM/YAML")
    p_world.add_argument("out_dir")

    args = parser.parse_args(argv)
    if args.command == "run":
        if args.estimator == "both":
            return compare_estimators(args.config, out_dir=args.out)
        return run_scenario(
            args.config, robot=args.robot, estimator=args.estimator, seed=args.seed, out_dir=args.out
        )
    if args.command == "compare":
        return compare_estimators(args.config, out_dir=args.out)
    if args.command == "render":
        try:
            files = render_artifacts(args.run_dir)
        except FileNotFoundError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        for f in files:
            print(f)
        return EXIT_OK
    if args.command == "batch":
        results = run_batch(args.config, _parse_seed_range(args.seeds), args.workers, args.out)
        if not results:
            return EXIT_CONFIG
        bad = {s: c for s, c in results.items() if c == EXIT_CONFIG}
        return EXIT_CONFIG if bad else EXIT_OK
    if args.command == "write-world":
        for name, path in worlds.write_world_files(args.out_dir).items():
            print(f"{name}: {path}")
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
