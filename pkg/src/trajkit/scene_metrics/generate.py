"""Procedural scenario generation and the privileged expert planner.

Every scene places the ego at the origin heading +x on the right lane of a
two-lane road whose centerline is the ego lane center. Parameter ranges per
kind (ego speed is drawn from ``EGO_SPEED_RANGE`` for all kinds):

- ``empty``: curvature in +-0.012 1/m after a 0-25 m straight, no agents.
- ``lead_vehicle``: one car on the centerline 15-35 m ahead at 20-80 % of ego speed.
- ``cut_in``: one car in the left lane 8-22 m ahead, 50-90 % of ego speed,
  drifting toward the ego lane at 0.8-1.5 m/s.
- ``blocked_lane``: one stationary car in the ego lane 18-40 m ahead.
- ``intersection``: straight road, stop line 15-35 m ahead, red or green
  signal with equal probability, crossing road 8 m past the stop line.
"""

from __future__ import annotations

import math

import numpy as np

from trajkit.geometry import DEFAULT_DT, DEFAULT_T
from trajkit.scene_metrics.world import (
    EGO_LENGTH,
    Agent,
    Centerline,
    DrivableGrid,
    ScenarioKind,
    Scene,
    TrafficSignal,
)

WINDOW_X = (-30.0, 170.0)
WINDOW_Y = (-70.0, 70.0)
CELL_SIZE = 0.5
LANE_WIDTH = 3.5
SHOULDER = 1.0
EGO_SPEED_RANGE = (5.0, 12.0)
CAR_EXTENT = (4.6, 1.8)
CENTERLINE_STEP = 0.5
CENTERLINE_BACK = 20.0  # centerline starts this far behind the ego

KIND_ORDER = tuple(k.value for k in ScenarioKind)

# expert (IDM) parameters
IDM_ACCEL = 1.5
IDM_DECEL = 2.5
IDM_MIN_GAP = 2.5
IDM_HEADWAY = 1.2
MAX_BRAKE = 5.0
MAX_JERK = 8.0
SIM_DT = 0.1


def _build_centerline(straight: float, curvature: float) -> Centerline:
    pts = [(-CENTERLINE_BACK, 0.0)]
    x, y, h = -CENTERLINE_BACK, 0.0, 0.0
    s = 0.0
    margin = 5.0
    while True:
        k = 0.0 if s < CENTERLINE_BACK + straight else curvature
        h_mid = h + 0.5 * k * CENTERLINE_STEP
        nx = x + CENTERLINE_STEP * math.cos(h_mid)
        ny = y + CENTERLINE_STEP * math.sin(h_mid)
        if not (WINDOW_X[0] + margin <= nx < WINDOW_X[1] - margin and WINDOW_Y[0] + margin <= ny < WINDOW_Y[1] - margin):
            break
        x, y, h = nx, ny, h + k * CENTERLINE_STEP
        s += CENTERLINE_STEP
        pts.append((x, y))
        if s > 400.0:
            break
    return Centerline(np.array(pts))


def _empty_grid() -> tuple[np.ndarray, float, float]:
    cols = int(round((WINDOW_X[1] - WINDOW_X[0]) / CELL_SIZE))
    rows = int(round((WINDOW_Y[1] - WINDOW_Y[0]) / CELL_SIZE))
    return np.zeros((rows, cols), dtype=bool), WINDOW_X[0], WINDOW_Y[0]


def _rasterize_road(mask: np.ndarray, centerline: Centerline, lo: float, hi: float) -> None:
    step = 0.25
    s = np.arange(0.0, centerline.length, step)
    pos, head = centerline.point_at(s)
    normal = np.stack([-np.sin(head), np.cos(head)], axis=-1)
    lat = np.arange(lo, hi + 1e-9, step)
    pts = pos[:, None, :] + lat[None, :, None] * normal[:, None, :]
    pts = pts.reshape(-1, 2)
    col = np.floor((pts[:, 0] - WINDOW_X[0]) / CELL_SIZE).astype(int)
    row = np.floor((pts[:, 1] - WINDOW_Y[0]) / CELL_SIZE).astype(int)
    ok = (row >= 0) & (row < mask.shape[0]) & (col >= 0) & (col < mask.shape[1])
    mask[row[ok], col[ok]] = True


def _rasterize_crossing(mask: np.ndarray, center: np.ndarray, heading: float, half_width: float) -> None:
    rows, cols = mask.shape
    xs = WINDOW_X[0] + (np.arange(cols) + 0.5) * CELL_SIZE
    ys = WINDOW_Y[0] + (np.arange(rows) + 0.5) * CELL_SIZE
    gx, gy = np.meshgrid(xs, ys)
    along = (gx - center[0]) * math.cos(heading) + (gy - center[1]) * math.sin(heading)
    mask |= np.abs(along) <= half_width


def _car_on_lane(centerline: Centerline, s: float, lateral: float, speed: float, lat_speed: float = 0.0) -> Agent:
    pos, head = centerline.point_at(np.array(s))
    head = float(head)
    normal = np.array([-math.sin(head), math.cos(head)])
    tangent = np.array([math.cos(head), math.sin(head)])
    c = pos + lateral * normal
    v = speed * tangent + lat_speed * normal
    heading = head + (math.atan2(lat_speed, speed) if speed > 0 else 0.0)
    return Agent((float(c[0]), float(c[1])), CAR_EXTENT, float(heading), (float(v[0]), float(v[1])))


def _lead_obstacle(scene: Scene, s: float, t: float) -> tuple[float, float]:
    """Bumper gap (m) and along-track speed of the nearest in-lane obstacle ahead."""
    gap, v_lead = math.inf, 0.0
    if scene.n_agents:
        arr = scene.agent_arrays()
        centers = scene.agent_centers_at(t)
        sa, la, ha = scene.centerline.project(centers)
        lane_band = 0.5 * scene.lane_width + 0.9
        for i in range(scene.n_agents):
            if abs(la[i]) >= lane_band or sa[i] <= s:
                continue
            g = sa[i] - s - 0.5 * EGO_LENGTH - arr["half"][i, 0]
            if g < gap:
                gap = g
                v_lead = float(arr["velocity"][i, 0] * math.cos(ha[i]) + arr["velocity"][i, 1] * math.sin(ha[i]))
    if scene.signal is not None and scene.signal.state == "red":
        g = scene.signal.stop_s - s - 0.5 * EGO_LENGTH
        if g > -0.5 and g < gap:
            gap, v_lead = g, 0.0
    return gap, v_lead


def _idm_accel(v: float, v_des: float, gap: float, v_lead: float) -> float:
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    if not math.isfinite(gap):
        return IDM_ACCEL * free
    s_star = IDM_MIN_GAP + max(0.0, v * IDM_HEADWAY + v * (v - v_lead) / (2.0 * math.sqrt(IDM_ACCEL * IDM_DECEL)))
    return IDM_ACCEL * (free - (s_star / max(gap, 0.1)) ** 2)


def expert_plan(
    scene: Scene, T: int = DEFAULT_T, dt: float = DEFAULT_DT, desired_speed: float | None = None
) -> np.ndarray:
    """Privileged centerline-following plan with IDM speed control, ego frame ``(T, 2)``.

    The desired speed defaults to the current ego speed.
    """
    v_des = scene.ego_speed if desired_speed is None else desired_speed
    ego_world = np.array(scene.ego_pose[:2])
    s0 = float(scene.centerline.project(ego_world)[0])
    s, v, a_prev = s0, float(scene.ego_speed), 0.0
    per_wp = int(round(dt / SIM_DT))
    samples = []
    for step in range(T * per_wp):
        t = scene.time + step * SIM_DT
        gap, v_lead = _lead_obstacle(scene, s, t)
        a = _idm_accel(v, v_des, gap, v_lead)
        a = min(max(a, -MAX_BRAKE), a_prev + MAX_JERK * SIM_DT, IDM_ACCEL)  # braking may start at once
        v_new = max(v + a * SIM_DT, 0.0)
        s += 0.5 * (v + v_new) * SIM_DT
        v, a_prev = v_new, a
        if (step + 1) % per_wp == 0:
            samples.append(s)
    pos, _ = scene.centerline.point_at(np.array(samples))
    return scene.world_to_ego(pos)


def _draw(kind: ScenarioKind, rng: np.random.Generator, seed: int) -> Scene:
    ego_speed = float(rng.uniform(*EGO_SPEED_RANGE))
    curvature, straight = 0.0, 0.0
    if kind in (ScenarioKind.EMPTY, ScenarioKind.LEAD_VEHICLE, ScenarioKind.CUT_IN):
        curvature = float(rng.uniform(-0.012, 0.012))
        straight = float(rng.uniform(0.0, 25.0))
    elif kind is ScenarioKind.BLOCKED_LANE:
        curvature = float(rng.uniform(-0.004, 0.004))
        straight = float(rng.uniform(10.0, 40.0))
    centerline = _build_centerline(straight, curvature)
    s_ego = CENTERLINE_BACK

    mask, x0, y0 = _empty_grid()
    _rasterize_road(mask, centerline, -(0.5 * LANE_WIDTH + SHOULDER), 1.5 * LANE_WIDTH + SHOULDER)

    agents: list[Agent] = []
    signal = None
    if kind is ScenarioKind.LEAD_VEHICLE:
        agents.append(_car_on_lane(centerline, s_ego + rng.uniform(15.0, 35.0), 0.0, ego_speed * rng.uniform(0.2, 0.8)))
    elif kind is ScenarioKind.CUT_IN:
        agents.append(
            _car_on_lane(
                centerline,
                s_ego + rng.uniform(8.0, 22.0),
                LANE_WIDTH,
                ego_speed * rng.uniform(0.5, 0.9),
                -rng.uniform(0.8, 1.5),
            )
        )
    elif kind is ScenarioKind.BLOCKED_LANE:
        agents.append(_car_on_lane(centerline, s_ego + rng.uniform(18.0, 40.0), rng.uniform(-0.5, 0.5), 0.0))
    elif kind is ScenarioKind.INTERSECTION:
        stop_s = s_ego + float(rng.uniform(15.0, 35.0))
        state = "red" if rng.uniform() < 0.5 else "green"
        signal = TrafficSignal(state, stop_s)
        pos, head = centerline.point_at(np.array(stop_s + 8.0))
        _rasterize_crossing(mask, pos, float(head), 5.0)

    grid = DrivableGrid(x0, y0, CELL_SIZE, mask)
    scene = Scene(
        kind=kind.value,
        seed=seed,
        grid=grid,
        centerline=centerline,
        agents=tuple(agents),
        ego_speed=ego_speed,
        reference_progress=0.0,
        signal=signal,
        lane_width=LANE_WIDTH,
    )
    expert = expert_plan(scene)
    s_start = float(centerline.project(np.zeros(2))[0])
    s_end = float(centerline.project(expert[-1])[0])
    return scene.with_state(expert=expert, reference_progress=s_end - s_start)


def generate_scene(kind: str | ScenarioKind, seed: int, max_attempts: int = 50) -> Scene:
    """Deterministic scene for ``(kind, seed)`` whose expert plan is collision-free."""
    from trajkit.scene_metrics.metrics import eval_submetrics_array

    kind = ScenarioKind(kind)
    rng = np.random.default_rng([int(seed), KIND_ORDER.index(kind.value)])
    for _ in range(max_attempts):
        scene = _draw(kind, rng, int(seed))
        scene.validate()
        scores = eval_submetrics_array(scene, scene.expert[None])
        if scores[0, 0] == 1.0:
            return scene
    raise RuntimeError(f"could not draw a valid {kind.value} scene for seed {seed}")


def straight_road_scene(ego_speed: float = 8.0, agents: tuple[Agent, ...] = (), seed: int = 0) -> Scene:
    """Hand-built straight two-lane road with the given agents (reference = free driving)."""
    centerline = _build_centerline(0.0, 0.0)
    mask, x0, y0 = _empty_grid()
    _rasterize_road(mask, centerline, -(0.5 * LANE_WIDTH + SHOULDER), 1.5 * LANE_WIDTH + SHOULDER)
    horizon = DEFAULT_T * DEFAULT_DT
    return Scene(
        kind=ScenarioKind.EMPTY.value if not agents else ScenarioKind.BLOCKED_LANE.value,
        seed=seed,
        grid=DrivableGrid(x0, y0, CELL_SIZE, mask),
        centerline=centerline,
        agents=tuple(agents),
        ego_speed=float(ego_speed),
        reference_progress=float(ego_speed) * horizon,
        lane_width=LANE_WIDTH,
    )
