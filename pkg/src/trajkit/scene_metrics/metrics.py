"""Sub-metric evaluation and PDMS / EPDMS / HD-Score aggregation.

All evaluators work on batches: ``trajs`` has shape ``(B, T, 2)`` in the ego
frame of ``scene.ego_pose`` and the result has shape ``(B, 10)`` with columns
in ``METRICS`` order. Waypoint ``k`` (0-based) is reached at
``scene.time + (k + 1) * dt``.

Definitions (all thresholds are module constants):

- nc: 0 if the ego footprint at any waypoint overlaps an agent footprint at
  that waypoint's time (touching does not count).
- ttc: 0 if, from any waypoint, moving on at that waypoint's velocity for
  0.1 .. 2.0 s (0.1 s steps) overlaps an agent, else 1.
- dac: 1 if every waypoint lies on a drivable cell, else 0.
- ddc: over moving segments, 1 if the heading deviates < 90 deg from the
  centerline tangent everywhere, 0.5 if < 135 deg, else 0.
- tlc: 0 if the signal is red, the ego starts before the stop line and any
  waypoint is past it.
- ep: progress along the centerline over the reference progress, in [0, 1];
  1 when the reference is shorter than ``MIN_REFERENCE_PROGRESS``.
- comfort: 1 if max |acceleration| <= 4 m/s^2 and max |jerk| <= 8 m/s^3.
- hc: comfort restricted to the first half of the horizon.
- lk: 1 if max |lateral offset| <= lane_width / 2.
- ec: 1 if acceleration differs from the previous plan (time aligned) by at
  most 2 m/s^2; 1 when the scene holds no previous plan.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from trajkit.geometry import DEFAULT_DT, Trajectory
from trajkit.scene_metrics.world import EGO_LENGTH, EGO_WIDTH, OutsideWindowError, Scene

METRICS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "comfort", "lk", "hc", "ec")
SAFETY_METRICS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc")
PENALTY_METRICS = ("nc", "dac", "ddc", "tlc")
METRIC_INDEX = {m: i for i, m in enumerate(METRICS)}

PENALTY_SETS = {"v1": ("nc", "dac"), "v2": ("nc", "dac", "ddc", "tlc")}
AVERAGE_SETS = {"v1": ("ep", "ttc", "comfort"), "v2": ("ep", "ttc", "hc", "lk", "ec")}

MAX_ACCEL = 4.0
MAX_JERK = 8.0
MAX_ACCEL_CHANGE = 2.0
TTC_HORIZON = 2.0
TTC_STEP = 0.1
MOVING_SPEED = 0.5
MIN_REFERENCE_PROGRESS = 5.0
EGO_HALF = np.array([0.5 * EGO_LENGTH, 0.5 * EGO_WIDTH])


@dataclass(frozen=True)
class SubMetricScores:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    comfort: float
    lk: float
    hc: float
    ec: float

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{f.name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "SubMetricScores":
        return cls(*(float(v) for v in np.asarray(row, dtype=np.float64)))

    def replace(self, **changes) -> "SubMetricScores":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return SubMetricScores(**vals)


@dataclass(frozen=True)
class MetricWeights:
    """Aggregation weights plus the ensemble coefficients used at inference."""

    avg_weights: tuple[tuple[str, float], ...] = (
        ("ep", 5.0),
        ("ttc", 5.0),
        ("comfort", 2.0),
        ("hc", 2.0),
        ("lk", 2.0),
        ("ec", 1.0),
    )
    ensemble_penalty: tuple[tuple[str, float], ...] = (("nc", 0.5), ("dac", 0.5), ("ddc", 0.3), ("tlc", 0.1))
    ensemble_average: tuple[tuple[str, float], ...] = (("ep", 5.0), ("ttc", 5.0), ("lk", 2.0), ("hc", 1.0))
    lambda_avg: float = 6.0

    def __post_init__(self) -> None:
        groups = (self.avg_weights, self.ensemble_penalty, self.ensemble_average)
        for group in groups:
            for name, w in group:
                if name not in METRIC_INDEX:
                    raise ValueError(f"unknown metric {name!r}")
                if not (w >= 0 and math.isfinite(w)):
                    raise ValueError(f"weight for {name!r} must be finite and >= 0")
        if not self.lambda_avg >= 0:
            raise ValueError("lambda_avg must be >= 0")
        for version in AVERAGE_SETS:
            if sum(w for _, w in self.avg_set(version)) <= 0:
                raise ValueError(f"average weights for {version} are all zero")

    def penalty_set(self, version: str) -> tuple[str, ...]:
        return PENALTY_SETS[_check_version(version)]

    def avg_set(self, version: str) -> tuple[tuple[str, float], ...]:
        w = dict(self.avg_weights)
        return tuple((m, float(w.get(m, 0.0))) for m in AVERAGE_SETS[_check_version(version)])

    def to_dict(self) -> dict:
        return {
            "avg_weights": dict(self.avg_weights),
            "ensemble_penalty": dict(self.ensemble_penalty),
            "ensemble_average": dict(self.ensemble_average),
            "lambda_avg": self.lambda_avg,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricWeights":
        base = cls()
        return cls(
            avg_weights=tuple({**dict(base.avg_weights), **doc.get("avg_weights", {})}.items()),
            ensemble_penalty=tuple({**dict(base.ensemble_penalty), **doc.get("ensemble_penalty", {})}.items()),
            ensemble_average=tuple({**dict(base.ensemble_average), **doc.get("ensemble_average", {})}.items()),
            lambda_avg=float(doc.get("lambda_avg", base.lambda_avg)),
        )


def _check_version(version: str) -> str:
    if version not in PENALTY_SETS:
        raise ValueError(f"unknown score version {version!r}; expected 'v1' or 'v2'")
    return version


# -- geometry helpers ----------------------------------------------------------


def rect_overlap(c1, h1, half1, c2, h2, half2) -> np.ndarray:
    """Strict overlap test for oriented rectangles by separating axes (broadcasts)."""
    c1, c2 = np.asarray(c1), np.asarray(c2)
    h1, h2 = np.asarray(h1), np.asarray(h2)
    half1, half2 = np.asarray(half1), np.asarray(half2)
    cos1, sin1 = np.cos(h1), np.sin(h1)
    cos2, sin2 = np.cos(h2), np.sin(h2)
    dx = c2[..., 0] - c1[..., 0]
    dy = c2[..., 1] - c1[..., 1]
    # cosines between the two frames
    cc = cos1 * cos2 + sin1 * sin2  # u1.u2 == v1.v2
    cs = sin2 * cos1 - cos2 * sin1  # u1.v2 up to sign
    acc, acs = np.abs(cc), np.abs(cs)
    separated = np.abs(dx * cos1 + dy * sin1) >= half1[..., 0] + half2[..., 0] * acc + half2[..., 1] * acs
    separated |= np.abs(-dx * sin1 + dy * cos1) >= half1[..., 1] + half2[..., 0] * acs + half2[..., 1] * acc
    separated |= np.abs(dx * cos2 + dy * sin2) >= half2[..., 0] + half1[..., 0] * acc + half1[..., 1] * acs
    separated |= np.abs(-dx * sin2 + dy * cos2) >= half2[..., 1] + half1[..., 0] * acs + half1[..., 1] * acc
    return ~separated


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def motion_headings(trajs: np.ndarray) -> np.ndarray:
    """Ego-frame heading at each waypoint from the segment reaching it.

    Segments shorter than 1 mm inherit the previous heading; the first falls
    back to the initial heading 0.
    """
    full = np.concatenate([np.zeros(trajs.shape[:-2] + (1, 2)), trajs], axis=-2)
    seg = np.diff(full, axis=-2)
    head = np.arctan2(seg[..., 1], seg[..., 0])
    moving = np.hypot(seg[..., 0], seg[..., 1]) > 1e-3
    T = trajs.shape[-2]
    idx = np.where(moving, np.arange(T), -1)
    idx = np.maximum.accumulate(idx, axis=-1)
    picked = np.take_along_axis(head, np.maximum(idx, 0), axis=-1)
    return np.where(idx >= 0, picked, 0.0)


def accelerations(trajs: np.ndarray, v0: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference acceleration vectors ``(..., T, 2)`` and their timestamps.

    Velocity ``v0`` is the instantaneous velocity at t=0; segment velocities
    live at segment midpoints, so the first difference spans ``dt / 2``.
    """
    full = np.concatenate([np.zeros(trajs.shape[:-2] + (1, 2)), trajs], axis=-2)
    vel = np.diff(full, axis=-2) / dt
    vel = np.concatenate([np.broadcast_to(v0, vel.shape[:-2] + (1, 2)), vel], axis=-2)
    T = trajs.shape[-2]
    vt = np.concatenate([[0.0], (np.arange(T) + 0.5) * dt])
    span = np.diff(vt)
    acc = np.diff(vel, axis=-2) / span[:, None]
    return acc, 0.5 * (vt[1:] + vt[:-1])


def _comfort_ok(acc: np.ndarray, at: np.ndarray, upto: int) -> np.ndarray:
    a = acc[..., :upto, :]
    amag = np.hypot(a[..., 0], a[..., 1])
    ok = np.all(amag <= MAX_ACCEL, axis=-1)
    if upto >= 2:
        jerk = np.diff(a, axis=-2) / np.diff(at[:upto])[:, None]
        ok &= np.all(np.hypot(jerk[..., 0], jerk[..., 1]) <= MAX_JERK, axis=-1)
    return ok


# -- evaluation ------------------------------------------------------------------


def eval_submetrics_array(scene: Scene, trajs: np.ndarray, dt: float = DEFAULT_DT) -> np.ndarray:
    """Score a batch of ego-frame trajectories ``(B, T, 2)``; returns ``(B, 10)``."""
    trajs = np.asarray(trajs, dtype=np.float64)
    if trajs.ndim != 3 or trajs.shape[-1] != 2:
        raise ValueError(f"expected (B, T, 2) trajectories, got {trajs.shape}")
    B, T, _ = trajs.shape
    x0, y0, yaw = scene.ego_pose
    world = scene.ego_to_world(trajs)
    if not np.all(scene.grid.contains(world)):
        raise OutsideWindowError("trajectory leaves the scene grid window")
    out = np.ones((B, len(METRICS)))

    head_ego = motion_headings(trajs)
    head = head_ego + yaw
    times = scene.time + (np.arange(T) + 1.0) * dt

    # velocities per segment, world frame
    full = np.concatenate([np.zeros((B, 1, 2)), trajs], axis=1)
    seg = np.diff(full, axis=1)
    c, s = math.cos(yaw), math.sin(yaw)
    seg_w = np.stack([c * seg[..., 0] - s * seg[..., 1], s * seg[..., 0] + c * seg[..., 1]], axis=-1)
    vel_w = seg_w / dt

    if scene.n_agents:
        arr = scene.agent_arrays()
        a_half = arr["half"]
        a_head = arr["heading"]
        centers = scene.agent_centers_at(times)  # (T, A, 2)
        hit = rect_overlap(world[:, :, None, :], head[:, :, None], EGO_HALF, centers[None], a_head, a_half)
        out[:, METRIC_INDEX["nc"]] = ~np.any(hit, axis=(1, 2))

        taus = np.arange(1, int(round(TTC_HORIZON / TTC_STEP)) + 1) * TTC_STEP  # (K,)
        ego_c = world[:, :, None, :] + taus[None, None, :, None] * vel_w[:, :, None, :]  # (B,T,K,2)
        ag_c = scene.agent_centers_at(times[:, None] + taus[None, :])  # (T,K,A,2)
        hit_ttc = rect_overlap(
            ego_c[..., None, :], head[:, :, None, None], EGO_HALF, ag_c[None], a_head, a_half
        )
        out[:, METRIC_INDEX["ttc"]] = ~np.any(hit_ttc, axis=(1, 2, 3))

    out[:, METRIC_INDEX["dac"]] = np.all(scene.grid.drivable(world), axis=1)

    s_pts, lat, tangent = scene.centerline.project(world)
    s0 = float(scene.centerline.project(np.array([x0, y0]))[0])

    moving = np.hypot(seg[..., 0], seg[..., 1]) > MOVING_SPEED * dt
    seg_head = np.arctan2(seg_w[..., 1], seg_w[..., 0])
    dev = np.abs(_wrap(seg_head - tangent))
    dev = np.where(moving, dev, 0.0).max(axis=1)
    out[:, METRIC_INDEX["ddc"]] = np.where(dev < np.pi / 2, 1.0, np.where(dev < 0.75 * np.pi, 0.5, 0.0))

    sig = scene.signal
    if sig is not None and sig.state == "red" and s0 < sig.stop_s:
        out[:, METRIC_INDEX["tlc"]] = ~np.any(s_pts > sig.stop_s, axis=1)

    ref = scene.reference_progress
    if ref >= MIN_REFERENCE_PROGRESS:
        out[:, METRIC_INDEX["ep"]] = np.clip((s_pts[:, -1] - s0) / ref, 0.0, 1.0)

    acc, at = accelerations(trajs, np.array([scene.ego_speed, 0.0]), dt)
    out[:, METRIC_INDEX["comfort"]] = _comfort_ok(acc, at, T)
    out[:, METRIC_INDEX["hc"]] = _comfort_ok(acc, at, max(T // 2, 1))

    out[:, METRIC_INDEX["lk"]] = np.max(np.abs(lat), axis=1) <= 0.5 * scene.lane_width

    prev = scene.previous_accels
    if prev is not None and T >= 3:
        acc_w = np.stack([c * acc[..., 0] - s * acc[..., 1], s * acc[..., 0] + c * acc[..., 1]], axis=-1)
        diff = acc_w[:, 1 : T - 1] - prev[None, 2:T]
        out[:, METRIC_INDEX["ec"]] = np.max(np.hypot(diff[..., 0], diff[..., 1]), axis=1) <= MAX_ACCEL_CHANGE
    return out


def world_accelerations(scene: Scene, traj: np.ndarray, dt: float = DEFAULT_DT) -> np.ndarray:
    """World-frame acceleration profile of one plan, stored for the next ec check."""
    acc, _ = accelerations(np.asarray(traj, dtype=np.float64), np.array([scene.ego_speed, 0.0]), dt)
    yaw = scene.ego_pose[2]
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([c * acc[..., 0] - s * acc[..., 1], s * acc[..., 0] + c * acc[..., 1]], axis=-1)


def eval_submetrics(scene: Scene, traj: Trajectory | np.ndarray) -> SubMetricScores:
    pts = traj.waypoints if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    dt = traj.timestep_s if isinstance(traj, Trajectory) else DEFAULT_DT
    return SubMetricScores.from_array(eval_submetrics_array(scene, pts[None], dt)[0])


# -- aggregation -----------------------------------------------------------------


def _as_matrix(scores) -> np.ndarray:
    if isinstance(scores, SubMetricScores):
        return scores.as_array()
    if isinstance(scores, (list, tuple)) and scores and isinstance(scores[0], SubMetricScores):
        return np.stack([s.as_array() for s in scores])
    return np.asarray(scores, dtype=np.float64)


def aggregate_pdms_array(scores: np.ndarray, weights: MetricWeights | None = None, version: str = "v2") -> np.ndarray:
    """Penalty product times weighted average over the version's metric sets (broadcasts over rows)."""
    weights = weights or MetricWeights()
    scores = np.asarray(scores, dtype=np.float64)
    pen = np.ones(scores.shape[:-1])
    for m in weights.penalty_set(version):
        pen = pen * scores[..., METRIC_INDEX[m]]
    avg = weights.avg_set(version)
    total = sum(w for _, w in avg)
    mean = sum(w * scores[..., METRIC_INDEX[m]] for m, w in avg) / total
    return pen * mean


def aggregate_pdms(scores, weights: MetricWeights | None = None, version: str = "v2") -> float:
    """PDMS (``v1``) or EPDMS (``v2``) of one score vector."""
    return float(aggregate_pdms_array(_as_matrix(scores), weights, version))


def hd_score(step_scores, route_completion: float, weights: tuple[float, float] = (5.0, 2.0)) -> float:
    """Closed-loop score: mean over steps of ``nc*dac * wmean(ttc, comfort)``, times route completion."""
    mat = _as_matrix(step_scores)
    if mat.size == 0:
        raise ValueError("hd_score needs at least one step")
    if mat.ndim == 1:
        mat = mat[None]
    if mat.shape[-1] != len(METRICS):
        raise ValueError(f"step scores need {len(METRICS)} columns")
    if not 0.0 <= route_completion <= 1.0:
        raise ValueError("route_completion must lie in [0, 1]")
    w_ttc, w_c = weights
    per_step = (
        mat[:, METRIC_INDEX["nc"]]
        * mat[:, METRIC_INDEX["dac"]]
        * (w_ttc * mat[:, METRIC_INDEX["ttc"]] + w_c * mat[:, METRIC_INDEX["comfort"]])
        / (w_ttc + w_c)
    )
    return float(per_step.mean() * route_completion)
