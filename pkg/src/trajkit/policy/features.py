"""Ground-truth scene features standing in for a perception backbone."""

from __future__ import annotations

import numpy as np

from trajkit.scene_metrics.world import EGO_LENGTH, Scene

LOOKAHEAD_S = (10.0, 20.0, 30.0, 40.0)
AGENT_SLOTS = 2
CLEARANCE_MAX = 15.0
CLEARANCE_STEP = 0.25
AGENT_RANGE = 50.0
SPEED_SCALE = 10.0

FEATURE_NAMES = (
    ("ego_speed",)
    + tuple(f"center_lat_{int(s)}m" for s in LOOKAHEAD_S)
    + ("clear_left", "clear_right", "red_light", "stop_line_dist")
    + tuple(f"agent{k}_{f}" for k in range(AGENT_SLOTS) for f in ("x", "y", "vx", "vy", "present"))
    + ("lead_gap", "lead_closing")
)
AGENT_FEATURES = tuple(n for n in FEATURE_NAMES if n.startswith(("agent", "lead")))
AGENT_SENTINEL = (1.0, 0.0, 0.0, 0.0, 0.0)  # empty slot: far ahead, at rest, absent
FEATURE_DIM = len(FEATURE_NAMES)


def _clearance(scene: Scene, side: float) -> float:
    ys = side * np.arange(CLEARANCE_STEP, CLEARANCE_MAX + 1e-9, CLEARANCE_STEP)
    pts = scene.ego_to_world(np.stack([np.zeros_like(ys), ys], axis=-1))
    inside = scene.grid.contains(pts)
    ok = np.zeros(len(ys), dtype=bool)
    ok[inside] = scene.grid.drivable(pts[inside])
    blocked = np.flatnonzero(~ok)
    return float(ys.size if blocked.size == 0 else blocked[0]) * CLEARANCE_STEP / CLEARANCE_MAX


def encode_scene(scene: Scene) -> np.ndarray:
    """Feature vector in ``FEATURE_NAMES`` order, every entry O(1)."""
    x0, y0, yaw = scene.ego_pose
    ego = np.array([x0, y0])
    s0 = float(scene.centerline.project(ego)[0])
    out = [scene.ego_speed / SPEED_SCALE]

    ahead, _ = scene.centerline.point_at(s0 + np.array(LOOKAHEAD_S))
    out.extend((scene.world_to_ego(ahead)[:, 1] / 10.0).tolist())
    out.append(_clearance(scene, 1.0))
    out.append(_clearance(scene, -1.0))

    sig = scene.signal
    if sig is not None and sig.state == "red" and s0 < sig.stop_s:
        out.extend([1.0, float(np.clip((sig.stop_s - s0) / AGENT_RANGE, 0.0, 1.0))])
    else:
        out.extend([0.0, 1.0])

    slots = [AGENT_SENTINEL] * AGENT_SLOTS
    lead = (1.0, 0.0)
    if scene.n_agents:
        arr = scene.agent_arrays()
        centers = scene.agent_centers_at(scene.time)
        rel = scene.world_to_ego(centers)
        c, s = np.cos(yaw), np.sin(yaw)
        vel = np.stack([c * arr["velocity"][:, 0] + s * arr["velocity"][:, 1], -s * arr["velocity"][:, 0] + c * arr["velocity"][:, 1]], axis=-1)
        order = np.argsort(np.hypot(rel[:, 0], rel[:, 1]), kind="stable")
        for k, i in enumerate(order[:AGENT_SLOTS]):
            slots[k] = (
                rel[i, 0] / AGENT_RANGE,
                rel[i, 1] / AGENT_RANGE,
                vel[i, 0] / SPEED_SCALE,
                vel[i, 1] / SPEED_SCALE,
                1.0,
            )
        sa, la, ha = scene.centerline.project(centers)
        band = 0.5 * scene.lane_width + 0.9
        ahead_mask = (np.abs(la) < band) & (sa > s0)
        if np.any(ahead_mask):
            i = int(np.flatnonzero(ahead_mask)[np.argmin(sa[ahead_mask])])
            gap = sa[i] - s0 - 0.5 * EGO_LENGTH - arr["half"][i, 0]
            v_lead = arr["velocity"][i, 0] * np.cos(ha[i]) + arr["velocity"][i, 1] * np.sin(ha[i])
            lead = (float(np.clip(gap / AGENT_RANGE, 0.0, 1.0)), float((scene.ego_speed - v_lead) / SPEED_SCALE))
    for slot in slots:
        out.extend(float(v) for v in slot)
    out.extend(lead)
    return np.asarray(out, dtype=np.float64)
