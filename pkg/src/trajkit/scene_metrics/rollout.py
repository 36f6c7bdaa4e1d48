"""Closed-loop stepping: plan, advance one waypoint, re-evaluate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from trajkit.geometry import DEFAULT_DT
from trajkit.scene_metrics.generate import expert_plan
from trajkit.scene_metrics.metrics import EGO_HALF, SubMetricScores, eval_submetrics_array, rect_overlap, world_accelerations
from trajkit.scene_metrics.world import Scene

Planner = Callable[[Scene], np.ndarray]

COMPLETION_TOL = 1e-6  # metres of shortfall still counted as a completed route


@dataclass(frozen=True)
class RolloutResult:
    step_scores: tuple[SubMetricScores, ...]
    route_completion: float
    collided: bool
    poses: np.ndarray  # (steps + 1, 3) world poses visited, starting pose first


def straight_planner(scene: Scene, T: int = 8, dt: float = DEFAULT_DT) -> np.ndarray:
    """Stub planner: keep heading and speed."""
    x = scene.ego_speed * dt * np.arange(1, T + 1)
    return np.stack([x, np.zeros(T)], axis=-1)


def _executed_collision(scene: Scene, pos: np.ndarray, yaw: float) -> bool:
    if not scene.n_agents:
        return False
    arr = scene.agent_arrays()
    centers = scene.agent_centers_at(scene.time)
    return bool(np.any(rect_overlap(pos, yaw, EGO_HALF, centers, arr["heading"], arr["half"])))


def closed_loop_rollout(
    scene: Scene, policy, horizon_steps: int = 16, dt: float = DEFAULT_DT
) -> RolloutResult:
    """Replan every ``dt`` for ``horizon_steps`` steps.

    ``policy`` is either a planner callable ``scene -> (T, 2)`` or a trained
    policy state (planned with its default seed). The route length is the
    distance covered at the initial speed over the horizon; the rollout stops
    early once the executed ego footprint overlaps an agent.
    """
    if horizon_steps < 1:
        raise ValueError("horizon_steps must be >= 1")
    planner = _as_planner(policy)
    v_des = scene.ego_speed
    route_length = v_des * horizon_steps * dt
    s_start = float(scene.centerline.project(np.array(scene.ego_pose[:2]))[0])
    cur = scene.with_state(previous_accels=None)
    steps: list[SubMetricScores] = []
    poses = [np.array(scene.ego_pose, dtype=np.float64)]
    collided = False
    for _ in range(horizon_steps):
        ref = expert_plan(cur, dt=dt, desired_speed=v_des)
        s0 = float(cur.centerline.project(np.array(cur.ego_pose[:2]))[0])
        ref_prog = float(cur.centerline.project(cur.ego_to_world(ref[-1]))[0]) - s0
        cur = cur.with_state(reference_progress=ref_prog)
        traj = np.asarray(planner(cur), dtype=np.float64)
        steps.append(SubMetricScores.from_array(eval_submetrics_array(cur, traj[None], dt)[0]))

        vel = traj[1] / (2.0 * dt) if len(traj) > 1 else traj[0] / dt
        speed = float(np.hypot(*vel))
        yaw = cur.ego_pose[2] + (math.atan2(vel[1], vel[0]) if speed > 1e-6 else 0.0)
        pos = cur.ego_to_world(traj[0])
        nxt = cur.with_state(
            ego_pose=(float(pos[0]), float(pos[1]), float(yaw)),
            time=cur.time + dt,
            ego_speed=speed,
            previous_accels=world_accelerations(cur, traj, dt),
        )
        poses.append(np.array(nxt.ego_pose))
        cur = nxt
        if _executed_collision(cur, pos, yaw):
            collided = True
            break
    progress = float(cur.centerline.project(np.array(cur.ego_pose[:2]))[0]) - s_start
    if route_length <= 0 or progress >= route_length - COMPLETION_TOL:
        rc = 1.0
    else:
        rc = float(np.clip(progress / route_length, 0.0, 1.0))
    return RolloutResult(tuple(steps), rc, collided, np.stack(poses))


def _as_planner(policy) -> Planner:
    if callable(policy):
        return policy
    from trajkit.policy import plan

    return lambda sc: plan(policy, sc).waypoints
