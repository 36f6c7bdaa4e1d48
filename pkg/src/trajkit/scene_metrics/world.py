"""Synthetic BEV scene types, frame transforms and JSON serialization."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SCENE_FORMAT = "trajkit-scene"
SCENE_VERSION = 1

EGO_LENGTH = 4.6
EGO_WIDTH = 1.8


class OutsideWindowError(ValueError):
    pass


class ScenarioKind(str, Enum):
    EMPTY = "empty"
    LEAD_VEHICLE = "lead_vehicle"
    CUT_IN = "cut_in"
    BLOCKED_LANE = "blocked_lane"
    INTERSECTION = "intersection"


def _ro(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DrivableGrid:
    """Boolean drivable mask; ``mask[row, col]`` covers cell
    ``[x_min + col*cell, x_min + (col+1)*cell) x [y_min + row*cell, ...)``."""

    x_min: float
    y_min: float
    cell_size: float
    mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask", _ro(self.mask, dtype=bool))

    @property
    def x_max(self) -> float:
        return self.x_min + self.mask.shape[1] * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_min + self.mask.shape[0] * self.cell_size

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return (
            (pts[..., 0] >= self.x_min)
            & (pts[..., 0] < self.x_max)
            & (pts[..., 1] >= self.y_min)
            & (pts[..., 1] < self.y_max)
        )

    def cells(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        col = np.floor((pts[..., 0] - self.x_min) / self.cell_size).astype(np.int64)
        row = np.floor((pts[..., 1] - self.y_min) / self.cell_size).astype(np.int64)
        return row, col

    def drivable(self, pts: np.ndarray) -> np.ndarray:
        """Drivable flag per point; points outside the window raise."""
        pts = np.asarray(pts, dtype=np.float64)
        if not np.all(self.contains(pts)):
            raise OutsideWindowError("point outside the scene grid window")
        row, col = self.cells(pts)
        return self.mask[row, col]


@dataclass(frozen=True, eq=False)
class Centerline:
    """Route polyline with cumulative arc length, queried by projection."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = _ro(self.points)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("centerline needs at least two points")
        object.__setattr__(self, "points", pts)
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        object.__setattr__(self, "_seg", seg)
        object.__setattr__(self, "_seg_len", seg_len)
        object.__setattr__(self, "arc_length", _ro(np.concatenate([[0.0], np.cumsum(seg_len)])))
        object.__setattr__(self, "_tree", cKDTree(pts))

    @property
    def length(self) -> float:
        return float(self.arc_length[-1])

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (arc length s, signed lateral offset, tangent heading) per point.

        Lateral offset is positive to the left of the direction of travel.
        Points beyond either end are extrapolated along the end segment.
        """
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        _, idx = self._tree.query(flat)
        n_seg = self._seg.shape[0]
        cand = np.stack([np.clip(idx - 1, 0, n_seg - 1), np.clip(idx, 0, n_seg - 1)], axis=1)
        best_s = np.empty(len(flat))
        best_lat = np.empty(len(flat))
        best_head = np.empty(len(flat))
        best_d = np.full(len(flat), np.inf)
        for c in range(2):
            k = cand[:, c]
            a = self.points[k]
            d = self._seg[k]
            L = self._seg_len[k]
            rel = flat - a
            t = np.sum(rel * d, axis=1) / (L * L)
            lo = np.where(k == 0, -np.inf, 0.0)
            hi = np.where(k == n_seg - 1, np.inf, 1.0)
            t = np.clip(t, lo, hi)
            foot = a + t[:, None] * d
            off = flat - foot
            dist = np.hypot(off[:, 0], off[:, 1])
            cross = d[:, 0] * rel[:, 1] - d[:, 1] * rel[:, 0]
            lat = np.sign(cross) * dist
            s = self.arc_length[k] + t * L
            head = np.arctan2(d[:, 1], d[:, 0])
            better = dist < best_d
            best_d = np.where(better, dist, best_d)
            best_s = np.where(better, s, best_s)
            best_lat = np.where(better, lat, best_lat)
            best_head = np.where(better, head, best_head)
        shape = pts.shape[:-1]
        return best_s.reshape(shape), best_lat.reshape(shape), best_head.reshape(shape)

    def point_at(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position and tangent heading at arc length ``s`` (extrapolated past the ends)."""
        s = np.asarray(s, dtype=np.float64)
        n_seg = self._seg.shape[0]
        k = np.clip(np.searchsorted(self.arc_length, s, side="right") - 1, 0, n_seg - 1)
        t = (s - self.arc_length[k]) / self._seg_len[k]
        pos = self.points[k] + t[..., None] * self._seg[k]
        head = np.arctan2(self._seg[k, 1], self._seg[k, 0])
        return pos, head


@dataclass(frozen=True)
class Agent:
    center: tuple[float, float]
    extent: tuple[float, float]  # (length, width), m
    heading: float
    velocity: tuple[float, float]  # m/s, world frame

    def __post_init__(self) -> None:
        if not (self.extent[0] > 0 and self.extent[1] > 0):
            raise ValueError("agent extents must be positive")
        vals = (*self.center, *self.extent, self.heading, *self.velocity)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("agent fields must be finite")


@dataclass(frozen=True)
class TrafficSignal:
    state: str  # "green" | "red"
    stop_s: float  # arc length of the stop line along the centerline

    def __post_init__(self) -> None:
        if self.state not in ("green", "red"):
            raise ValueError(f"unknown signal state {self.state!r}")


@dataclass(frozen=True, eq=False)
class Scene:
    kind: str
    seed: int
    grid: DrivableGrid
    centerline: Centerline
    agents: tuple[Agent, ...]
    ego_speed: float
    reference_progress: float
    signal: TrafficSignal | None = None
    lane_width: float = 3.5
    ego_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)
    time: float = 0.0
    previous_accels: np.ndarray | None = None
    expert: np.ndarray | None = None  # ego-frame (T, 2) privileged plan, if generated
    _arrays: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.previous_accels is not None:
            object.__setattr__(self, "previous_accels", _ro(self.previous_accels))
        if self.expert is not None:
            object.__setattr__(self, "expert", _ro(self.expert))
        A = len(self.agents)
        arrays = {
            "center": np.array([a.center for a in self.agents], dtype=np.float64).reshape(A, 2),
            "half": 0.5 * np.array([a.extent for a in self.agents], dtype=np.float64).reshape(A, 2),
            "heading": np.array([a.heading for a in self.agents], dtype=np.float64).reshape(A),
            "velocity": np.array([a.velocity for a in self.agents], dtype=np.float64).reshape(A, 2),
        }
        object.__setattr__(self, "_arrays", arrays)

    @property
    def scene_id(self) -> str:
        return f"{self.kind}-{self.seed}"

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def agent_arrays(self) -> dict:
        return self._arrays

    def agent_centers_at(self, t: np.ndarray | float) -> np.ndarray:
        """Agent centers at absolute time ``t``; output ``shape(t) + (A, 2)``."""
        arr = self._arrays
        t = np.asarray(t, dtype=np.float64)
        return arr["center"] + t[..., None, None] * arr["velocity"]

    def ego_to_world(self, pts: np.ndarray) -> np.ndarray:
        x, y, yaw = self.ego_pose
        if x == 0.0 and y == 0.0 and yaw == 0.0:
            return np.asarray(pts, dtype=np.float64)
        c, s = math.cos(yaw), math.sin(yaw)
        pts = np.asarray(pts, dtype=np.float64)
        wx = c * pts[..., 0] - s * pts[..., 1] + x
        wy = s * pts[..., 0] + c * pts[..., 1] + y
        return np.stack([wx, wy], axis=-1)

    def world_to_ego(self, pts: np.ndarray) -> np.ndarray:
        x, y, yaw = self.ego_pose
        c, s = math.cos(yaw), math.sin(yaw)
        pts = np.asarray(pts, dtype=np.float64)
        dx, dy = pts[..., 0] - x, pts[..., 1] - y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def with_state(self, **changes) -> "Scene":
        return replace(self, **changes)

    def validate(self) -> None:
        """Raise ``ValueError`` when a scene invariant does not hold."""
        if not math.isfinite(self.ego_speed) or self.ego_speed < 0:
            raise ValueError("ego speed must be finite and non-negative")
        if not np.all(self.grid.contains(self.centerline.points)):
            raise ValueError("centerline leaves the grid window")
        arr = self._arrays
        if len(self.agents):
            c, s = np.cos(arr["heading"]), np.sin(arr["heading"])
            for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                cx = arr["center"][:, 0] + sx * arr["half"][:, 0] * c - sy * arr["half"][:, 1] * s
                cy = arr["center"][:, 1] + sx * arr["half"][:, 0] * s + sy * arr["half"][:, 1] * c
                if not np.all(self.grid.contains(np.stack([cx, cy], axis=-1))):
                    raise ValueError("agent footprint leaves the grid window")


# -- JSON --------------------------------------------------------------------


def _rle_encode(row: np.ndarray) -> list[int]:
    """Run lengths of a boolean row, starting with a (possibly empty) False run."""
    vals = row.astype(np.int8)
    change = np.flatnonzero(np.diff(vals)) + 1
    bounds = np.concatenate([[0], change, [len(vals)]])
    runs = np.diff(bounds).tolist()
    if vals[0]:
        runs = [0] + runs
    return runs


def _rle_decode(runs: list[int], width: int) -> np.ndarray:
    out = np.zeros(width, dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            out[pos : pos + r] = True
        pos += r
        val = not val
    if pos != width:
        raise ValueError("RLE row length mismatch")
    return out


def scene_to_dict(scene: Scene) -> dict:
    arr = scene.agent_arrays()
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "kind": scene.kind,
        "seed": int(scene.seed),
        "ego_speed": float(scene.ego_speed),
        "reference_progress": float(scene.reference_progress),
        "lane_width": float(scene.lane_width),
        "ego_pose": [float(v) for v in scene.ego_pose],
        "time": float(scene.time),
        "signal": None
        if scene.signal is None
        else {"state": scene.signal.state, "stop_s": float(scene.signal.stop_s)},
        "grid": {
            "x_min": float(scene.grid.x_min),
            "y_min": float(scene.grid.y_min),
            "cell_size": float(scene.grid.cell_size),
            "rows": int(scene.grid.mask.shape[0]),
            "cols": int(scene.grid.mask.shape[1]),
            "rle": [_rle_encode(r) for r in scene.grid.mask],
        },
        "centerline": scene.centerline.points.tolist(),
        "agents": {
            "center": arr["center"].tolist(),
            "extent": (2.0 * arr["half"]).tolist(),
            "heading": arr["heading"].tolist(),
            "velocity": arr["velocity"].tolist(),
        },
        "expert": None if scene.expert is None else scene.expert.tolist(),
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("format") != SCENE_FORMAT or doc.get("version") != SCENE_VERSION:
        raise ValueError("not a trajkit scene document (format/version mismatch)")
    g = doc["grid"]
    mask = np.stack([_rle_decode(r, g["cols"]) for r in g["rle"]])
    if mask.shape != (g["rows"], g["cols"]):
        raise ValueError("grid shape mismatch")
    ag = doc["agents"]
    agents = tuple(
        Agent(tuple(c), tuple(e), float(h), tuple(v))
        for c, e, h, v in zip(ag["center"], ag["extent"], ag["heading"], ag["velocity"])
    )
    sig = doc["signal"]
    return Scene(
        kind=doc["kind"],
        seed=int(doc["seed"]),
        grid=DrivableGrid(g["x_min"], g["y_min"], g["cell_size"], mask),
        centerline=Centerline(np.array(doc["centerline"], dtype=np.float64)),
        agents=agents,
        ego_speed=float(doc["ego_speed"]),
        reference_progress=float(doc["reference_progress"]),
        signal=None if sig is None else TrafficSignal(sig["state"], float(sig["stop_s"])),
        lane_width=float(doc["lane_width"]),
        ego_pose=tuple(doc["ego_pose"]),
        time=float(doc["time"]),
        expert=None if doc.get("expert") is None else np.array(doc["expert"], dtype=np.float64),
    )


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":"))


def save_scene(scene: Scene, path: str | Path) -> str:
    """Write the scene JSON; returns its sha256 hex digest."""
    text = dumps_scene(scene)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
