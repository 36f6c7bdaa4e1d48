"""Trajectory representation, polar-domain expansion and perturbation.

Trajectories are ego-frame waypoint sequences ``(T, 2)`` sampled at a fixed
timestep. Batched code paths operate on plain arrays shaped ``(..., T, 2)``;
the :class:`Trajectory` wrapper validates and freezes a single sequence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_T = 8
DEFAULT_DT = 0.5

DEFAULT_RADIAL = (0.92, 0.96, 1.0, 1.04, 1.08)
DEFAULT_ANGULAR_DEG = (-6.0, -3.0, 0.0, 3.0, 6.0)


class InvalidTrajectoryError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered ego-frame waypoints, one every ``timestep_s`` seconds."""

    waypoints: np.ndarray
    timestep_s: float = DEFAULT_DT

    def __post_init__(self) -> None:
        pts = np.asarray(self.waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise InvalidTrajectoryError(f"waypoints must be (T, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidTrajectoryError("waypoints contain non-finite values")
        if not self.timestep_s > 0:
            raise InvalidTrajectoryError("timestep_s must be > 0")
        object.__setattr__(self, "waypoints", _frozen(pts))

    @property
    def T(self) -> int:
        return self.waypoints.shape[0]

    def __len__(self) -> int:
        return self.T

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.timestep_s == other.timestep_s
            and self.waypoints.shape == other.waypoints.shape
            and bool(np.array_equal(self.waypoints, other.waypoints))
        )

    def times(self) -> np.ndarray:
        return self.timestep_s * np.arange(1, self.T + 1)


@dataclass(frozen=True, eq=False)
class PolarTrajectory:
    """Waypoints as ``(rho, theta)`` pairs; theta in (-pi, pi]."""

    points: np.ndarray
    timestep_s: float = DEFAULT_DT

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidTrajectoryError(f"points must be (T, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidTrajectoryError("polar points contain non-finite values")
        object.__setattr__(self, "points", _frozen(pts))


@dataclass(frozen=True)
class ExpansionConfig:
    radial_coeffs: tuple[float, ...] = DEFAULT_RADIAL
    angular_coeffs: tuple[float, ...] = tuple(math.radians(d) for d in DEFAULT_ANGULAR_DEG)

    def __post_init__(self) -> None:
        radial = tuple(float(v) for v in self.radial_coeffs)
        angular = tuple(float(v) for v in self.angular_coeffs)
        if len(radial) == 0 or len(radial) != len(angular):
            raise ValueError("radial and angular coefficient sets must share a positive length")
        if any(not (v > 0 and math.isfinite(v)) for v in radial):
            raise ValueError("radial coefficients must be positive")
        if any(not math.isfinite(v) for v in angular):
            raise ValueError("angular coefficients must be finite")
        object.__setattr__(self, "radial_coeffs", radial)
        object.__setattr__(self, "angular_coeffs", angular)

    @property
    def n_exp(self) -> int:
        return len(self.radial_coeffs)

    @property
    def size(self) -> int:
        return self.n_exp * self.n_exp

    @classmethod
    def grid(cls, n_exp: int, radial_span: float = 0.08, angular_span_deg: float = 6.0) -> "ExpansionConfig":
        """Symmetric ``n_exp x n_exp`` grid; ``grid(5)`` reproduces the defaults."""
        radial = np.round(np.linspace(1.0 - radial_span, 1.0 + radial_span, n_exp), 12)
        angular = np.radians(np.linspace(-angular_span_deg, angular_span_deg, n_exp))
        return cls(tuple(radial), tuple(angular))

    def to_dict(self) -> dict:
        return {"radial_coeffs": list(self.radial_coeffs), "angular_coeffs": list(self.angular_coeffs)}


@dataclass(frozen=True)
class DiffusionSchedule:
    alpha_bar: tuple[float, ...] = field(default_factory=lambda: tuple(np.linspace(1.0, 0.1, 8)))

    def __post_init__(self) -> None:
        ab = tuple(float(v) for v in self.alpha_bar)
        if len(ab) == 0:
            raise ValueError("schedule needs at least one timestep")
        if any(not (0.0 < v <= 1.0) for v in ab):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if any(b >= a for a, b in zip(ab, ab[1:])):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def t_trunc(self) -> int:
        return len(self.alpha_bar)

    @classmethod
    def linear(cls, t_trunc: int = 8, start: float = 1.0, end: float = 0.1) -> "DiffusionSchedule":
        return cls(tuple(np.linspace(start, end, t_trunc)))

    def at(self, i: int) -> float:
        """Cumulative schedule value for the 1-based timestep ``i``."""
        if not 1 <= i <= self.t_trunc:
            raise IndexError(f"timestep {i} outside [1, {self.t_trunc}]")
        return self.alpha_bar[i - 1]


def as_array(traj: Trajectory | np.ndarray) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.waypoints
    return np.asarray(traj, dtype=np.float64)


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidTrajectoryError("non-finite coordinate")


def to_polar(traj: Trajectory) -> PolarTrajectory:
    pts = traj.waypoints
    rho = np.hypot(pts[:, 0], pts[:, 1])
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    theta = np.where(rho == 0.0, 0.0, theta)
    # atan2 returns -pi for (-x, -0.0); fold onto +pi
    theta = np.where(theta == -np.pi, np.pi, theta)
    return PolarTrajectory(np.stack([rho, theta], axis=-1), traj.timestep_s)


def from_polar(ptraj: PolarTrajectory) -> Trajectory:
    rho, theta = ptraj.points[:, 0], ptraj.points[:, 1]
    return Trajectory(np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=-1), ptraj.timestep_s)


def polar_expand_array(points: np.ndarray, cfg: ExpansionConfig) -> np.ndarray:
    """Expand ``(..., T, 2)`` into ``(..., n_exp**2, T, 2)``, row-major over (u, v).

    Scaling rho by lambda_u and offsetting theta by delta_v is computed through
    the equivalent rotation-plus-scale, which is exact for the identity cell.
    """
    pts = np.asarray(points, dtype=np.float64)
    lam = np.asarray(cfg.radial_coeffs)
    cos_d = np.cos(np.asarray(cfg.angular_coeffs))
    sin_d = np.sin(np.asarray(cfg.angular_coeffs))
    x = pts[..., None, None, :, 0]
    y = pts[..., None, None, :, 1]
    lam_b = lam[:, None, None]
    xr = lam_b * (x * cos_d[None, :, None] - y * sin_d[None, :, None])
    yr = lam_b * (x * sin_d[None, :, None] + y * cos_d[None, :, None])
    out = np.stack([xr, yr], axis=-1)
    return out.reshape(pts.shape[:-2] + (cfg.size,) + pts.shape[-2:])


def polar_expand_jacobians(cfg: ExpansionConfig) -> np.ndarray:
    """Per-variant 2x2 linear maps ``(n_exp**2, 2, 2)`` applied to every waypoint."""
    mats = []
    for lam in cfg.radial_coeffs:
        for d in cfg.angular_coeffs:
            c, s = math.cos(d), math.sin(d)
            mats.append(lam * np.array([[c, -s], [s, c]]))
    return np.array(mats)


def xy_expand_array(points: np.ndarray, cfg: ExpansionConfig) -> np.ndarray:
    """Cartesian baseline: x scaled by lambda_u, y scaled by (1 + tan delta_v)."""
    pts = np.asarray(points, dtype=np.float64)
    sx = np.asarray(cfg.radial_coeffs)[:, None, None]
    sy = 1.0 + np.tan(np.asarray(cfg.angular_coeffs))[None, :, None]
    x = pts[..., None, None, :, 0] * sx
    y = pts[..., None, None, :, 1] * sy
    x, y = np.broadcast_arrays(x, y)
    out = np.stack([x, y], axis=-1)
    return out.reshape(pts.shape[:-2] + (cfg.size,) + pts.shape[-2:])


def expand_polar(traj: Trajectory, cfg: ExpansionConfig) -> list[Trajectory]:
    out = polar_expand_array(traj.waypoints, cfg)
    return [Trajectory(o, traj.timestep_s) for o in out]


def expand_xy(traj: Trajectory, cfg: ExpansionConfig) -> list[Trajectory]:
    out = xy_expand_array(traj.waypoints, cfg)
    return [Trajectory(o, traj.timestep_s) for o in out]


def perturb_gaussian(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Trajectory(traj.waypoints, traj.timestep_s)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(traj.waypoints.shape)
    return Trajectory(traj.waypoints + sigma * noise, traj.timestep_s)


def gaussian_expand_array(points: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. Gaussian perturbations per input, ``(..., n, T, 2)``."""
    pts = np.asarray(points, dtype=np.float64)
    noise = rng.standard_normal(pts.shape[:-2] + (n,) + pts.shape[-2:])
    return pts[..., None, :, :] + sigma * noise


def forward_diffuse(
    traj: Trajectory,
    sched: DiffusionSchedule,
    i: int,
    seed: int | None = None,
    noise: np.ndarray | None = None,
) -> Trajectory:
    """Noise a trajectory to timestep ``i``; ``noise`` overrides the seeded draw."""
    ab = sched.at(i)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(traj.waypoints.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != traj.waypoints.shape:
            raise ValueError("noise shape must match the trajectory")
    if ab == 1.0:
        return Trajectory(traj.waypoints, traj.timestep_s)
    out = math.sqrt(ab) * traj.waypoints + math.sqrt(1.0 - ab) * noise
    return Trajectory(out, traj.timestep_s)


def distance_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Root-mean-square waypoint distance over the last two axes (broadcasting)."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    dx, dy = diff[..., 0], diff[..., 1]
    return np.sqrt(np.mean(dx * dx + dy * dy, axis=-1))


def trajectory_distance(a: Trajectory, b: Trajectory) -> float:
    """Root-mean-square Euclidean distance between corresponding waypoints (m).

    Equals the flattened-vector Euclidean distance divided by ``sqrt(T)``,
    so any exact Euclidean index over flattened waypoints ranks identically.
    """
    if a.waypoints.shape != b.waypoints.shape:
        raise InvalidTrajectoryError(
            f"waypoint count mismatch: {a.waypoints.shape[0]} vs {b.waypoints.shape[0]}"
        )
    return float(distance_array(a.waypoints, b.waypoints))


def turning_angles(points: np.ndarray) -> np.ndarray:
    """Signed angle between consecutive segments, ``(..., T-2)``."""
    seg = np.diff(points, axis=-2)
    a, b = seg[..., :-1, :], seg[..., 1:, :]
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def second_difference_magnitude(points: np.ndarray) -> np.ndarray:
    """Mean norm of the discrete second difference per trajectory."""
    dd = np.diff(points, n=2, axis=-2)
    return np.mean(np.linalg.norm(dd, axis=-1), axis=-1)


def save_csv(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y"])
        for t, (x, y) in zip(traj.times(), traj.waypoints):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def load_csv(path: str | Path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidTrajectoryError(f"{path}: no waypoints")
    t = np.array([float(r["t"]) for r in rows])
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    dt = float(t[0]) if len(t) == 1 else float(t[1] - t[0])
    return Trajectory(pts, dt)


def stack(trajs: Sequence[Trajectory]) -> np.ndarray:
    if not trajs:
        return np.zeros((0, DEFAULT_T, 2))
    shapes = {t.waypoints.shape for t in trajs}
    if len(shapes) != 1:
        raise InvalidTrajectoryError(f"mixed waypoint counts: {sorted(shapes)}")
    return np.stack([t.waypoints for t in trajs])
