"""Offline per-scene reward tables with exact nearest-neighbour retrieval.

A vocabulary of constant-curvature, linear-speed trajectories is scored once
per scene; at training time any query trajectory borrows the scores of its
nearest vocabulary entry under ``trajectory_distance``.
"""

from __future__ import annotations

import math
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from trajkit.geometry import DEFAULT_DT, DEFAULT_T, Trajectory, distance_array
from trajkit.scene_metrics.metrics import METRICS, SubMetricScores, eval_submetrics, eval_submetrics_array
from trajkit.scene_metrics.world import Scene

TABLE_MAGIC = b"TRRC"
TABLE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# relative slack under which two distances count as a tie (lowest index wins)
TIE_RTOL = 1e-12
TIE_ATOL = 1e-15


class TableFormatError(ValueError):
    """Raised for a malformed, truncated or corrupted cache file."""


# -- vocabulary ------------------------------------------------------------------


@dataclass(frozen=True)
class VocabularySpec:
    """Grid of (start speed, end speed, curvature) parameters."""

    v_start: tuple[float, ...] = tuple(np.linspace(1.0, 15.0, 8).tolist())
    v_end: tuple[float, ...] = tuple(np.linspace(0.0, 16.0, 8).tolist())
    curvature: tuple[float, ...] = tuple(0.06 * u * abs(u) for u in np.linspace(-1.0, 1.0, 16).tolist())
    T: int = DEFAULT_T
    dt: float = DEFAULT_DT

    @property
    def size(self) -> int:
        return len(self.v_start) * len(self.v_end) * len(self.curvature)

    def densified(self, factor: int) -> "VocabularySpec":
        """Same ranges with ``factor`` times as many levels per axis."""

        def dense(levels):
            return tuple(np.linspace(min(levels), max(levels), factor * len(levels)).tolist())

        return VocabularySpec(dense(self.v_start), dense(self.v_end), dense(self.curvature), self.T, self.dt)

    def to_dict(self) -> dict:
        return {
            "v_start": list(self.v_start),
            "v_end": list(self.v_end),
            "curvature": list(self.curvature),
            "T": self.T,
            "dt": self.dt,
        }


def arc_trajectories(params: np.ndarray, T: int = DEFAULT_T, dt: float = DEFAULT_DT) -> np.ndarray:
    """Waypoints for rows of ``(v_start, v_end, curvature)``; returns ``(N, T, 2)``."""
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    v0, v1, k = params[:, 0:1], params[:, 1:2], params[:, 2:3]
    H = T * dt
    t = (np.arange(T) + 1.0) * dt
    s = v0 * t + 0.5 * (v1 - v0) * t * t / H
    small = np.abs(k) < 1e-9
    ks = np.where(small, 1.0, k)
    x = np.where(small, s, np.sin(ks * s) / ks)
    y = np.where(small, 0.5 * k * s * s, (1.0 - np.cos(ks * s)) / ks)
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True, eq=False)
class AnchorVocabulary:
    trajectories: np.ndarray  # (N, T, 2)
    params: np.ndarray  # (N, 3) rows of (v_start, v_end, curvature)
    spec: VocabularySpec

    def __post_init__(self) -> None:
        for name in ("trajectories", "params"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.trajectories.shape[0]

    def __getitem__(self, j: int) -> Trajectory:
        return Trajectory(self.trajectories[j], self.spec.dt)

    @property
    def T(self) -> int:
        return self.trajectories.shape[1]


def build_vocabulary(n: int = 1024, spec: VocabularySpec | None = None) -> AnchorVocabulary:
    """Deterministic vocabulary of ``n`` distinct arc trajectories.

    The full grid is subsampled at evenly spaced flat indices; when ``n``
    exceeds the grid, every axis is densified first. ``n == 1`` gives one
    straight, constant-speed trajectory at the mean start speed.
    """
    if n < 1:
        raise ValueError("vocabulary size must be >= 1")
    spec = spec or VocabularySpec()
    if n == 1:
        v = float(np.mean(spec.v_start))
        params = np.array([[v, v, 0.0]])
    else:
        factor = 1
        while spec.densified(factor).size < n:
            factor += 1
        grid_spec = spec.densified(factor) if factor > 1 else spec
        g0, g1, g2 = np.meshgrid(grid_spec.v_start, grid_spec.v_end, grid_spec.curvature, indexing="ij")
        grid = np.stack([g0.ravel(), g1.ravel(), g2.ravel()], axis=-1)
        idx = np.round(np.linspace(0, len(grid) - 1, n)).astype(np.int64)
        params = grid[idx]
    return AnchorVocabulary(arc_trajectories(params, spec.T, spec.dt), params, spec)


# -- table -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Immutable per-scene score matrix plus a k-d tree over flattened trajectories."""

    scene_id: str
    metrics: tuple[str, ...]
    trajectories: np.ndarray  # (N, T, 2)
    scores: np.ndarray  # (N, M)
    _tree: cKDTree = field(init=False, repr=False)
    _flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        traj = np.array(self.trajectories, dtype=np.float64, copy=True)
        scores = np.array(self.scores, dtype=np.float64, copy=True)
        if traj.ndim != 3 or traj.shape[-1] != 2:
            raise ValueError("trajectories must be (N, T, 2)")
        if scores.shape != (traj.shape[0], len(self.metrics)):
            raise ValueError("scores must be (N, metric count)")
        traj.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "scores", scores)
        flat = traj.reshape(len(traj), -1)
        object.__setattr__(self, "_flat", flat)
        object.__setattr__(self, "_tree", cKDTree(flat))

    @property
    def N(self) -> int:
        return self.trajectories.shape[0]

    @property
    def T(self) -> int:
        return self.trajectories.shape[1]

    def _resolve(self, flat: np.ndarray, query: np.ndarray, d: np.ndarray, idx: np.ndarray) -> tuple[int, float]:
        # candidates within float slack of the best flattened distance are
        # re-ranked with distance_array; exact ties go to the lowest index
        k = len(idx)
        while k < self.N and d[-1] <= d[0] * (1.0 + 1e-9) + 1e-12:
            k = min(2 * k, self.N)
            d, idx = self._tree.query(flat, k=k)
        near = idx[d <= d[0] * (1.0 + 1e-9) + 1e-12]
        exact = distance_array(query, self.trajectories[near])
        best = exact.min()
        tied = near[exact <= best * (1.0 + TIE_RTOL) + TIE_ATOL]
        return int(tied.min()), float(best)

    def nearest_one(self, query: np.ndarray) -> tuple[int, float]:
        """Matched index and trajectory distance for one ``(T, 2)`` query.

        The tree ranks flattened vectors by Euclidean distance, which is
        ``sqrt(T)`` times ``trajectory_distance``; the second neighbour is
        fetched only to detect near-ties.
        """
        flat = query.reshape(-1)
        if not np.all(np.isfinite(flat)):
            raise ValueError("query must be finite")
        if self.N == 1:
            return 0, float(distance_array(query, self.trajectories[0]))
        d, idx = self._tree.query(flat, k=2)
        if d[1] > d[0] * (1.0 + 1e-9) + 1e-12:
            return int(idx[0]), float(d[0]) / math.sqrt(self.T)
        return self._resolve(flat, query, d, idx)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Matched indices and trajectory distances for queries ``(Q, T, 2)``."""
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim != 3 or q.shape[1:] != self.trajectories.shape[1:]:
            raise ValueError(f"queries must be ({self.T}, 2) trajectories, got {q.shape[1:]}")
        flat = q.reshape(len(q), -1)
        if not np.all(np.isfinite(flat)):
            raise ValueError("queries must be finite")
        if self.N == 1:
            return np.zeros(len(q), dtype=np.int64), distance_array(q, self.trajectories[0])
        d, idx = self._tree.query(flat, k=2)
        picks = idx[:, 0].astype(np.int64)
        dists = d[:, 0] / math.sqrt(self.T)
        for i in np.flatnonzero(d[:, 1] <= d[:, 0] * (1.0 + 1e-9) + 1e-12):
            picks[i], dists[i] = self._resolve(flat[i], q[i], d[i], idx[i])
        return picks, dists

    def lookup(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Retrieved score rows ``(Q, M)`` and matched indices."""
        idx, _ = self.nearest(queries)
        return self.scores[idx], idx


def precompute_rewards(
    scene: Scene, vocab: AnchorVocabulary, workers: int = 1, chunk: int = 256, scene_id: str | None = None
) -> RewardTable:
    """Score every vocabulary entry on ``scene``; chunks may run on a thread pool."""
    trajs = vocab.trajectories
    starts = list(range(0, len(trajs), chunk))

    def run(a: int) -> np.ndarray:
        return eval_submetrics_array(scene, trajs[a : a + chunk], vocab.spec.dt)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(a) for a in starts]
    return RewardTable(scene_id or scene.scene_id, METRICS, trajs, np.concatenate(parts, axis=0))


def retrieve(table: RewardTable, vocab: AnchorVocabulary | None, query: Trajectory | np.ndarray) -> tuple[SubMetricScores, int]:
    """Scores of the nearest vocabulary entry and its index (ties go to the lowest index)."""
    pts = query.waypoints if isinstance(query, Trajectory) else np.asarray(query, dtype=np.float64)
    if vocab is not None and vocab.trajectories.shape[0] != table.N:
        raise ValueError("vocabulary does not match the table")
    if pts.shape != (table.T, 2):
        raise ValueError(f"query must be ({table.T}, 2), got {pts.shape}")
    j, _ = table.nearest_one(pts)
    return SubMetricScores.from_array(table.scores[j]), j


def linear_scan(trajectories: np.ndarray, query: np.ndarray) -> int:
    """Exhaustive nearest entry with the same tie rule as the index."""
    d = distance_array(np.asarray(query)[None], np.asarray(trajectories))
    best = d.min()
    return int(np.flatnonzero(d <= best * (1.0 + TIE_RTOL) + TIE_ATOL)[0])


def retrieval_error_report(scene: Scene, table: RewardTable, vocab: AnchorVocabulary | None, queries) -> dict:
    """Per-metric mean absolute error and disagreement rate of retrieval vs direct evaluation."""
    q = np.stack([t.waypoints if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64) for t in queries])
    retrieved, idx = table.lookup(q)
    _, dist = table.nearest(q)
    direct = eval_submetrics_array(scene, q)
    direct = direct[:, [METRICS.index(m) for m in table.metrics]]
    err = np.abs(retrieved - direct)
    return {
        "scene_id": table.scene_id,
        "n_queries": int(len(q)),
        "mae": {m: float(err[:, i].mean()) for i, m in enumerate(table.metrics)},
        "disagreement": {m: float((err[:, i] > 0).mean()) for i, m in enumerate(table.metrics)},
        "nn_distance_mean": float(dist.mean()),
        "nn_distance_max": float(dist.max()),
        "nn_distance": dist.tolist(),
        "matched_index": idx.tolist(),
    }


# -- file format ---------------------------------------------------------------------


def table_to_bytes(table: RewardTable) -> bytes:
    parts = [_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.N, table.T, len(table.metrics))]
    for name in table.metrics:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(table.trajectories.astype("<f8").tobytes())
    parts.append(table.scores.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def table_from_bytes(data: bytes, scene_id: str) -> RewardTable:
    if len(data) < _HEADER.size + 4:
        raise TableFormatError("file too short for a reward table header")
    magic, version, N, T, M = _HEADER.unpack_from(data, 0)
    if magic != TABLE_MAGIC:
        raise TableFormatError(f"bad magic {magic!r}")
    if version != TABLE_VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise TableFormatError("checksum mismatch (truncated or corrupted file)")
    off = _HEADER.size
    names = []
    for _ in range(M):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        names.append(data[off : off + n].decode("utf-8"))
        off += n
    expected = off + 8 * (N * 2 * T + N * M) + 4
    if len(data) != expected:
        raise TableFormatError(f"size {len(data)} does not match header ({expected} bytes)")
    traj = np.frombuffer(data, dtype="<f8", count=N * 2 * T, offset=off).reshape(N, T, 2)
    off += 8 * N * 2 * T
    scores = np.frombuffer(data, dtype="<f8", count=N * M, offset=off).reshape(N, M)
    return RewardTable(scene_id, tuple(names), traj, scores)


def save_table(table: RewardTable, path: str | Path) -> None:
    """Write ``table``; the scene id is carried by the file name stem."""
    Path(path).write_bytes(table_to_bytes(table))


def load_table(path: str | Path) -> RewardTable:
    path = Path(path)
    return table_from_bytes(path.read_bytes(), path.stem)


def table_file_size(N: int, T: int, metrics: tuple[str, ...]) -> int:
    names = sum(4 + len(m.encode("utf-8")) for m in metrics)
    return _HEADER.size + names + 8 * N * 2 * T + 8 * N * len(metrics) + 4


# -- benchmark ------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchResult:
    retrieval_latency: float
    oracle_latency: float
    n_queries: int

    @property
    def speedup(self) -> float:
        return self.oracle_latency / self.retrieval_latency

    def to_dict(self) -> dict:
        return {
            "retrieval_latency_s": self.retrieval_latency,
            "oracle_latency_s": self.oracle_latency,
            "speedup": self.speedup,
            "n_queries": self.n_queries,
        }


def bench_retrieval(scene: Scene, table: RewardTable, vocab: AnchorVocabulary | None, queries, repeats: int = 1) -> BenchResult:
    """Mean per-query wall time of ``retrieve`` vs ``eval_submetrics`` (single thread)."""
    qs = [t if isinstance(t, Trajectory) else Trajectory(np.asarray(t, dtype=np.float64)) for t in queries]
    if len(qs) < 100:
        raise ValueError("bench_retrieval needs at least 100 queries")
    # warm both paths once so lazy imports and caches do not skew the first sample
    retrieve(table, vocab, qs[0])
    eval_submetrics(scene, qs[0])
    best_r, best_o = math.inf, math.inf
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        for q in qs:
            retrieve(table, vocab, q)
        best_r = min(best_r, (time.perf_counter() - t0) / len(qs))
        t0 = time.perf_counter()
        for q in qs:
            eval_submetrics(scene, q)
        best_o = min(best_o, (time.perf_counter() - t0) / len(qs))
    return BenchResult(best_r, best_o, len(qs))
