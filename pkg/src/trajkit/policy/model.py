"""Two-stage planner: anchor denoising and selection, expansion, refinement and scoring."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from trajkit.geometry import (
    DEFAULT_DT,
    DEFAULT_T,
    DiffusionSchedule,
    ExpansionConfig,
    Trajectory,
    gaussian_expand_array,
    polar_expand_array,
    xy_expand_array,
)
from trajkit.policy import network
from trajkit.policy.features import FEATURE_DIM, encode_scene
from trajkit.scene_metrics.metrics import SAFETY_METRICS, MetricWeights
from trajkit.scene_metrics.world import Scene

VARIANTS = ("polar", "xy", "gaussian")
DIST_SCORE_MODES = ("log", "prob")
LOG_FLOOR = 1e-6
COORD_SCALE = 10.0  # trajectories enter the networks divided by this

CHECKPOINT_MAGIC = b"HPOL"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or corrupted policy checkpoint."""


@dataclass(frozen=True)
class PolicyConfig:
    m1: int = 20
    k: int = 2
    expansion: ExpansionConfig = ExpansionConfig()
    variant: str = "polar"
    gaussian_sigma: float = 0.5
    gamma_dist: float = 0.6
    gamma_pdms: float = 0.05
    gamma_rl: float = 0.01
    beta: float = 1.0
    dist_score: str = "log"
    hidden: int = 64
    schedule: DiffusionSchedule = DiffusionSchedule()
    T: int = DEFAULT_T
    dt: float = DEFAULT_DT
    metrics: tuple[str, ...] = SAFETY_METRICS

    def __post_init__(self) -> None:
        if not 1 <= self.k <= self.m1:
            raise ValueError(f"k={self.k} must lie in [1, m1={self.m1}]")
        if min(self.gamma_dist, self.gamma_pdms, self.gamma_rl) < 0:
            raise ValueError("ensemble coefficients must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown expansion variant {self.variant!r}")
        if self.dist_score not in DIST_SCORE_MODES:
            raise ValueError(f"unknown dist_score mode {self.dist_score!r}")
        object.__setattr__(self, "metrics", tuple(self.metrics))

    @property
    def m_sub(self) -> int:
        return self.expansion.size

    @property
    def m2(self) -> int:
        return self.k * self.m_sub

    @property
    def stage1_shape(self) -> network.LayerShape:
        return network.LayerShape(4 * self.T + FEATURE_DIM, self.hidden, 2 * self.T + 1)

    @property
    def stage2_shape(self) -> network.LayerShape:
        return network.LayerShape(2 * self.T + FEATURE_DIM, self.hidden, 2 * self.T + 1 + 2 * len(self.metrics))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expansion"] = self.expansion.to_dict()
        d["schedule"] = list(self.schedule.alpha_bar)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyConfig":
        doc = dict(doc)
        if "expansion" in doc and isinstance(doc["expansion"], dict):
            e = doc["expansion"]
            doc["expansion"] = ExpansionConfig(tuple(e["radial_coeffs"]), tuple(e["angular_coeffs"]))
        if "schedule" in doc and not isinstance(doc["schedule"], DiffusionSchedule):
            doc["schedule"] = DiffusionSchedule(tuple(doc["schedule"]))
        if "metrics" in doc:
            doc["metrics"] = tuple(doc["metrics"])
        return cls(**doc)


@dataclass
class PolicyState:
    """Anchors plus the parameters of both stages; mutated only by training."""

    config: PolicyConfig
    anchors: np.ndarray  # (m1, T, 2)
    stage1: dict[str, np.ndarray]
    stage2: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        self.anchors = np.array(self.anchors, dtype=np.float64)
        if self.anchors.shape != (self.config.m1, self.config.T, 2):
            raise ValueError(f"anchors must be ({self.config.m1}, {self.config.T}, 2), got {self.anchors.shape}")

    def flat_params(self) -> np.ndarray:
        return np.concatenate([network.flatten(self.stage1), network.flatten(self.stage2)])

    def with_flat_params(self, vec: np.ndarray) -> "PolicyState":
        n1 = self.config.stage1_shape.size
        return PolicyState(
            self.config,
            self.anchors,
            network.unflatten(vec[:n1], self.config.stage1_shape),
            network.unflatten(vec[n1:], self.config.stage2_shape),
        )

    def copy(self) -> "PolicyState":
        return self.with_flat_params(self.flat_params().copy())

    def with_config(self, **changes) -> "PolicyState":
        """Same parameters under a config that keeps the network shapes (e.g. another k)."""
        cfg = replace(self.config, **changes)
        if cfg.stage1_shape != self.config.stage1_shape or cfg.stage2_shape != self.config.stage2_shape:
            raise ValueError("config change would alter network shapes")
        return PolicyState(cfg, self.anchors, self.stage1, self.stage2)


def init_policy(anchors: np.ndarray, config: PolicyConfig | None = None, seed: int = 0, zero_output: bool = True) -> PolicyState:
    """Fresh policy; ``zero_output`` zeroes both stages' output maps."""
    config = config or PolicyConfig(m1=len(anchors))
    rng = np.random.default_rng(seed)
    return PolicyState(
        config,
        anchors,
        network.init_params(config.stage1_shape, rng, zero_output),
        network.init_params(config.stage2_shape, rng, zero_output),
    )


# -- stage 1 -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Proposals:
    trajectories: np.ndarray  # (m1, T, 2) denoised
    logits: np.ndarray  # (m1,)
    noised: np.ndarray  # (m1, T, 2)
    inputs: np.ndarray = field(repr=False)
    hidden: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.logits)


def stage1_propose(
    state: PolicyState,
    feats: np.ndarray,
    sched: DiffusionSchedule | None = None,
    i: int | None = None,
    seed: int = 0,
    noise: np.ndarray | None = None,
) -> Proposals:
    """Noise every anchor to step ``i`` (default: the last) and denoise it."""
    cfg = state.config
    sched = sched or cfg.schedule
    i = sched.t_trunc if i is None else i
    ab = sched.at(i)
    anchors = state.anchors
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(anchors.shape)
    noised = math.sqrt(ab) * anchors + math.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)
    M = len(anchors)
    u = np.concatenate(
        [anchors.reshape(M, -1) / COORD_SCALE, noised.reshape(M, -1) / COORD_SCALE, np.broadcast_to(feats, (M, len(feats)))],
        axis=1,
    )
    y, h = network.forward(state.stage1, u)
    traj = noised + y[:, : 2 * cfg.T].reshape(M, cfg.T, 2)
    return Proposals(traj, y[:, 2 * cfg.T], noised, u, h)


def select_topk(logits, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits, descending; ties go to the lower index."""
    logits = np.asarray(logits.logits if isinstance(logits, Proposals) else logits, dtype=np.float64)
    if not 1 <= k <= len(logits):
        raise ValueError(f"k={k} outside [1, {len(logits)}]")
    order = np.lexsort((np.arange(len(logits)), -logits))
    return order[:k]


def expand_candidates(trajs: np.ndarray, cfg: PolicyConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Expand ``(K, T, 2)`` selections into ``(K * m_sub, T, 2)`` candidates."""
    trajs = np.asarray(trajs, dtype=np.float64)
    if cfg.variant == "polar":
        out = polar_expand_array(trajs, cfg.expansion)
    elif cfg.variant == "xy":
        out = xy_expand_array(trajs, cfg.expansion)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = gaussian_expand_array(trajs, cfg.m_sub, cfg.gaussian_sigma, rng)
    return out.reshape(-1, cfg.T, 2)


# -- stage 2 -----------------------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class Refined:
    trajectories: np.ndarray  # (M2, T, 2)
    dist_logit: np.ndarray  # (M2,)
    safety_logits: np.ndarray  # (M2, n_metrics)
    rl_logits: np.ndarray  # (M2, n_metrics)
    inputs: np.ndarray = field(repr=False)
    hidden: np.ndarray = field(repr=False)

    @property
    def dist_score(self) -> np.ndarray:
        return sigmoid(self.dist_logit)

    @property
    def safety_scores(self) -> np.ndarray:
        return sigmoid(self.safety_logits)

    @property
    def rl_scores(self) -> np.ndarray:
        return sigmoid(self.rl_logits)


def stage2_refine(state: PolicyState, feats: np.ndarray, expanded: np.ndarray) -> Refined:
    cfg = state.config
    expanded = np.asarray(expanded, dtype=np.float64)
    M = len(expanded)
    u = np.concatenate([expanded.reshape(M, -1) / COORD_SCALE, np.broadcast_to(feats, (M, len(feats)))], axis=1)
    y, h = network.forward(state.stage2, u)
    n2 = 2 * cfg.T
    nm = len(cfg.metrics)
    return Refined(
        expanded + y[:, :n2].reshape(M, cfg.T, 2),
        y[:, n2],
        y[:, n2 + 1 : n2 + 1 + nm],
        y[:, n2 + 1 + nm :],
        u,
        h,
    )


def metric_ensemble(probs: np.ndarray, metrics, weights: MetricWeights) -> np.ndarray:
    """Weighted log-penalty plus log weighted-average combination, per row.

    The average term is divided by the sum of its coefficients so the log
    argument stays in (0, 1].
    """
    probs = np.asarray(probs, dtype=np.float64)
    col = {m: i for i, m in enumerate(metrics)}
    out = np.zeros(probs.shape[:-1])
    for m, lam in weights.ensemble_penalty:
        if m in col:
            out = out + lam * np.log(np.maximum(probs[..., col[m]], LOG_FLOOR))
    avg_terms = [(m, lam) for m, lam in weights.ensemble_average if m in col]
    total = sum(lam for _, lam in avg_terms)
    if total > 0:
        avg = sum(lam * probs[..., col[m]] for m, lam in avg_terms) / total
        out = out + weights.lambda_avg * np.log(np.maximum(avg, LOG_FLOOR))
    return out


def ensemble_scores(refined: Refined, weights: MetricWeights | None, cfg: PolicyConfig) -> np.ndarray:
    """Per-candidate selection score from the distance, metric and RL heads."""
    weights = weights or MetricWeights()
    pdms = metric_ensemble(refined.safety_scores, cfg.metrics, weights)
    rl = metric_ensemble(refined.rl_scores, cfg.metrics, weights)
    dist = refined.dist_score
    if cfg.dist_score == "log":
        dist = np.log(np.maximum(dist, LOG_FLOOR))
    return cfg.gamma_dist * dist + cfg.gamma_pdms * pdms + cfg.gamma_rl * rl


def fuse_trajectories(refined, scores, dt: float = DEFAULT_DT) -> Trajectory:
    """Softmax(scores)-weighted average of the candidates, waypoint by waypoint."""
    trajs = np.asarray(refined.trajectories if isinstance(refined, Refined) else refined, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(trajs) != len(scores):
        raise ValueError("candidate and score counts differ")
    w = np.exp(scores - scores.max())
    w /= w.sum()
    return Trajectory(np.tensordot(w, trajs, axes=1), dt)


@dataclass(frozen=True, eq=False)
class PlanTrace:
    proposals: Proposals
    selected: np.ndarray
    expanded: np.ndarray
    refined: Refined
    scores: np.ndarray
    trajectory: Trajectory


def plan_trace(
    policy: PolicyState,
    scene: Scene,
    cfg: PolicyConfig | None = None,
    seed: int = 0,
    weights: MetricWeights | None = None,
    feats: np.ndarray | None = None,
) -> PlanTrace:
    if cfg is not None and cfg != policy.config:
        policy = PolicyState(cfg, policy.anchors, policy.stage1, policy.stage2)
    cfg = policy.config
    feats = encode_scene(scene) if feats is None else feats
    rng = np.random.default_rng(seed)
    props = stage1_propose(policy, feats, cfg.schedule, cfg.schedule.t_trunc, noise=rng.standard_normal(policy.anchors.shape))
    sel = select_topk(props.logits, cfg.k)
    expanded = expand_candidates(props.trajectories[sel], cfg, rng)
    refined = stage2_refine(policy, feats, expanded)
    scores = ensemble_scores(refined, weights, cfg)
    return PlanTrace(props, sel, expanded, refined, scores, fuse_trajectories(refined, scores, cfg.dt))


def plan(policy: PolicyState, scene: Scene, cfg: PolicyConfig | None = None, seed: int = 0) -> Trajectory:
    """Full pipeline: encode, propose, select, expand, refine, score, fuse."""
    return plan_trace(policy, scene, cfg, seed).trajectory


# -- checkpoint ---------------------------------------------------------------------------


def policy_to_bytes(policy: PolicyState) -> bytes:
    cfg = json.dumps(policy.config.to_dict(), sort_keys=True).encode("utf-8")
    params = np.concatenate([policy.anchors.ravel(), policy.flat_params()]).astype("<f8")
    body = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(cfg))
        + cfg
        + struct.pack("<Q", params.size)
        + params.tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def policy_from_bytes(data: bytes) -> PolicyState:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    version, n_cfg = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted checkpoint)")
    off = 12
    cfg = PolicyConfig.from_dict(json.loads(data[off : off + n_cfg].decode("utf-8")))
    off += n_cfg
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if off + 8 * n + 4 != len(data):
        raise CheckpointError("parameter block size does not match the header")
    vec = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    n_anchor = cfg.m1 * cfg.T * 2
    if n != n_anchor + cfg.stage1_shape.size + cfg.stage2_shape.size:
        raise CheckpointError("parameter count does not match the config")
    anchors = vec[:n_anchor].reshape(cfg.m1, cfg.T, 2)
    shell = PolicyState(cfg, anchors, {}, {})
    return shell.with_flat_params(vec[n_anchor:])


def save_policy(policy: PolicyState, path: str | Path) -> None:
    Path(path).write_bytes(policy_to_bytes(policy))


def load_policy(path: str | Path) -> PolicyState:
    return policy_from_bytes(Path(path).read_bytes())
