"""Per-scene loss assembly, gradient descent and evaluation helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from trajkit.mdpo import MdpoConfig
from trajkit.policy import network
from trajkit.policy.features import encode_scene
from trajkit.policy.losses import LossWeights, loss_global, loss_local, region_labels, soft_distance_labels
from trajkit.policy.model import (
    PolicyState,
    expand_candidates,
    plan,
    select_topk,
    stage1_propose,
    stage2_refine,
)
from trajkit.reward_cache import RewardTable
from trajkit.scene_metrics.metrics import METRICS, aggregate_pdms_array, eval_submetrics_array
from trajkit.scene_metrics.world import Scene

LOG_COLUMNS = ("epoch", "L_global", "L_dist", "L_safe", "L_rl", "J", "mean_epdms")


class NumericalFailure(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def build_anchors(experts: np.ndarray, m1: int = 20, seed: int = 0) -> np.ndarray:
    """k-means centroids of expert plans, ordered by endpoint (x, then y)."""
    experts = np.asarray(experts, dtype=np.float64)
    flat = experts.reshape(len(experts), -1)
    if len(flat) < m1:
        raise ValueError(f"need at least {m1} expert trajectories, got {len(flat)}")
    centroids, _ = kmeans2(flat, m1, seed=np.random.default_rng(seed), minit="++")
    cents = centroids.reshape(m1, *experts.shape[1:])
    order = np.lexsort((cents[:, -1, 1], cents[:, -1, 0]))
    return cents[order]


@dataclass(frozen=True, eq=False)
class Sample:
    """One training scene with everything the losses need."""

    scene: Scene
    feats: np.ndarray
    expert: np.ndarray
    table: RewardTable


def make_sample(scene: Scene, table: RewardTable) -> Sample:
    if scene.expert is None:
        raise ValueError(f"scene {scene.scene_id} carries no expert trajectory")
    return Sample(scene, encode_scene(scene), np.asarray(scene.expert), table)


@dataclass(frozen=True, eq=False)
class Frozen:
    """Stop-gradient quantities of one scene's loss, reusable for finite differences."""

    timestep: int
    noise: np.ndarray
    selected: np.ndarray
    expanded: np.ndarray
    d_norm: np.ndarray
    rewards: np.ndarray


@dataclass(frozen=True, eq=False)
class SceneLoss:
    total: float
    parts: dict
    grad: np.ndarray
    frozen: Frozen


def scene_loss(
    policy: PolicyState,
    sample: Sample,
    rng: np.random.Generator | None = None,
    frozen: Frozen | None = None,
    loss_weights: LossWeights | None = None,
    mdpo_cfg: MdpoConfig | None = None,
) -> SceneLoss:
    """``lambda_global * L_global + lambda_local * L_local`` for one scene and its gradient.

    Without ``frozen`` the timestep, noise, selection, expansion, soft labels
    and retrieved rewards are drawn or computed here and returned.
    """
    cfg = policy.config
    lw = loss_weights or LossWeights()
    T2 = 2 * cfg.T
    if frozen is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        timestep = int(rng.integers(1, cfg.schedule.t_trunc + 1))
        noise = rng.standard_normal(policy.anchors.shape)
    else:
        timestep, noise = frozen.timestep, frozen.noise

    props = stage1_propose(policy, sample.feats, cfg.schedule, timestep, noise=noise)
    labels = region_labels(policy.anchors, sample.expert)
    G = loss_global(props.trajectories, props.logits, sample.expert, labels, lw)
    g1 = np.concatenate([G.grad_traj.reshape(len(labels), T2), G.grad_logits[:, None]], axis=1)

    if frozen is None:
        selected = select_topk(props.logits, cfg.k)
        expanded = expand_candidates(props.trajectories[selected], cfg, rng)
    else:
        selected, expanded = frozen.selected, frozen.expanded
    ref = stage2_refine(policy, sample.feats, expanded)
    if not (np.all(np.isfinite(props.trajectories)) and np.all(np.isfinite(ref.trajectories))):
        raise NumericalFailure(f"non-finite trajectories for scene {sample.scene.scene_id}")
    if frozen is None:
        d_norm = soft_distance_labels(ref.trajectories, sample.expert, cfg.beta)
        scores, _ = sample.table.lookup(ref.trajectories)
        cols = [sample.table.metrics.index(m) for m in cfg.metrics]
        rewards = scores[:, cols]
        frozen = Frozen(timestep, noise, selected, expanded, d_norm, rewards)
    Lc = loss_local(ref, sample.expert, frozen.rewards, cfg, lw, mdpo_cfg, d_norm=frozen.d_norm)
    g2 = np.concatenate(
        [np.zeros((len(expanded), T2)), Lc.grad_dist_logit[:, None], Lc.grad_safety_logits, Lc.grad_rl_logits], axis=1
    )
    d1 = network.backward(policy.stage1, props.inputs, props.hidden, lw.lambda_global * g1)
    d2 = network.backward(policy.stage2, ref.inputs, ref.hidden, lw.lambda_local * g2)
    grad = np.concatenate([network.flatten(d1), network.flatten(d2)])
    total = lw.lambda_global * G.value + lw.lambda_local * Lc.value
    parts = {
        "L_global": G.value,
        "L_reg": G.reg,
        "L_cls": G.cls,
        "L_local": Lc.value,
        "L_dist": Lc.dist,
        "L_safe": Lc.safe,
        "L_rl": Lc.rl,
        "J": Lc.J,
    }
    return SceneLoss(total, parts, grad, frozen)


def batch_loss(
    policy: PolicyState,
    samples: Sequence[Sample],
    rng: np.random.Generator | None = None,
    frozen: Sequence[Frozen] | None = None,
    loss_weights: LossWeights | None = None,
    mdpo_cfg: MdpoConfig | None = None,
) -> tuple[float, np.ndarray, list[SceneLoss]]:
    """Mean scene loss over a mini-batch, its gradient and the per-scene records."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = [
        scene_loss(policy, s, rng, None if frozen is None else frozen[i], loss_weights, mdpo_cfg)
        for i, s in enumerate(samples)
    ]
    total = float(np.mean([o.total for o in out]))
    grad = np.mean([o.grad for o in out], axis=0)
    return total, grad, out


# -- optimisation -----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"  # "adam" or "gd"
    schedule: str = "cosine"  # "cosine" or "fixed"
    min_lr_ratio: float = 0.05
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    seed: int = 0
    eval_scenes: int = 40  # scenes planned per epoch for mean_epdms (0 disables)

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if self.optimizer not in ("adam", "gd") or self.schedule not in ("cosine", "fixed"):
            raise ValueError("unknown optimizer or schedule")


@dataclass
class _Adam:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


def mean_epdms(policy: PolicyState, scenes: Sequence[Scene], seed: int = 0) -> float:
    if not scenes:
        return float("nan")
    scores = np.stack([eval_submetrics_array(s, plan(policy, s, seed=seed).waypoints[None])[0] for s in scenes])
    return float(aggregate_pdms_array(scores, version="v2").mean())


@dataclass
class TrainResult:
    policy: PolicyState
    log: list[dict] = field(default_factory=list)


def train(
    policy: PolicyState,
    samples: Sequence[Sample],
    cfg: TrainConfig | None = None,
    log_path: str | Path | None = None,
    loss_weights: LossWeights | None = None,
    mdpo_cfg: MdpoConfig | None = None,
) -> TrainResult:
    """Mini-batch training of both stages; deterministic given ``cfg.seed``.

    Returns a new policy; the input state is left untouched.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training corpus is empty")
    theta = policy.flat_params().copy()
    opt = _Adam(np.zeros_like(theta), np.zeros_like(theta))
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * n_batches)
    eval_set = [s.scene for s in samples[: cfg.eval_scenes]]
    log: list[dict] = []
    step = 0
    current = policy
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(samples))
        sums = {k: 0.0 for k in ("L_global", "L_dist", "L_safe", "L_rl", "J")}
        for b in range(n_batches):
            batch = [samples[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            loss, grad, recs = batch_loss(current, batch, rng, None, loss_weights, mdpo_cfg)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalFailure(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            for r in recs:
                for k in sums:
                    sums[k] += r.parts[k]
            if cfg.grad_clip > 0:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.grad_clip:
                    grad = grad * (cfg.grad_clip / norm)
            lr = cfg.lr
            if cfg.schedule == "cosine":
                frac = step / total_steps
                lr = cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))
            theta = theta - (opt.step(grad, lr) if cfg.optimizer == "adam" else lr * grad)
            current = policy.with_flat_params(theta)
            step += 1
        row = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
        row["mean_epdms"] = mean_epdms(current, eval_set) if eval_set else float("nan")
        log.append(row)
    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(current if cfg.epochs > 0 else policy.copy(), log)


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "epoch" else r[k]) for k in LOG_COLUMNS})


def default_metric_columns() -> tuple[str, ...]:
    return METRICS
