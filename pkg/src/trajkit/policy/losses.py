"""Training losses for both stages with analytic gradients.

Stop-gradient points: the stage-2 candidates (selected and expanded stage-1
outputs), the soft distance labels and the retrieved rewards are all treated
as constants. Consequently the stage-2 refinement offset receives no
gradient from these losses and keeps its initial value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajkit.geometry import distance_array
from trajkit.mdpo import MdpoConfig, objective_array
from trajkit.policy.model import PolicyConfig, Refined, sigmoid


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 8.0
    lambda_cls: float = 10.0
    lambda_dist: float = 10.0
    lambda_safe: float = 1.0
    lambda_rl: float = 1.0
    lambda_global: float = 12.0
    lambda_local: float = 12.0

    def __post_init__(self) -> None:
        for name, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0")


def region_labels(anchors: np.ndarray, expert: np.ndarray) -> np.ndarray:
    """One-hot over anchors: the anchor whose cell (nearest-anchor partition) holds the expert."""
    d = distance_array(np.asarray(anchors), np.asarray(expert)[None])
    y = np.zeros(len(anchors))
    y[int(np.argmin(d))] = 1.0
    return y


def soft_distance_labels(trajs: np.ndarray, expert: np.ndarray, beta: float) -> np.ndarray:
    """Gaussian-kernel proximity to the expert, max-normalized (the nearest gets exactly 1)."""
    diff = np.asarray(trajs) - np.asarray(expert)[None]
    a = -beta * np.sum(diff * diff, axis=(1, 2))
    return np.exp(a - a.max())


def bce_with_logits(z: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Elementwise binary cross-entropy of ``sigmoid(z)`` against ``target``."""
    return np.logaddexp(0.0, z) - target * z


@dataclass(frozen=True, eq=False)
class GlobalLoss:
    value: float
    reg: float
    cls: float
    grad_traj: np.ndarray  # (m1, T, 2)
    grad_logits: np.ndarray  # (m1,)


def loss_global(
    trajectories: np.ndarray, logits: np.ndarray, expert: np.ndarray, labels: np.ndarray, weights: LossWeights | None = None
) -> GlobalLoss:
    """Squared-L2 regression of positive-region proposals plus cross-entropy over anchor logits.

    Without a positive label both terms are 0.
    """
    w = weights or LossWeights()
    labels = np.asarray(labels, dtype=np.float64)
    diff = np.asarray(trajectories) - np.asarray(expert)[None]
    reg = float(np.sum(labels[:, None, None] * diff * diff))
    g_traj = w.lambda_reg * 2.0 * labels[:, None, None] * diff
    total = labels.sum()
    z = np.asarray(logits, dtype=np.float64)
    if total > 0:
        y = labels / total
        logp = z - z.max() - np.log(np.sum(np.exp(z - z.max())))
        cls = float(-np.sum(y * logp))
        g_logits = w.lambda_cls * (np.exp(logp) - y)
    else:
        cls = 0.0
        g_logits = np.zeros_like(z)
    return GlobalLoss(w.lambda_reg * reg + w.lambda_cls * cls, reg, cls, g_traj, g_logits)


@dataclass(frozen=True, eq=False)
class LocalLoss:
    value: float
    dist: float
    safe: float
    rl: float
    J: float
    d_norm: np.ndarray
    grad_dist_logit: np.ndarray  # (M2,)
    grad_safety_logits: np.ndarray  # (M2, n_metrics)
    grad_rl_logits: np.ndarray  # (M2, n_metrics)


def loss_local(
    refined: Refined,
    expert: np.ndarray,
    rewards: np.ndarray,
    cfg: PolicyConfig,
    weights: LossWeights | None = None,
    mdpo_cfg: MdpoConfig | None = None,
    d_norm: np.ndarray | None = None,
) -> LocalLoss:
    """Distance-head BCE, safety-head BCE and the MDPO term over the K expansion groups.

    ``rewards`` holds the retrieved scores of each refined trajectory in
    ``cfg.metrics`` order. ``d_norm`` defaults to the soft labels of the
    refined trajectories.
    """
    w = weights or LossWeights()
    mdpo_cfg = mdpo_cfg or MdpoConfig()
    rewards = np.asarray(rewards, dtype=np.float64)
    if d_norm is None:
        d_norm = soft_distance_labels(refined.trajectories, expert, cfg.beta)
    dist = float(bce_with_logits(refined.dist_logit, d_norm).sum())
    g_dist = w.lambda_dist * (sigmoid(refined.dist_logit) - d_norm)
    safe = float(bce_with_logits(refined.safety_logits, rewards).sum())
    g_safe = w.lambda_safe * (sigmoid(refined.safety_logits) - rewards)

    M2, nm = refined.rl_logits.shape
    K = M2 // cfg.m_sub
    J, gJ = objective_array(
        refined.rl_logits.reshape(K, cfg.m_sub, nm),
        rewards.reshape(K, cfg.m_sub, nm),
        mdpo_cfg.alpha(cfg.metrics),
        mdpo_cfg.epsilon,
    )
    g_rl = -w.lambda_rl * gJ.reshape(M2, nm)
    value = w.lambda_dist * dist + w.lambda_safe * safe + w.lambda_rl * (-J)
    return LocalLoss(value, dist, safe, -J, J, d_norm, g_dist, g_safe, g_rl)
