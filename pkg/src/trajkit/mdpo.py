"""Metric-decoupled policy objective over expansion groups.

Within one group every metric gets its own softmax over the RL logits and
its own z-scored reward; the group objective sums ``alpha_m * <p_m, rbar_m>``
and the total objective averages groups. Rewards are constants: gradients
flow only into the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajkit.scene_metrics.metrics import SAFETY_METRICS

_RAW_COEFFS = (("nc", 0.5), ("dac", 0.5), ("ddc", 0.3), ("tlc", 0.1), ("ep", 5.0), ("ttc", 5.0), ("lk", 2.0), ("hc", 1.0))
DEFAULT_COEFFS = tuple((m, w / sum(v for _, v in _RAW_COEFFS)) for m, w in _RAW_COEFFS)


@dataclass(frozen=True)
class MdpoConfig:
    metric_coeffs: tuple[tuple[str, float], ...] = DEFAULT_COEFFS
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if any(not (a >= 0 and math.isfinite(a)) for _, a in self.metric_coeffs):
            raise ValueError("metric coefficients must be finite and >= 0")
        if not any(a > 0 for _, a in self.metric_coeffs):
            raise ValueError("at least one metric coefficient must be positive")

    def alpha(self, metrics: Sequence[str]) -> np.ndarray:
        """Coefficient per metric column; metrics without a coefficient weigh 0."""
        coeffs = dict(self.metric_coeffs)
        unknown = set(coeffs) - set(metrics)
        if unknown:
            raise KeyError(f"coefficients for metrics missing from the group: {sorted(unknown)}")
        return np.array([coeffs.get(m, 0.0) for m in metrics], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ExpansionGroup:
    """RL logits and raw rewards for the trajectories of one expansion set."""

    indices: np.ndarray  # (M,)
    logits: np.ndarray  # (M, n_metrics)
    rewards: np.ndarray  # (M, n_metrics)
    metrics: tuple[str, ...] = SAFETY_METRICS

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=np.float64, copy=True)
        rewards = np.array(self.rewards, dtype=np.float64, copy=True)
        indices = np.array(self.indices, dtype=np.int64, copy=True)
        if logits.ndim != 2 or logits.shape != rewards.shape:
            raise ValueError("logits and rewards must share shape (M, n_metrics)")
        if logits.shape[1] != len(self.metrics) or indices.shape != (logits.shape[0],):
            raise ValueError("index set or metric names do not match the score arrays")
        if logits.shape[0] < 1:
            raise ValueError("a group needs at least one trajectory")
        for arr in (logits, rewards, indices):
            arr.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "metrics", tuple(self.metrics))

    def column(self, metric: str) -> int:
        try:
            return self.metrics.index(metric)
        except ValueError:
            raise KeyError(f"unknown metric {metric!r}") from None

    def with_logits(self, logits: np.ndarray) -> "ExpansionGroup":
        return ExpansionGroup(self.indices, logits, self.rewards, self.metrics)


# -- array kernels (leading axes broadcast over groups) ------------------------------


def softmax(logits: np.ndarray, axis: int = -2) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def zscore(rewards: np.ndarray, epsilon: float, axis: int = -2) -> np.ndarray:
    # centring on the first member keeps constant columns exactly zero
    ref = np.take(rewards, [0], axis=axis)
    d = rewards - ref
    centred = d - d.mean(axis=axis, keepdims=True)
    std = np.sqrt(np.mean(centred * centred, axis=axis, keepdims=True))  # population std
    return centred / (std + epsilon)


def objective_array(logits: np.ndarray, rewards: np.ndarray, alpha: np.ndarray, epsilon: float) -> tuple[float, np.ndarray]:
    """Total objective and its gradient for stacked groups ``(K, M, n_metrics)``."""
    p = softmax(logits)
    rbar = zscore(rewards, epsilon)
    K = logits.shape[0]
    per_metric = np.sum(p * rbar, axis=-2)  # (K, n_metrics)
    J = float(np.sum(per_metric * alpha) / K)
    grad = (alpha / K) * p * (rbar - per_metric[:, None, :])
    return J, grad


# -- group API ---------------------------------------------------------------------------


def selection_probabilities(group: ExpansionGroup, metric: str) -> np.ndarray:
    return softmax(group.logits[:, group.column(metric)], axis=0)


def normalize_rewards(group: ExpansionGroup, metric: str, cfg: MdpoConfig | None = None) -> np.ndarray:
    cfg = cfg or MdpoConfig()
    return zscore(group.rewards[:, group.column(metric)], cfg.epsilon, axis=0)


def group_objective(group: ExpansionGroup, cfg: MdpoConfig | None = None) -> float:
    cfg = cfg or MdpoConfig()
    J, _ = objective_array(group.logits[None], group.rewards[None], cfg.alpha(group.metrics), cfg.epsilon)
    return J


def _stack(groups: Sequence[ExpansionGroup]) -> tuple[np.ndarray, np.ndarray]:
    if len(groups) == 0:
        raise ValueError("need at least one expansion group")
    shapes = {g.logits.shape for g in groups}
    if len(shapes) != 1 or len({g.metrics for g in groups}) != 1:
        raise ValueError("groups must share size and metric set")
    return np.stack([g.logits for g in groups]), np.stack([g.rewards for g in groups])


def total_objective(groups: Sequence[ExpansionGroup], cfg: MdpoConfig | None = None) -> float:
    cfg = cfg or MdpoConfig()
    if len(groups) == 0:
        raise ValueError("need at least one expansion group")
    return float(np.mean([group_objective(g, cfg) for g in groups]))


def objective_gradient(groups: Sequence[ExpansionGroup], cfg: MdpoConfig | None = None) -> list[np.ndarray]:
    """``dJ/dlogits`` per group, each ``(M, n_metrics)``."""
    cfg = cfg or MdpoConfig()
    logits, rewards = _stack(groups)
    _, grad = objective_array(logits, rewards, cfg.alpha(groups[0].metrics), cfg.epsilon)
    return list(grad)


def rl_loss(groups: Sequence[ExpansionGroup], cfg: MdpoConfig | None = None) -> float:
    """``-J``; minimizing it maximizes the expected normalized reward."""
    return -total_objective(groups, cfg)


def rl_loss_gradient(groups: Sequence[ExpansionGroup], cfg: MdpoConfig | None = None) -> list[np.ndarray]:
    return [-g for g in objective_gradient(groups, cfg)]
