"""Two-stage trajectory policy: anchor denoising, expansion, refinement and scoring."""

from trajkit.policy.features import FEATURE_DIM, FEATURE_NAMES, encode_scene
from trajkit.policy.losses import LossWeights, loss_global, loss_local
from trajkit.policy.model import (
    CheckpointError,
    PolicyConfig,
    PolicyState,
    init_policy,
    load_policy,
    plan,
    plan_trace,
    save_policy,
)
from trajkit.policy.train import TrainConfig, build_anchors, make_sample, train

__all__ = [
    "CheckpointError",
    "FEATURE_DIM",
    "FEATURE_NAMES",
    "LossWeights",
    "PolicyConfig",
    "PolicyState",
    "TrainConfig",
    "build_anchors",
    "encode_scene",
    "init_policy",
    "load_policy",
    "loss_global",
    "loss_local",
    "make_sample",
    "plan",
    "plan_trace",
    "save_policy",
    "train",
]
