"""Synthetic driving scenes and the sub-metric reward oracle."""

from trajkit.scene_metrics.generate import expert_plan, generate_scene
from trajkit.scene_metrics.metrics import (
    METRICS,
    PENALTY_METRICS,
    SAFETY_METRICS,
    MetricWeights,
    SubMetricScores,
    aggregate_pdms,
    aggregate_pdms_array,
    eval_submetrics,
    eval_submetrics_array,
    hd_score,
)
from trajkit.scene_metrics.world import (
    Agent,
    Centerline,
    DrivableGrid,
    OutsideWindowError,
    ScenarioKind,
    Scene,
    TrafficSignal,
    load_scene,
    save_scene,
)

__all__ = [
    "Agent",
    "Centerline",
    "DrivableGrid",
    "METRICS",
    "MetricWeights",
    "OutsideWindowError",
    "PENALTY_METRICS",
    "SAFETY_METRICS",
    "ScenarioKind",
    "Scene",
    "SubMetricScores",
    "TrafficSignal",
    "aggregate_pdms",
    "aggregate_pdms_array",
    "eval_submetrics",
    "eval_submetrics_array",
    "expert_plan",
    "generate_scene",
    "hd_score",
    "load_scene",
    "save_scene",
]
