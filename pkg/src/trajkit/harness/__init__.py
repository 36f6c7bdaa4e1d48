"""Command-line orchestration: corpus, caches, training, evaluation, ablation, benchmarks."""

from trajkit.harness.cli import main
from trajkit.harness.config import ConfigError, RunConfig, config_from_dict, load_config
from trajkit.harness.corpus import MissingArtifact

__all__ = ["ConfigError", "MissingArtifact", "RunConfig", "config_from_dict", "load_config", "main"]
