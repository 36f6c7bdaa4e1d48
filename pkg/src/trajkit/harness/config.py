"""Run configuration: one YAML file with a section per concern."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from trajkit.policy.model import VARIANTS, PolicyConfig
from trajkit.policy.train import TrainConfig
from trajkit.scene_metrics.generate import KIND_ORDER
from trajkit.scene_metrics.metrics import MetricWeights

OUT_ENV = "TRAJKIT_OUT"
DEFAULT_OUT = "trajkit_out"
RESOLVED_NAME = "resolved_config.yaml"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class CorpusSection:
    n_scenes: int = 200
    seed: int = 0
    kinds: tuple[str, ...] = KIND_ORDER
    heldout_fraction: float = 0.2


@dataclass(frozen=True)
class CacheSection:
    vocab_size: int = 1024
    workers: int = 1


@dataclass(frozen=True)
class PolicySection:
    m1: int = 20
    k: int = 2
    variant: str = "polar"
    dist_score: str = "log"
    hidden: int = 64
    gamma_dist: float = 0.6
    gamma_pdms: float = 0.05
    gamma_rl: float = 0.01
    beta: float = 1.0
    init_seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-2
    optimizer: str = "adam"
    schedule: str = "cosine"
    seed: int = 0
    eval_scenes: int = 0


@dataclass(frozen=True)
class EvalSection:
    seed: int = 0
    horizon_steps: int = 16
    blocked_suite: int = 20
    blocked_seed: int = 10_000


@dataclass(frozen=True)
class AblateSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = VARIANTS
    topk: tuple[int, ...] = (2, 20)


@dataclass(frozen=True)
class BenchSection:
    n_queries: int = 1000
    n_scenes: int = 5
    query_sigma: float = 0.5
    repeats: int = 1
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    cache: CacheSection = field(default_factory=CacheSection)
    policy: PolicySection = field(default_factory=PolicySection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    bench: BenchSection = field(default_factory=BenchSection)
    weights: dict = field(default_factory=dict)  # MetricWeights overrides

    def __post_init__(self) -> None:
        c, p = self.corpus, self.policy
        if c.n_scenes < 1 or not 0.0 < c.heldout_fraction < 1.0:
            raise ConfigError("corpus.n_scenes >= 1 and 0 < corpus.heldout_fraction < 1 are required")
        unknown = set(c.kinds) - set(KIND_ORDER)
        if unknown or not c.kinds:
            raise ConfigError(f"corpus.kinds must be a non-empty subset of {KIND_ORDER}")
        if self.cache.vocab_size < 1 or self.cache.workers < 1:
            raise ConfigError("cache.vocab_size and cache.workers must be >= 1")
        if not set(self.ablate.variants) <= set(VARIANTS) or not self.ablate.seeds or not self.ablate.topk:
            raise ConfigError("ablate needs seeds, topk values and variants from " + ", ".join(VARIANTS))
        if any(not 1 <= k <= p.m1 for k in self.ablate.topk):
            raise ConfigError("ablate.topk values must lie in [1, policy.m1]")
        if self.bench.n_queries < 100 or self.bench.n_scenes < 1:
            raise ConfigError("bench.n_queries >= 100 and bench.n_scenes >= 1 are required")
        if self.eval.horizon_steps < 1 or self.eval.blocked_suite < 0:
            raise ConfigError("eval.horizon_steps >= 1 and eval.blocked_suite >= 0 are required")
        try:
            self.policy_config()
            self.train_config()
            self.metric_weights()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def policy_config(self, **overrides) -> PolicyConfig:
        p = replace(self.policy, **overrides)
        doc = asdict(p)
        doc.pop("init_seed")
        return PolicyConfig(**doc)

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**asdict(replace(self.train, **overrides)))

    def metric_weights(self) -> MetricWeights:
        extra = set(self.weights) - set(MetricWeights().to_dict())
        if extra:
            raise KeyError(f"unknown weights entries {sorted(extra)}")
        return MetricWeights.from_dict(self.weights)

    def to_dict(self) -> dict:
        doc = asdict(self)
        return _plain(doc)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {f.name for f in fields(RunConfig)}
_SECTION_TYPES = {
    "corpus": CorpusSection,
    "cache": CacheSection,
    "policy": PolicySection,
    "train": TrainSection,
    "eval": EvalSection,
    "ablate": AblateSection,
    "bench": BenchSection,
}


def _section(cls, doc) -> object:
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    extra = set(doc) - set(known)
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in {cls.__name__}")
    vals = {}
    for k, v in doc.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{k} must be a list")
            v = tuple(v)
        elif isinstance(default, bool) or isinstance(v, bool):
            raise ConfigError(f"{k} has the wrong type")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(v, int):
                raise ConfigError(f"{k} must be an integer")
        elif isinstance(default, float):
            if not isinstance(v, (int, float)):
                raise ConfigError(f"{k} must be a number")
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{k} must be a string")
        vals[k] = v
    return cls(**vals)


def config_from_dict(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    extra = set(doc) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    weights = doc.get("weights") or {}
    if not isinstance(weights, dict):
        raise ConfigError("weights must be a mapping")
    sections = {name: _section(cls, doc.get(name)) for name, cls in _SECTION_TYPES.items()}
    return RunConfig(**sections, weights=weights)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a YAML config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return config_from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / RESOLVED_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def output_root(cli_out: str | None) -> Path:
    """``--out`` wins, then ``$TRAJKIT_OUT``, then ``./trajkit_out``."""
    return Path(cli_out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
