"""Scene corpus and reward-cache artifacts on disk."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from trajkit.harness.config import RunConfig
from trajkit.reward_cache import (
    AnchorVocabulary,
    RewardTable,
    TableFormatError,
    build_vocabulary,
    load_table,
    precompute_rewards,
    save_table,
)
from trajkit.scene_metrics.generate import generate_scene
from trajkit.scene_metrics.metrics import eval_submetrics_array
from trajkit.scene_metrics.world import Scene, load_scene, save_scene

CORPUS_DIR = "corpus"
CACHE_DIR = "cache"
MANIFEST = "manifest.json"


class MissingArtifact(FileNotFoundError):
    """An input artifact a command depends on is absent or unusable."""


def scene_plan(cfg: RunConfig) -> list[tuple[str, int]]:
    """(kind, seed) pairs: kinds cycle so the corpus splits evenly across them."""
    c = cfg.corpus
    return [(c.kinds[i % len(c.kinds)], c.seed + i // len(c.kinds)) for i in range(c.n_scenes)]


def seed_hash(kind: str, seed: int) -> str:
    return hashlib.sha256(f"{kind}:{seed}".encode()).hexdigest()


def split_ids(entries: list[dict], heldout_fraction: float) -> tuple[list[str], list[str]]:
    """Deterministic train / held-out split: the lowest seed hashes are held out."""
    ranked = sorted(entries, key=lambda e: (e["seed_hash"], e["scene_id"]))
    n_held = max(1, round(heldout_fraction * len(entries))) if len(entries) > 1 else 0
    held = {e["scene_id"] for e in ranked[:n_held]}
    train = [e["scene_id"] for e in entries if e["scene_id"] not in held]
    return train, [e["scene_id"] for e in entries if e["scene_id"] in held]


def gen_corpus(cfg: RunConfig, root: Path) -> dict:
    """Write every scene as JSON plus a manifest of hashes and the split."""
    out = root / CORPUS_DIR
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for kind, seed in scene_plan(cfg):
        scene = generate_scene(kind, seed)
        expert_nc = float(eval_submetrics_array(scene, scene.expert[None])[0, 0])
        if expert_nc != 1.0:
            raise RuntimeError(f"expert collides in {scene.scene_id}")
        digest = save_scene(scene, out / f"{scene.scene_id}.json")
        entries.append(
            {"scene_id": scene.scene_id, "kind": kind, "seed": seed, "sha256": digest, "seed_hash": seed_hash(kind, seed)}
        )
    train, held = split_ids(entries, cfg.corpus.heldout_fraction)
    manifest = {
        "n_scenes": len(entries),
        "corpus_hash": corpus_hash(entries),
        "scenes": entries,
        "split": {"train": train, "heldout": held},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def corpus_hash(entries: list[dict]) -> str:
    h = hashlib.sha256()
    for e in sorted(entries, key=lambda e: e["scene_id"]):
        h.update(f"{e['scene_id']}:{e['sha256']}\n".encode())
    return h.hexdigest()


def load_manifest(root: Path) -> dict:
    path = root / CORPUS_DIR / MANIFEST
    if not path.exists():
        raise MissingArtifact(f"scene corpus manifest not found at {path}; run gen-scenes first")
    return json.loads(path.read_text())


def load_scenes(root: Path, ids: list[str]) -> list[Scene]:
    scenes = []
    for sid in ids:
        path = root / CORPUS_DIR / f"{sid}.json"
        if not path.exists():
            raise MissingArtifact(f"scene file missing: {path}")
        scenes.append(load_scene(path))
    return scenes


def build_caches(cfg: RunConfig, root: Path, manifest: dict) -> dict:
    """Precompute one reward table per scene; returns the cache manifest."""
    vocab = build_vocabulary(cfg.cache.vocab_size)
    out = root / CACHE_DIR
    out.mkdir(parents=True, exist_ok=True)
    ids = [e["scene_id"] for e in manifest["scenes"]]
    hashes = {}
    for scene in load_scenes(root, ids):
        table = precompute_rewards(scene, vocab, workers=cfg.cache.workers)
        path = out / f"{scene.scene_id}.trrc"
        save_table(table, path)
        hashes[scene.scene_id] = hashlib.sha256(path.read_bytes()).hexdigest()
    doc = {"vocab_size": vocab.trajectories.shape[0], "corpus_hash": manifest["corpus_hash"], "tables": hashes}
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


@dataclass(frozen=True, eq=False)
class CacheSet:
    vocab: AnchorVocabulary
    tables: dict[str, RewardTable]


def load_caches(cfg: RunConfig, root: Path, ids: list[str], expected_hash: str | None = None) -> CacheSet:
    """Tables for ``ids``; fails fast when any is absent, corrupt, stale or built for another vocabulary."""
    vocab = build_vocabulary(cfg.cache.vocab_size)
    mpath = root / CACHE_DIR / MANIFEST
    if not mpath.exists():
        raise MissingArtifact(f"reward cache not found at {mpath.parent}; run build-cache first")
    if expected_hash is not None and json.loads(mpath.read_text()).get("corpus_hash") != expected_hash:
        raise MissingArtifact("reward cache was built for a different corpus; rerun build-cache")
    tables = {}
    for sid in ids:
        path = root / CACHE_DIR / f"{sid}.trrc"
        if not path.exists():
            raise MissingArtifact(f"reward table missing: {path}")
        try:
            table = load_table(path)
        except TableFormatError as exc:
            raise MissingArtifact(f"reward table {path} is unreadable ({exc}); rerun build-cache") from exc
        if table.N != vocab.trajectories.shape[0]:
            raise MissingArtifact(f"reward table {path} was built for a different vocabulary size")
        tables[sid] = table
    return CacheSet(vocab, tables)
