"""Command bodies: each reads the config plus upstream artifacts and writes reports."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trajkit.harness.config import ConfigError, RunConfig, write_resolved
from trajkit.harness.corpus import (
    CACHE_DIR,
    MissingArtifact,
    build_caches,
    gen_corpus,
    load_caches,
    load_manifest,
    load_scenes,
)
from trajkit.harness.reports import bar_svg, histogram_svg, write_csv, write_json, write_sidecar
from trajkit.policy.model import CheckpointError, PolicyState, init_policy, load_policy, plan_trace, save_policy
from trajkit.policy.train import Sample, build_anchors, make_sample, train, write_log
from trajkit.reward_cache import bench_retrieval
from trajkit.scene_metrics.generate import generate_scene
from trajkit.scene_metrics.metrics import METRICS, MetricWeights, aggregate_pdms_array, eval_submetrics_array, hd_score
from trajkit.scene_metrics.rollout import closed_loop_rollout, straight_planner
from trajkit.scene_metrics.world import Scene

CHECKPOINT = "policy.hpol"


def _prepare(cfg: RunConfig, root: Path, sub: str) -> tuple[Path, float]:
    out = root / sub
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    return out, time.time()


# -- corpus and cache ---------------------------------------------------------------------


def cmd_gen_scenes(cfg: RunConfig, root: Path) -> dict:
    out, t0 = _prepare(cfg, root, "corpus")
    manifest = gen_corpus(cfg, root)
    write_sidecar(out, "gen-scenes", t0)
    return manifest


def cmd_build_cache(cfg: RunConfig, root: Path) -> dict:
    manifest = load_manifest(root)
    out, t0 = _prepare(cfg, root, CACHE_DIR)
    doc = build_caches(cfg, root, manifest)
    write_sidecar(out, "build-cache", t0)
    return doc


# -- shared evaluation ---------------------------------------------------------------------


def open_loop_rows(policy: PolicyState, scenes: list[Scene], weights: MetricWeights, seed: int = 0) -> list[dict]:
    """One row per scene: sub-metrics of the planned trajectory plus PDMS (v1) and EPDMS (v2)."""
    if not scenes:
        return []
    trajs = np.stack([plan_trace(policy, s, seed=seed, weights=weights).trajectory.waypoints for s in scenes])
    scores = np.stack([eval_submetrics_array(s, t[None])[0] for s, t in zip(scenes, trajs)])
    pdms = aggregate_pdms_array(scores, weights, "v1")
    epdms = aggregate_pdms_array(scores, weights, "v2")
    rows = []
    for s, sc, p, e in zip(scenes, scores, pdms, epdms):
        rows.append({"scene_id": s.scene_id, "kind": s.kind, **dict(zip(METRICS, map(float, sc))), "pdms": float(p), "epdms": float(e)})
    return rows


def mean_of(rows: list[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows])) if rows else float("nan")


def _samples(root: Path, cfg: RunConfig, ids: list[str], corpus_hash: str) -> list[Sample]:
    if len(ids) < cfg.policy.m1:
        raise ConfigError(f"policy.m1={cfg.policy.m1} anchors need at least that many training scenes, split has {len(ids)}")
    caches = load_caches(cfg, root, ids, corpus_hash)
    return [make_sample(s, caches.tables[s.scene_id]) for s in load_scenes(root, ids)]


@dataclass(frozen=True, eq=False)
class TrainOutcome:
    policy: PolicyState
    log: list[dict]
    initial_epdms: float
    final_epdms: float


def train_policy(cfg: RunConfig, samples: list[Sample], heldout: list[Scene], init_seed: int, train_seed: int, **policy_overrides) -> TrainOutcome:
    pcfg = cfg.policy_config(**policy_overrides)
    weights = cfg.metric_weights()
    anchors = build_anchors(np.stack([s.expert for s in samples]), pcfg.m1, seed=cfg.corpus.seed)
    start = init_policy(anchors, pcfg, seed=init_seed)
    before = mean_of(open_loop_rows(start, heldout, weights, cfg.eval.seed), "epdms")
    res = train(start, samples, cfg.train_config(seed=train_seed))
    after = mean_of(open_loop_rows(res.policy, heldout, weights, cfg.eval.seed), "epdms")
    return TrainOutcome(res.policy, res.log, before, after)


# -- train / eval ------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, root: Path) -> dict:
    manifest = load_manifest(root)
    train_ids, held_ids = manifest["split"]["train"], manifest["split"]["heldout"]
    samples = _samples(root, cfg, train_ids, manifest["corpus_hash"])
    heldout = load_scenes(root, held_ids)
    out, t0 = _prepare(cfg, root, "train")
    o = train_policy(cfg, samples, heldout, cfg.policy.init_seed, cfg.train.seed)
    save_policy(o.policy, out / CHECKPOINT)
    write_log(o.log, out / "train_log.csv")
    summary = {
        "corpus_hash": manifest["corpus_hash"],
        "n_train": len(samples),
        "n_heldout": len(heldout),
        "epochs": cfg.train.epochs,
        "heldout_epdms_initial": o.initial_epdms,
        "heldout_epdms_final": o.final_epdms,
    }
    write_json(out / "train_summary.json", summary)
    write_sidecar(out, "train", t0)
    return summary


def blocked_suite(cfg: RunConfig) -> list[Scene]:
    return [generate_scene("blocked_lane", cfg.eval.blocked_seed + i) for i in range(cfg.eval.blocked_suite)]


def closed_loop_rows(policy: PolicyState, scenes: list[Scene], horizon: int) -> list[dict]:
    """hd_score of the policy and of the keep-lane stub on every scene."""
    rows = []
    for s in scenes:
        row = {"scene_id": s.scene_id}
        for name, planner in (("policy", policy), ("stub", straight_planner)):
            r = closed_loop_rollout(s, planner, horizon)
            row[f"{name}_hd"] = hd_score(r.step_scores, r.route_completion)
            row[f"{name}_rc"] = r.route_completion
            row[f"{name}_collided"] = int(r.collided)
        rows.append(row)
    return rows


OPEN_COLUMNS = ("scene_id", "kind", *METRICS, "pdms", "epdms")
CLOSED_COLUMNS = ("scene_id", "policy_hd", "policy_rc", "policy_collided", "stub_hd", "stub_rc", "stub_collided")


def cmd_eval(cfg: RunConfig, root: Path) -> dict:
    ckpt = root / "train" / CHECKPOINT
    if not ckpt.exists():
        raise MissingArtifact(f"policy checkpoint not found at {ckpt}; run train first")
    try:
        policy = load_policy(ckpt)
    except CheckpointError as exc:
        raise MissingArtifact(f"policy checkpoint {ckpt} is unreadable ({exc}); rerun train") from exc
    manifest = load_manifest(root)
    heldout = load_scenes(root, manifest["split"]["heldout"])
    out, t0 = _prepare(cfg, root, "eval")
    weights = cfg.metric_weights()
    rows = open_loop_rows(policy, heldout, weights, cfg.eval.seed)
    closed = closed_loop_rows(policy, blocked_suite(cfg), cfg.eval.horizon_steps)
    write_csv(out / "open_loop.csv", rows, OPEN_COLUMNS)
    write_csv(out / "closed_loop.csv", closed, CLOSED_COLUMNS)
    summary = {
        "corpus_hash": manifest["corpus_hash"],
        "open_loop": {
            "n_scenes": len(rows),
            **{f"mean_{k}": mean_of(rows, k) for k in (*METRICS, "pdms", "epdms")},
            "ec_note": "ec is fixed at 1 for single plans; only closed-loop replanning scores it",
        },
        "closed_loop": {
            "n_scenes": len(closed),
            "horizon_steps": cfg.eval.horizon_steps,
            **{f"mean_{k}": mean_of(closed, k) for k in CLOSED_COLUMNS[1:]},
        },
    }
    write_json(out / "summary.json", summary)
    histogram_svg(out / "scores.svg", {"PDMS": [r["pdms"] for r in rows], "EPDMS": [r["epdms"] for r in rows]}, "held-out scores", "score")
    write_sidecar(out, "eval", t0)
    return summary


# -- ablation -------------------------------------------------------------------------------


RUN_COLUMNS = ("variant", "k", "seed", "corpus_hash", "epdms_initial", "epdms_final")
CELL_COLUMNS = ("rank", "variant", "k", "n_seeds", "mean_epdms", "min_epdms", "max_epdms", "range_epdms")


def ablation_cells(runs: list[dict]) -> list[dict]:
    """Per (variant, K) mean and min/max over seeds, ranked by mean (ties by name)."""
    keys = sorted({(r["variant"], r["k"]) for r in runs})
    cells = []
    for v, k in keys:
        vals = [r["epdms_final"] for r in runs if r["variant"] == v and r["k"] == k]
        cells.append(
            {
                "variant": v,
                "k": k,
                "n_seeds": len(vals),
                "mean_epdms": float(np.mean(vals)),
                "min_epdms": float(min(vals)),
                "max_epdms": float(max(vals)),
                "range_epdms": float(max(vals) - min(vals)),
            }
        )
    cells.sort(key=lambda c: (-c["mean_epdms"], c["variant"], c["k"]))
    for i, c in enumerate(cells, 1):
        c["rank"] = i
    return cells


def separated(a: dict, b: dict) -> bool:
    """``a`` beats ``b`` by more than either cell's cross-seed range."""
    return a["mean_epdms"] - b["mean_epdms"] > max(a["range_epdms"], b["range_epdms"])


def ordering_checks(cells: list[dict], k_small: int, k_large: int) -> dict:
    by = {(c["variant"], c["k"]): c for c in cells}
    checks = {}
    pairs = [("polar", "xy"), ("xy", "gaussian")]
    for a, b in pairs:
        if (a, k_small) in by and (b, k_small) in by:
            checks[f"{a}>{b}@k={k_small}"] = separated(by[(a, k_small)], by[(b, k_small)])
    if ("polar", k_small) in by and ("polar", k_large) in by:
        checks[f"k={k_small}>k={k_large}@polar"] = separated(by[("polar", k_small)], by[("polar", k_large)])
    return checks


def cmd_ablate(cfg: RunConfig, root: Path) -> dict:
    manifest = load_manifest(root)
    samples = _samples(root, cfg, manifest["split"]["train"], manifest["corpus_hash"])
    heldout = load_scenes(root, manifest["split"]["heldout"])
    out, t0 = _prepare(cfg, root, "ablate")
    runs = []
    for variant in cfg.ablate.variants:
        for k in cfg.ablate.topk:
            for seed in cfg.ablate.seeds:
                o = train_policy(cfg, samples, heldout, seed, seed, variant=variant, k=k)
                runs.append(
                    {
                        "variant": variant,
                        "k": k,
                        "seed": seed,
                        "corpus_hash": manifest["corpus_hash"],
                        "epdms_initial": o.initial_epdms,
                        "epdms_final": o.final_epdms,
                    }
                )
    cells = ablation_cells(runs)
    ks = sorted(cfg.ablate.topk)
    checks = ordering_checks(cells, ks[0], ks[-1])
    write_csv(out / "runs.csv", runs, RUN_COLUMNS)
    write_csv(out / "table.csv", cells, CELL_COLUMNS)
    summary = {
        "corpus_hash": manifest["corpus_hash"],
        "n_heldout": len(heldout),
        "cells": cells,
        "orderings": checks,
        "top_cell": {"variant": cells[0]["variant"], "k": cells[0]["k"]},
    }
    write_json(out / "summary.json", summary)
    bar_svg(
        out / "ablation.svg",
        [f"{c['variant']} K={c['k']}" for c in cells],
        [c["mean_epdms"] for c in cells],
        [c["min_epdms"] for c in cells],
        [c["max_epdms"] for c in cells],
        "expansion variant and top-K",
    )
    write_sidecar(out, "ablate", t0)
    return summary


# -- retrieval benchmark -------------------------------------------------------------------------


BENCH_COLUMNS = ("scene_id", "n_queries", "retrieval_latency_s", "oracle_latency_s", "speedup")


def bench_queries(vocab_trajs: np.ndarray, n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Vocabulary entries with Gaussian waypoint jitter, so most queries miss the grid."""
    base = vocab_trajs[rng.integers(0, len(vocab_trajs), n)]
    return base + sigma * rng.standard_normal(base.shape)


def cmd_bench_retrieval(cfg: RunConfig, root: Path) -> dict:
    manifest = load_manifest(root)
    ids = sorted(e["scene_id"] for e in manifest["scenes"])[: cfg.bench.n_scenes]
    caches = load_caches(cfg, root, ids, manifest["corpus_hash"])
    out, t0 = _prepare(cfg, root, "bench")
    rng = np.random.default_rng(cfg.bench.seed)
    rows = []
    for scene in load_scenes(root, ids):
        q = bench_queries(caches.vocab.trajectories, cfg.bench.n_queries, cfg.bench.query_sigma, rng)
        r = bench_retrieval(scene, caches.tables[scene.scene_id], caches.vocab, q, cfg.bench.repeats)
        rows.append({"scene_id": scene.scene_id, **r.to_dict()})
    mean_r = mean_of(rows, "retrieval_latency_s")
    mean_o = mean_of(rows, "oracle_latency_s")
    summary = {
        "n_scenes": len(rows),
        "n_queries_total": int(sum(r["n_queries"] for r in rows)),
        "mean_retrieval_latency_s": mean_r,
        "mean_oracle_latency_s": mean_o,
        "aggregate_speedup": mean_o / mean_r,
    }
    write_csv(out / "per_scene.csv", rows, BENCH_COLUMNS)
    write_json(out / "summary.json", summary)
    write_sidecar(out, "bench-retrieval", t0)
    return summary


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "build-cache": cmd_build_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench-retrieval": cmd_bench_retrieval,
}
