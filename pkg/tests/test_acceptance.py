"""Acceptance suite: one printed PASS/FAIL line per criterion, tolerances pinned here.

Criteria 8 and 9 run the real harness on the default 200-scene corpus and
take roughly a quarter of an hour together on one core.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from trajkit.geometry import (
    ExpansionConfig,
    PolarTrajectory,
    Trajectory,
    from_polar,
    perturb_gaussian,
    polar_expand_array,
    second_difference_magnitude,
    to_polar,
    turning_angles,
)
from trajkit.harness import RunConfig
from trajkit.harness.commands import cmd_ablate, cmd_build_cache, cmd_eval, cmd_gen_scenes, cmd_train
from trajkit.mdpo import ExpansionGroup, group_objective, normalize_rewards, objective_gradient, selection_probabilities
from trajkit.policy import PolicyConfig, build_anchors, init_policy, make_sample
from trajkit.policy.train import batch_loss
from trajkit.reward_cache import bench_retrieval, build_vocabulary, linear_scan, precompute_rewards, retrieval_error_report
from trajkit.scene_metrics import METRICS, SAFETY_METRICS, SubMetricScores, aggregate_pdms, aggregate_pdms_array, hd_score
from trajkit.scene_metrics.generate import KIND_ORDER, generate_scene

# pinned tolerances and limits
GEOM_TOL = 1e-9
MDPO_FD_TOL = 1e-6
MDPO_SUM_TOL = 1e-10
SHIFT_TOL = 1e-12
LOSS_FD_RTOL = 1e-5
MIN_SPEEDUP = 10.0
SIGNIFICANCE = 1e-6


_PENDING: list[str] = []


@pytest.fixture(autouse=True)
def _publish(acceptance_lines):
    yield
    acceptance_lines.extend(_PENDING)
    _PENDING.clear()


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    _PENDING.append(line)
    print("\n" + line, flush=True)


def random_paths(rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth-ish random 8-waypoint paths with non-degenerate steps."""
    heading = np.cumsum(rng.normal(0.0, 0.3, (n, 8)), axis=1) + rng.uniform(-np.pi, np.pi, (n, 1))
    step = rng.uniform(0.5, 8.0, (n, 8))
    return np.cumsum(np.stack([step * np.cos(heading), step * np.sin(heading)], axis=-1), axis=1)


def wrapped(a: np.ndarray) -> np.ndarray:
    return np.angle(np.exp(1j * a))


# -- 1 ---------------------------------------------------------------------------------------


def test_geometry_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    paths = random_paths(rng, 1000)
    cfg = ExpansionConfig()
    ident = ExpansionConfig((1.0,), (0.0,))
    identity_ok = all(np.array_equal(polar_expand_array(p, ident)[0], p) for p in paths[:100])
    out = polar_expand_array(paths, cfg)  # (1000, 25, 8, 2)
    lam = np.repeat(cfg.radial_coeffs, cfg.n_exp)[None, :, None, None]
    src_d = np.linalg.norm(paths[:, :, None] - paths[:, None], axis=-1)[:, None]
    got_d = np.linalg.norm(out[:, :, :, None] - out[:, :, None], axis=-1)
    dist_err = float(np.max(np.abs(got_d - lam * src_d)))
    ang_err = float(np.max(np.abs(wrapped(turning_angles(out) - turning_angles(paths)[:, None]))))
    rt_err = max(float(np.max(np.abs(from_polar(to_polar(Trajectory(p))).waypoints - p))) for p in paths)
    elapsed = time.perf_counter() - t0
    ok = identity_ok and dist_err < GEOM_TOL and ang_err < GEOM_TOL and rt_err < GEOM_TOL and elapsed < 5.0
    report(1, ok, f"identity exact={identity_ok}, distance err {dist_err:.2e}, angle err {ang_err:.2e}, round trip {rt_err:.2e} m, {elapsed:.2f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------------


def test_expansion_quality_separation():
    t0 = time.perf_counter()
    sources = np.stack([generate_scene(k, s).expert for s in range(2) for k in KIND_ORDER])  # 10 expert plans
    deltas = []
    for i in range(1000):
        src = Trajectory(sources[i % len(sources)])
        noisy = perturb_gaussian(src, 0.5, seed=i).waypoints
        deltas.append(second_difference_magnitude(noisy) - second_difference_magnitude(src.waypoints))
    deltas = np.array(deltas)
    t = stats.ttest_1samp(deltas, 0.0, alternative="greater")
    polar = polar_expand_array(sources, ExpansionConfig())
    ang_err = float(np.max(np.abs(wrapped(turning_angles(polar) - turning_angles(sources)[:, None]))))
    elapsed = time.perf_counter() - t0
    ok = t.pvalue < SIGNIFICANCE and deltas.mean() > 0 and ang_err < GEOM_TOL and elapsed < 10.0
    report(2, ok, f"gaussian raises 2nd-difference by {deltas.mean():.3f} m (p={t.pvalue:.1e}), polar angle err {ang_err:.1e}, {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------------------


def test_mdpo_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    M, NM, h = 25, len(SAFETY_METRICS), 1e-5
    fd_err = sum_err = soft_err = z_err = 0.0
    for _ in range(50):
        g = ExpansionGroup(np.arange(M), rng.normal(0, 3, (M, NM)), rng.uniform(size=(M, NM)))
        grad = objective_gradient([g])[0]
        num = np.zeros_like(grad)
        for idx in np.ndindex(M, NM):
            zp, zm = g.logits.copy(), g.logits.copy()
            zp[idx] += h
            zm[idx] -= h
            num[idx] = (group_objective(g.with_logits(zp)) - group_objective(g.with_logits(zm))) / (2 * h)
        fd_err = max(fd_err, float(np.max(np.abs(num - grad))))
        sum_err = max(sum_err, float(np.max(np.abs(grad.sum(axis=0)))))
        c = rng.normal(0, 10)
        shifted_logits = g.with_logits(g.logits + c)
        shifted_rewards = ExpansionGroup(g.indices, g.logits, g.rewards + c)
        for m in SAFETY_METRICS:
            soft_err = max(soft_err, float(np.max(np.abs(selection_probabilities(g, m) - selection_probabilities(shifted_logits, m)))))
            z_err = max(z_err, float(np.max(np.abs(normalize_rewards(g, m) - normalize_rewards(shifted_rewards, m)))))
    levels = rng.uniform(size=NM)
    degenerate = ExpansionGroup(np.arange(M), rng.normal(0, 3, (M, NM)), np.tile(levels, (M, 1)))
    J0 = group_objective(degenerate)
    elapsed = time.perf_counter() - t0
    ok = fd_err < MDPO_FD_TOL and sum_err < MDPO_SUM_TOL and soft_err < SHIFT_TOL and z_err < SHIFT_TOL and J0 == 0.0 and elapsed < 5.0
    report(3, ok, f"FD err {fd_err:.1e}, gradient sums {sum_err:.1e}, shift errs {soft_err:.1e}/{z_err:.1e}, degenerate J={J0}, {elapsed:.2f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------------------


def test_retrieval_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    vocab = build_vocabulary(1024)
    scenes = [generate_scene(k, 0) for k in KIND_ORDER]
    tables = [precompute_rewards(s, vocab) for s in scenes]
    base = vocab.trajectories[rng.integers(0, len(vocab), 500)]
    q = base + rng.normal(size=base.shape) * rng.uniform(0.01, 5.0, (500, 1, 1))
    idx, _ = tables[0].nearest(q)
    scan = np.array([linear_scan(vocab.trajectories, x) for x in q])
    match = float(np.mean(idx == scan))
    own_idx, own_d = tables[0].nearest(vocab.trajectories)
    own_ok = bool(np.array_equal(own_idx, np.arange(1024)) and np.all(own_d == 0.0))
    own_ok &= all(np.array_equal(t.lookup(vocab.trajectories)[0], t.scores) for t in tables)
    disagree = 0.0
    for s, t in zip(scenes, tables):
        jq = vocab.trajectories + rng.normal(scale=1e-6, size=vocab.trajectories.shape)
        rep = retrieval_error_report(s, t, vocab, list(jq))
        disagree = max(disagree, *(rep["disagreement"][m] for m in ("nc", "dac", "ddc", "tlc")))
    elapsed = time.perf_counter() - t0
    ok = match == 1.0 and own_ok and disagree == 0.0 and elapsed < 30.0
    report(4, ok, f"index==scan on {match:.1%} of 500, own rows exact={own_ok}, jitter penalty disagreement {disagree}, {elapsed:.2f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------------


def test_retrieval_speedup():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    vocab = build_vocabulary(1024)
    scene = generate_scene("intersection", 0)
    table = precompute_rewards(scene, vocab)
    base = vocab.trajectories[rng.integers(0, len(vocab), 1000)]
    q = base + rng.normal(scale=0.5, size=base.shape)
    res = bench_retrieval(scene, table, vocab, list(q))
    elapsed = time.perf_counter() - t0
    ok = res.n_queries >= 1000 and res.speedup >= MIN_SPEEDUP and elapsed < 120.0
    report(5, ok, f"{res.speedup:.1f}x over {res.n_queries} queries ({res.oracle_latency * 1e3:.3f} ms vs {res.retrieval_latency * 1e3:.3f} ms), {elapsed:.2f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------------------------


def test_aggregation_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    base = rng.uniform(size=(10_000, len(METRICS)))
    base[rng.uniform(size=base.shape) < 0.1] = 1.0
    col = rng.integers(0, len(METRICS), 10_000)
    up = base.copy()
    rows = np.arange(10_000)
    up[rows, col] = np.maximum(base[rows, col], rng.uniform(size=10_000))
    mono = all(bool(np.all(aggregate_pdms_array(up, version=v) >= aggregate_pdms_array(base, version=v))) for v in ("v1", "v2"))
    zeroed = base.copy()
    zeroed[:, METRICS.index("nc")] = 0.0
    annihilate = bool(np.all(aggregate_pdms_array(zeroed, version="v1") == 0.0) and np.all(aggregate_pdms_array(zeroed, version="v2") == 0.0))
    ones = SubMetricScores(*([1.0] * len(METRICS)))
    example_err = abs(aggregate_pdms(ones.replace(ep=0.8), version="v1") - 11 / 12)
    steps = base[:12]
    full = hd_score(steps, 1.0)
    linear = all(hd_score(steps, rc) == full * rc for rc in (0.0, 0.25, 0.5, 0.9, 1.0))
    elapsed = time.perf_counter() - t0
    ok = mono and annihilate and example_err < 1e-12 and linear
    report(6, ok, f"monotone over 10^4={mono}, annihilation exact={annihilate}, 11/12 err {example_err:.1e}, hd linear={linear}, {elapsed:.2f}s")
    assert ok


# -- 7 ---------------------------------------------------------------------------------------


def test_loss_stack_gradient():
    t0 = time.perf_counter()
    vocab = build_vocabulary(1024)
    scenes = [generate_scene(k, s) for s in range(4) for k in KIND_ORDER]
    samples = [make_sample(s, precompute_rewards(s, vocab)) for s in scenes[:2]]
    anchors = build_anchors(np.stack([s.expert for s in scenes]), 20, seed=0)
    pol = init_policy(anchors, PolicyConfig(), seed=3, zero_output=False)
    for p in (pol.stage1, pol.stage2):
        for k in ("A", "V", "c"):
            p[k] *= 0.05
    _, grad, recs = batch_loss(pol, samples, np.random.default_rng(1))
    frozen = [r.frozen for r in recs]
    rl_active = all(abs(r.parts["L_rl"]) > 0 for r in recs)
    theta = pol.flat_params()
    idx = np.random.default_rng(7).choice(theta.size, 300, replace=False)
    h = 1e-5
    num = np.empty(len(idx))
    for n, i in enumerate(idx):
        e = np.zeros_like(theta)
        e[i] = h
        lp = batch_loss(pol.with_flat_params(theta + e), samples, None, frozen)[0]
        lm = batch_loss(pol.with_flat_params(theta - e), samples, None, frozen)[0]
        num[n] = (lp - lm) / (2 * h)
    ana = grad[idx]
    rel_norm = float(np.linalg.norm(num - ana) / np.linalg.norm(ana))
    rel_max = float(np.max(np.abs(num - ana)) / np.max(np.abs(ana)))
    elapsed = time.perf_counter() - t0
    ok = rl_active and rel_norm < LOSS_FD_RTOL and rel_max < LOSS_FD_RTOL and elapsed < 30.0
    report(7, ok, f"relative error {rel_norm:.1e} (norm) / {rel_max:.1e} (max) over 300 params, L_rl active={rl_active}, {elapsed:.2f}s")
    assert ok


# -- 8 and 9: the default 200-scene corpus through the harness ----------------------------------


@pytest.fixture(scope="module")
def corpus_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = RunConfig()
    t0 = time.perf_counter()
    cmd_gen_scenes(cfg, root)
    cmd_build_cache(cfg, root)
    return root, time.perf_counter() - t0


def test_directional_ablation(corpus_root):
    root, setup_s = corpus_root
    t0 = time.perf_counter()
    summary = cmd_ablate(RunConfig(), root)
    elapsed = time.perf_counter() - t0 + setup_s
    cells = ", ".join(f"{c['variant']}/K={c['k']} {c['mean_epdms']:.4f}±{c['range_epdms'] / 2:.4f}" for c in summary["cells"])
    orders = summary["orderings"]
    ok = len(orders) == 3 and all(orders.values()) and elapsed < 30 * 60
    report(8, ok, f"orderings {orders}; cells {cells}; {elapsed / 60:.1f} min")
    assert ok


def test_end_to_end_sanity(corpus_root):
    root, setup_s = corpus_root
    t0 = time.perf_counter()
    cfg = RunConfig()
    train = cmd_train(cfg, root)
    ev = cmd_eval(cfg, root)
    elapsed = time.perf_counter() - t0 + setup_s
    before, after = train["heldout_epdms_initial"], train["heldout_epdms_final"]
    pol_hd, stub_hd = ev["closed_loop"]["mean_policy_hd"], ev["closed_loop"]["mean_stub_hd"]
    ok = after > before and pol_hd > stub_hd and elapsed < 10 * 60
    report(9, ok, f"held-out EPDMS {before:.4f} -> {after:.4f}; closed-loop hd policy {pol_hd:.4f} vs stub {stub_hd:.4f}; {elapsed / 60:.1f} min")
    assert ok
