from __future__ import annotations

import decimal
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajkit.geometry import ExpansionConfig, polar_expand_array
from trajkit.policy import (
    FEATURE_DIM,
    FEATURE_NAMES,
    CheckpointError,
    LossWeights,
    PolicyConfig,
    TrainConfig,
    build_anchors,
    encode_scene,
    init_policy,
    load_policy,
    loss_global,
    loss_local,
    make_sample,
    plan,
    plan_trace,
    save_policy,
    train,
)
from trajkit.policy import network
from trajkit.policy.losses import bce_with_logits, region_labels, soft_distance_labels
from trajkit.policy.model import (
    Refined,
    ensemble_scores,
    expand_candidates,
    fuse_trajectories,
    metric_ensemble,
    policy_from_bytes,
    policy_to_bytes,
    select_topk,
    stage1_propose,
    stage2_refine,
)
from trajkit.policy.train import batch_loss, scene_loss
from trajkit.scene_metrics import SAFETY_METRICS, MetricWeights
from trajkit.scene_metrics.generate import straight_road_scene

NM = len(SAFETY_METRICS)


@pytest.fixture(scope="module")
def samples(small_corpus, small_tables):
    return [make_sample(s, t) for s, t in zip(small_corpus, small_tables)]


@pytest.fixture(scope="module")
def anchors(samples):
    return build_anchors(np.stack([s.expert for s in samples]), 4, seed=0)


def small_cfg(**kw) -> PolicyConfig:
    return PolicyConfig(**{"m1": 4, "k": 2, "hidden": 16, **kw})


def live_policy(anchors, seed=3, **kw):
    """Random non-zero output maps, scaled down so plans stay sane."""
    pol = init_policy(anchors, small_cfg(**kw), seed=seed, zero_output=False)
    for p in (pol.stage1, pol.stage2):
        for k in ("A", "V", "c"):
            p[k] *= 0.05
    return pol


def refined_from(trajs, dist=0.0, safety=0.0, rl=0.0) -> Refined:
    M = len(trajs)
    return Refined(np.asarray(trajs, float), np.full(M, dist), np.full((M, NM), safety), np.full((M, NM), rl), None, None)


# -- features -------------------------------------------------------------------------------


def test_feature_layout(small_corpus):
    assert len(FEATURE_NAMES) == FEATURE_DIM == len(set(FEATURE_NAMES))
    for scene in small_corpus:
        f = encode_scene(scene)
        assert f.shape == (FEATURE_DIM,) and np.all(np.isfinite(f))
        assert np.all(np.abs(f) <= 5.0)


def test_empty_scene_features():
    f = dict(zip(FEATURE_NAMES, encode_scene(straight_road_scene(8.0))))
    assert f["ego_speed"] == pytest.approx(0.8)
    assert f["red_light"] == 0.0 and f["stop_line_dist"] == 1.0
    assert f["agent0_present"] == 0.0 and f["agent0_x"] == 1.0
    assert f["lead_gap"] == 1.0 and f["lead_closing"] == 0.0
    assert all(abs(f[f"center_lat_{d}m"]) < 1e-9 for d in (10, 20, 30, 40))


# -- network ----------------------------------------------------------------------------------


def test_network_zero_output_and_flatten(rng):
    shape = network.LayerShape(5, 7, 3)
    p = network.init_params(shape, rng)
    u = rng.normal(size=(4, 5))
    y, h = network.forward(p, u)
    assert np.all(y == 0.0) and np.any(h != 0.0)
    vec = network.flatten(p)
    assert vec.size == shape.size == 7 * 5 + 7 + 3 * 7 + 3 * 5 + 3
    back = network.unflatten(vec, shape)
    assert all(np.array_equal(back[k], p[k]) for k in network.PARAM_ORDER)


def test_network_backward_matches_differences(rng):
    shape = network.LayerShape(6, 5, 4)
    p = network.init_params(shape, rng, zero_output=False)
    u = rng.normal(size=(3, 6))
    R = rng.normal(size=(3, 4))
    y, h = network.forward(p, u)
    grads = network.flatten(network.backward(p, u, h, R))
    vec = network.flatten(p)
    eps = 1e-6
    num = np.zeros_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = eps
        fp = np.sum(network.forward(network.unflatten(vec + e, shape), u)[0] * R)
        fm = np.sum(network.forward(network.unflatten(vec - e, shape), u)[0] * R)
        num[i] = (fp - fm) / (2 * eps)
    np.testing.assert_allclose(grads, num, rtol=1e-6, atol=1e-8)


# -- stage 1 ----------------------------------------------------------------------------------


def test_zero_stage1_returns_scaled_anchor(anchors):
    pol = init_policy(anchors, small_cfg())
    ab = pol.config.schedule.at(5)
    props = stage1_propose(pol, np.zeros(FEATURE_DIM), i=5, noise=np.zeros(anchors.shape))
    np.testing.assert_allclose(props.trajectories, math.sqrt(ab) * anchors, rtol=1e-15)
    assert np.all(props.logits == 0.0) and len(props) == 4


def test_stage1_is_noise_deterministic(anchors):
    pol = live_policy(anchors)
    f = np.ones(FEATURE_DIM)
    a, b = stage1_propose(pol, f, seed=4), stage1_propose(pol, f, seed=4)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert not np.array_equal(a.trajectories, stage1_propose(pol, f, seed=5).trajectories)


def test_select_topk_examples():
    z = np.array([0.1, 0.5, 0.5, -1.0])
    assert select_topk(z, 2).tolist() == [1, 2]
    assert select_topk(z, 3).tolist() == [1, 2, 0]
    assert select_topk(z, 4).tolist() == [1, 2, 0, 3]
    with pytest.raises(ValueError):
        select_topk(z, 0)
    with pytest.raises(ValueError):
        select_topk(z, 5)


@given(arrays(np.float64, 12, elements=st.floats(-5, 5)), st.integers(1, 12))
def test_topk_picks_largest(z, k):
    sel = select_topk(z, k)
    assert len(set(sel.tolist())) == k
    rest = np.setdiff1d(np.arange(12), sel)
    assert rest.size == 0 or z[sel].min() >= z[rest].max()
    assert np.all(np.diff(z[sel]) <= 0)


def test_expand_candidates_variants(rng):
    trajs = rng.normal(size=(2, 8, 2)) * 5
    out = expand_candidates(trajs, small_cfg())
    assert out.shape == (50, 8, 2)
    np.testing.assert_array_equal(out.reshape(2, 25, 8, 2), polar_expand_array(trajs, ExpansionConfig()))
    assert expand_candidates(trajs, small_cfg(variant="xy")).shape == (50, 8, 2)
    g1 = expand_candidates(trajs, small_cfg(variant="gaussian"), np.random.default_rng(1))
    g2 = expand_candidates(trajs, small_cfg(variant="gaussian"), np.random.default_rng(1))
    assert np.array_equal(g1, g2) and not np.array_equal(g1[:25], np.repeat(trajs[:1], 25, axis=0))


# -- stage 2 and scoring ------------------------------------------------------------------------


def test_zero_stage2_passes_candidates_through(anchors, rng):
    pol = init_policy(anchors, small_cfg())
    cands = rng.normal(size=(50, 8, 2))
    ref = stage2_refine(pol, np.zeros(FEATURE_DIM), cands)
    assert np.array_equal(ref.trajectories, cands)
    assert np.all(ref.dist_score == 0.5) and np.all(ref.safety_scores == 0.5) and np.all(ref.rl_scores == 0.5)


def test_metric_ensemble_hand_arithmetic():
    probs = np.ones(NM)
    probs[SAFETY_METRICS.index("nc")] = 0.9
    probs[SAFETY_METRICS.index("ep")] = 0.8
    got = metric_ensemble(probs[None], SAFETY_METRICS, MetricWeights())[0]
    want = 0.5 * math.log(0.9) + 6.0 * math.log((5 * 0.8 + 5 + 2 + 1) / 13)
    assert got == pytest.approx(want, abs=1e-14)
    assert metric_ensemble(np.ones((1, NM)), SAFETY_METRICS, MetricWeights())[0] == 0.0


def test_metric_ensemble_floors_zero_probabilities():
    probs = np.zeros((1, NM))
    assert np.isfinite(metric_ensemble(probs, SAFETY_METRICS, MetricWeights())[0])


def test_ensemble_scores_modes():
    r = refined_from(np.zeros((3, 8, 2)), dist=np.log(3.0))  # sigmoid = 0.75
    cfg_log, cfg_prob = small_cfg(), small_cfg(dist_score="prob")
    base = 0.05 * metric_ensemble(r.safety_scores, SAFETY_METRICS, MetricWeights())
    base = base + 0.01 * metric_ensemble(r.rl_scores, SAFETY_METRICS, MetricWeights())
    np.testing.assert_allclose(ensemble_scores(r, None, cfg_log), 0.6 * math.log(0.75) + base, rtol=1e-14)
    np.testing.assert_allclose(ensemble_scores(r, None, cfg_prob), 0.6 * 0.75 + base, rtol=1e-14)


def test_fuse_examples(rng):
    trajs = rng.normal(size=(3, 8, 2))
    np.testing.assert_allclose(fuse_trajectories(trajs, np.zeros(3)).waypoints, trajs.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(fuse_trajectories(trajs, [0.0, 800.0, 0.0]).waypoints, trajs[1], atol=1e-15)
    with pytest.raises(ValueError):
        fuse_trajectories(trajs, np.zeros(2))


@given(arrays(np.float64, (6, 8, 2), elements=st.floats(-50, 50)), arrays(np.float64, 6, elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_fuse_is_convex_and_shift_invariant(trajs, scores, c):
    out = fuse_trajectories(trajs, scores).waypoints
    assert np.all(out >= trajs.min(axis=0) - 1e-9) and np.all(out <= trajs.max(axis=0) + 1e-9)
    np.testing.assert_allclose(fuse_trajectories(trajs, scores + c).waypoints, out, atol=1e-9)


def test_plan_is_deterministic_per_seed(anchors, small_corpus):
    pol = live_policy(anchors)
    scene = small_corpus[4]
    a, b = plan(pol, scene, seed=2), plan(pol, scene, seed=2)
    assert a.equals(b)
    tr = plan_trace(pol, scene, seed=2)
    assert tr.trajectory.equals(a) and tr.expanded.shape == (50, 8, 2) and len(tr.selected) == 2
    assert not plan(pol, scene, seed=3).equals(a)


# -- losses ---------------------------------------------------------------------------------


def test_region_labels_one_hot_nearest():
    anchors = np.stack([np.full((8, 2), v) for v in (0.0, 2.0, 5.0)])
    y = region_labels(anchors, np.full((8, 2), 2.4))
    assert y.tolist() == [0.0, 1.0, 0.0]


def test_soft_labels_normalised(rng):
    trajs = rng.normal(size=(10, 8, 2))
    expert = rng.normal(size=(8, 2))
    d = soft_distance_labels(trajs, expert, 1.0)
    assert d.max() == 1.0 and np.all(d >= 0.0)
    nearest = np.argmin(np.sum((trajs - expert) ** 2, axis=(1, 2)))
    assert d[nearest] == 1.0
    ratio = soft_distance_labels(trajs[:2], trajs[0], 0.5)
    assert ratio[1] == pytest.approx(math.exp(-0.5 * np.sum((trajs[1] - trajs[0]) ** 2)))


@given(st.floats(-700, 700), st.floats(0, 1))
def test_bce_with_logits_matches_direct_form(z, t):
    got = float(bce_with_logits(np.array(z), np.array(t)))
    assert got >= -1e-12
    with decimal.localcontext() as ctx:  # 1 - p formed directly, never by cancellation
        ctx.prec = 50
        zd, td = decimal.Decimal(z), decimal.Decimal(t)
        p, q = 1 / (1 + (-zd).exp()), 1 / (1 + zd.exp())
        want = -(td * p.ln() + (1 - td) * q.ln())
    assert got == pytest.approx(float(want), rel=1e-12, abs=1e-12)


def test_global_loss_examples():
    trajs = np.stack([np.zeros((8, 2)), np.ones((8, 2))])
    expert = np.ones((8, 2))
    g = loss_global(trajs, np.zeros(2), expert, np.array([1.0, 0.0]), LossWeights())
    assert g.reg == 16.0 and g.cls == pytest.approx(math.log(2))
    assert g.value == pytest.approx(8.0 * 16.0 + 10.0 * math.log(2))
    none = loss_global(trajs, np.zeros(2), expert, np.zeros(2))
    assert none.value == 0.0 and np.all(none.grad_logits == 0.0) and np.all(none.grad_traj == 0.0)


def test_global_loss_gradient(rng):
    trajs, expert = rng.normal(size=(5, 8, 2)), rng.normal(size=(8, 2))
    z, y = rng.normal(size=5), np.array([0.0, 1.0, 0.0, 1.0, 0.0])
    g = loss_global(trajs, z, expert, y)
    eps = 1e-6
    for idx in [(1, 3, 0), (3, 7, 1), (0, 0, 0)]:
        e = np.zeros_like(trajs)
        e[idx] = eps
        num = (loss_global(trajs + e, z, expert, y).value - loss_global(trajs - e, z, expert, y).value) / (2 * eps)
        assert num == pytest.approx(g.grad_traj[idx], abs=1e-5)
    for i in range(5):
        e = np.zeros(5)
        e[i] = eps
        num = (loss_global(trajs, z + e, expert, y).value - loss_global(trajs, z - e, expert, y).value) / (2 * eps)
        assert num == pytest.approx(g.grad_logits[i], abs=1e-6)


def test_local_loss_gradient(rng):
    cfg = small_cfg()
    M2 = cfg.m2
    trajs = rng.normal(size=(M2, 8, 2))
    expert = rng.normal(size=(8, 2))
    rewards = rng.uniform(size=(M2, NM))
    dist, safe, rl = rng.normal(size=M2), rng.normal(size=(M2, NM)), rng.normal(size=(M2, NM))

    def value(d, s, r):
        return loss_local(Refined(trajs, d, s, r, None, None), expert, rewards, cfg).value

    L = loss_local(Refined(trajs, dist, safe, rl, None, None), expert, rewards, cfg)
    assert L.value == pytest.approx(10 * L.dist + L.safe - L.J)
    eps = 1e-6
    for i in (0, 17, 49):
        e = np.zeros(M2)
        e[i] = eps
        assert (value(dist + e, safe, rl) - value(dist - e, safe, rl)) / (2 * eps) == pytest.approx(L.grad_dist_logit[i], abs=1e-6)
        for j in (0, 4, NM - 1):
            E = np.zeros((M2, NM))
            E[i, j] = eps
            assert (value(dist, safe + E, rl) - value(dist, safe - E, rl)) / (2 * eps) == pytest.approx(L.grad_safety_logits[i, j], abs=1e-6)
            assert (value(dist, safe, rl + E) - value(dist, safe, rl - E)) / (2 * eps) == pytest.approx(L.grad_rl_logits[i, j], abs=1e-6)


def test_scene_loss_gradient_spot_check(anchors, samples):
    pol = live_policy(anchors)
    L, g, recs = batch_loss(pol, samples[:2], np.random.default_rng(1))
    fr = [r.frozen for r in recs]
    theta = pol.flat_params()
    idx = np.random.default_rng(0).choice(theta.size, 40, replace=False)
    h = 1e-5
    num = []
    for i in idx:
        e = np.zeros_like(theta)
        e[i] = h
        lp = batch_loss(pol.with_flat_params(theta + e), samples[:2], None, fr)[0]
        lm = batch_loss(pol.with_flat_params(theta - e), samples[:2], None, fr)[0]
        num.append((lp - lm) / (2 * h))
    assert np.linalg.norm(np.array(num) - g[idx]) / np.linalg.norm(g[idx]) < 1e-6


def test_scene_loss_parts(anchors, samples):
    rec = scene_loss(live_policy(anchors), samples[0], np.random.default_rng(0))
    p = rec.parts
    assert rec.total == pytest.approx(12 * p["L_global"] + 12 * p["L_local"])
    assert p["L_global"] == pytest.approx(8 * p["L_reg"] + 10 * p["L_cls"])
    assert p["L_rl"] == -p["J"]
    assert rec.frozen.rewards.shape == (50, NM) and 1 <= rec.frozen.timestep <= 8


# -- training -------------------------------------------------------------------------------


def test_build_anchors(samples):
    experts = np.stack([s.expert for s in samples])
    a = build_anchors(experts, 4, seed=0)
    assert a.shape == (4, 8, 2)
    assert np.array_equal(a, build_anchors(experts, 4, seed=0))
    assert np.all(np.diff(a[:, -1, 0]) >= 0)
    with pytest.raises(ValueError):
        build_anchors(experts[:3], 4)


def test_zero_epochs_returns_copy(anchors, samples):
    pol = live_policy(anchors)
    res = train(pol, samples, TrainConfig(epochs=0))
    assert res.log == [] and res.policy is not pol
    assert np.array_equal(res.policy.flat_params(), pol.flat_params())


def test_training_is_deterministic_and_learns(anchors, samples, tmp_path):
    cfg = TrainConfig(epochs=4, batch_size=4, lr=1e-2, eval_scenes=0)
    before = init_policy(anchors, small_cfg())
    theta0 = before.flat_params().copy()
    a = train(before, samples, cfg, log_path=tmp_path / "log.csv")
    b = train(before, samples, cfg)
    assert np.array_equal(a.policy.flat_params(), b.policy.flat_params())
    assert np.array_equal(before.flat_params(), theta0)  # input untouched
    assert a.log[-1]["L_global"] < a.log[0]["L_global"]
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,L_global,L_dist,L_safe,L_rl,J,mean_epdms"
    c = train(before, samples, TrainConfig(epochs=4, batch_size=4, lr=1e-2, eval_scenes=0, seed=1))
    assert not np.array_equal(a.policy.flat_params(), c.policy.flat_params())


def test_train_config_validation(anchors):
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        train(init_policy(anchors, small_cfg()), [])


def test_policy_config_validation(anchors):
    with pytest.raises(ValueError):
        PolicyConfig(k=21)
    with pytest.raises(ValueError):
        PolicyConfig(variant="spiral")
    with pytest.raises(ValueError):
        PolicyConfig(dist_score="rank")
    with pytest.raises(ValueError):
        init_policy(anchors, PolicyConfig(m1=5))
    pol = init_policy(anchors, small_cfg())
    assert pol.with_config(k=4, variant="xy").config.k == 4
    with pytest.raises(ValueError):
        pol.with_config(hidden=8)


# -- checkpoint ------------------------------------------------------------------------------


def test_checkpoint_round_trip(anchors, small_corpus, tmp_path):
    pol = live_policy(anchors, variant="xy", dist_score="prob")
    path = tmp_path / "p.hpol"
    save_policy(pol, path)
    back = load_policy(path)
    assert back.config == pol.config
    assert np.array_equal(back.anchors, pol.anchors)
    assert np.array_equal(back.flat_params(), pol.flat_params())
    assert plan(back, small_corpus[0], seed=1).equals(plan(pol, small_corpus[0], seed=1))
    assert policy_to_bytes(back) == path.read_bytes()


def test_checkpoint_corruption(anchors):
    data = bytearray(policy_to_bytes(init_policy(anchors, small_cfg())))
    for bad in (b"XXXX" + bytes(data[4:]), bytes(data[:-50]), bytes(data[:8])):
        with pytest.raises(CheckpointError):
            policy_from_bytes(bad)
    data[200] ^= 0xFF
    with pytest.raises(CheckpointError):
        policy_from_bytes(bytes(data))
