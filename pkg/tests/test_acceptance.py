"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is echoed in the pytest
terminal summary. Criteria 7-10 share a session-scoped toy dataset (64
training scenarios, 16 held-out) and a cache of trained models.
"""

import dataclasses
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

import oracles
from mimic.anchors import kmeans
from mimic.camgeom import Pose, default_camera, splat_render, unproject
from mimic.curation import Behavior, balance_by_behavior, build_samples, window_count
from mimic.errors import TooShort
from mimic.expansion import Direction, expand_samples, perturbation_profile, synthesize_corrective_pair
from mimic.gradcheck import policy_gradcheck
from mimic.metrics import average_precision, endpoint_nms, min_ade, min_fde
from mimic.pipeline import (
    DataConfig, anchor_baseline, anchors_from_samples, curate_logs, evaluate_model, generate_logs,
    model_policy, recovery_split,
)
from mimic.policynet import PolicyConfig
from mimic.scenegen import make_scenario, render_frame, rollout
from mimic.supervision import TrainConfig, train
from mimic.trajcore import Trajectory, points_from_ego, resample_constant_velocity

TOY = DataConfig(image_size=32)
POLICY = PolicyConfig(image_size=32, patch_px=4, C=32, n_layers=2, M=16)
# Adam rather than the library's momentum default: see the README's notes on training
TRAIN = TrainConfig(steps=1500, steps_per_epoch=100, batch_size=16, lr0=1e-3, optimizer="adam")
SEEDS = (0, 1, 2)
RECOVERY_SEED = 1000


def test_criterion_01_gradients(criterion):
    t0 = time.perf_counter()
    errs = [policy_gradcheck(seed).max_error for seed in range(5)]
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-4 and dt < 120
    criterion(1, ok, f"max rel err {max(errs):.2e} over 5 seeds (tol 1e-4), {dt:.0f}s (limit 120s)")
    assert ok


def test_criterion_02_reprojection_round_trip(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cam = default_camera(32)
    worst, covered = 0.0, []
    for k in range(20):
        sc = make_scenario(int(rng.integers(0, 10_000)), float(rng.uniform(0, 1)), cam, duration_s=12.0)
        rgb, depth = render_frame(sc.world, cam, sc.expert.pose(int(rng.integers(0, len(sc.expert)))))
        out, cov = splat_render(unproject(depth, rgb, cam), cam, Pose(0.0, 0.0, 0.0))
        worst = max(worst, float(np.max(np.abs(out[cov] - rgb[cov]))))
        covered.append(cov.mean())
    dt = time.perf_counter() - t0
    ok = worst <= 1 / 255 and dt < 60
    criterion(2, ok, f"max color error {worst:.2e} (tol {1 / 255:.2e}) on 20 scenes, "
                     f"min coverage {min(covered):.2f}, {dt:.0f}s (limit 60s)")
    assert ok


def random_log(rng, n):
    turn = np.cumsum(rng.normal(0, 0.15, n))
    step = rng.uniform(0.1, 0.3, n)
    xy = np.cumsum(np.column_stack([step * np.cos(turn), step * np.sin(turn)]), axis=0)
    return Trajectory(np.column_stack([xy, turn]), 5.0, "world")


def test_criterion_03_perturbation_structure(criterion):
    rng = np.random.default_rng(3)
    cam = default_camera(8)
    worst_end, bad = 0.0, []
    for k in range(60):
        alpha = float(rng.uniform(0, 2))
        T_h, T = int(rng.integers(1, 25)), int(rng.integers(2, 50))
        v = perturbation_profile(alpha, T_h, T).values
        if v[0] != 0.0 or v.max() > alpha + 1e-12:
            bad.append((alpha, T_h, T))
        if (T_h + T) % 2 == 0 and abs(v.max() - alpha) > 1e-12:
            bad.append((alpha, T_h, T))
        n = T_h + T
        rgb = np.full((n, 8, 8, 3), 100, dtype=np.uint8)
        smp = build_samples(random_log(rng, n), T_h, T, stride=1, seed=k, frames=rgb,
                            depth=np.full((n, 8, 8), 5.0))[0]
        direction = list(Direction)[int(rng.integers(0, len(Direction)))]
        pair = synthesize_corrective_pair(smp, cam, alpha, direction, c_min=0.0, side=int(rng.choice([1, -1])))
        end = points_from_ego(pair.recovery_future.xy[-1:], pair.perturbed_world.pose(T_h))[0]
        worst_end = max(worst_end, float(np.linalg.norm(end - smp.window_world.xy[-1])))
    ok = not bad and worst_end <= 1e-9
    criterion(3, ok, f"profile violations {len(bad)} of 60, max recovery endpoint error {worst_end:.1e} m (tol 1e-9)")
    assert ok


def test_criterion_04_metric_oracles(criterion):
    rng = np.random.default_rng(4)
    worst, nms_bad = 0.0, 0
    for _ in range(100):
        samples = [oracles.random_instance(rng, T=8) for _ in range(int(rng.integers(1, 5)))]
        for c, p, g in samples:
            worst = max(worst, abs(min_ade(c, g) - oracles.min_ade(c, g, 5)),
                        abs(min_fde(c, g) - oracles.min_fde(c, g, 5)))
            r = float(rng.choice([0.3, 1.0, 3.0]))
            k = int(rng.integers(1, 7))
            nms_bad += endpoint_nms(c, p, k, r) != oracles.greedy_nms(c, p, k, r)
        worst = max(worst, abs(average_precision(samples) - oracles.average_precision(samples, 5, 1.0)))
    ok = worst <= 1e-12 and nms_bad == 0
    criterion(4, ok, f"max |metric - oracle| {worst:.1e} (tol 1e-12), NMS mismatches {nms_bad} on 100 instances")
    assert ok


def test_criterion_05_kmeans(criterion):
    rng = np.random.default_rng(5)
    rises = 0
    for run in range(40):
        x = rng.normal(size=(int(rng.integers(10, 80)), int(rng.integers(1, 6))))
        res = kmeans(x, int(rng.integers(1, 8)), seed=run)
        rises += int(np.any(np.diff(res.history) > 0))
    planted = kmeans(np.array([0.0, 1.0, 10.0, 11.0]), 2, seed=0)
    centers = sorted(planted.centers[:, 0].tolist())
    ok = rises == 0 and centers == [0.5, 10.5] and planted.inertia == 1.0
    criterion(5, ok, f"runs with rising inertia {rises} of 40; planted centers {centers}, inertia {planted.inertia!r}")
    assert ok


def test_criterion_06_curation_arithmetic(criterion):
    rng = np.random.default_rng(6)
    count_bad = cap_bad = 0
    worst_arc = 0.0
    for k in range(40):
        T_h, T, stride = int(rng.integers(1, 17)), int(rng.integers(2, 41)), int(rng.integers(1, 9))
        n = int(rng.integers(max(2, T_h + T - 5), T_h + T + 60))
        brute = len(range(0, n - (T_h + T) + 1, stride))
        if n < T_h + T:
            with pytest.raises(TooShort):
                build_samples(random_log(rng, n), T_h, T, stride, seed=k)
            built = 0
        else:
            built = len(build_samples(random_log(rng, n), T_h, T, stride, seed=k))
        count_bad += built != brute or window_count(n, T_h, T, stride) != brute

        labels = [list(Behavior)[i] for i in rng.integers(0, len(Behavior), int(rng.integers(1, 200)))]
        cap = float(rng.uniform(0.05, 0.95))
        kept = balance_by_behavior([lb.value for lb in labels], cap, seed=k)
        n_s = sum(labels[i] is Behavior.STRAIGHT for i in kept)
        n_o = sum(lb is not Behavior.STRAIGHT for lb in labels)
        all_s = sum(lb is Behavior.STRAIGHT for lb in labels)
        over = n_s > cap * len(kept) + 1e-12
        # one more straight would break the cap, unless none were dropped
        not_max = n_s < all_s and (n_s + 1) <= cap * (n_s + 1 + n_o)
        cap_bad += over or not_max or len(kept) - n_s != n_o

        poly = random_log(rng, int(rng.integers(2, 30)))
        total = poly.arc_length()
        n_out = int(rng.integers(2, 60))
        out = resample_constant_velocity(poly, n_out)
        expected = np.array([oracles.walk_polyline(poly.xy, i * total / (n_out - 1)) for i in range(n_out)])
        worst_arc = max(worst_arc, float(np.max(np.linalg.norm(out.xy - expected, axis=1))) / total)
    ok = count_bad == 0 and cap_bad == 0 and worst_arc <= 1e-9
    criterion(6, ok, f"window-count mismatches {count_bad}, cap violations {cap_bad}, "
                     f"max arc-position error {worst_arc:.1e} relative (tol 1e-9) over 40 logs")
    assert ok


# -- trained-model criteria -----------------------------------------------------------------

@pytest.fixture(scope="session")
def toy():
    logs_tr = generate_logs(range(64), TOY)
    logs_te = generate_logs(range(1000, 1016), TOY)
    train_set, _ = curate_logs(logs_tr, TOY, 0)
    test_set, _ = curate_logs(logs_te, TOY, 0)
    cam = default_camera(TOY.image_size)
    anchors = anchors_from_samples(train_set, POLICY.M, 0)
    return SimpleNamespace(logs_te=logs_te, train=train_set, test=test_set, cam=cam, anchors=anchors,
                           recovery=recovery_split(test_set, cam, seed=RECOVERY_SEED), models={})


def trained(toy, seed, corrective, heads="ISMLQ"):
    key = (seed, corrective, heads)
    if key not in toy.models:
        data = list(toy.train)
        if corrective:
            data += expand_samples(toy.train, toy.cam, seed=seed, corrective=True, relight_set=False)[0]
        cfg = dataclasses.replace(POLICY, heads=heads)
        params, curve = train(data, cfg, toy.anchors, TRAIN, seed)
        toy.models[key] = (params, cfg, curve)
    return toy.models[key]


@pytest.mark.slow
def test_criterion_07_trainability(toy, criterion):
    one = toy.train[:1]
    # one step per curve entry, so curve[0] is the untrained loss
    tc = TrainConfig(steps=500, steps_per_epoch=1, batch_size=1, lr0=1e-3, optimizer="adam")
    _, curve = train(one, POLICY, toy.anchors, tc, seed=0)
    drop = curve[0].total / curve[-1].total
    params, cfg, _ = trained(toy, 0, corrective=False)
    model = evaluate_model(params, cfg, toy.anchors, toy.test).minADE_1s
    base = anchor_baseline(toy.anchors, toy.test).minADE_1s
    gain = 1 - model / base
    ok = drop >= 10 and gain >= 0.30
    criterion(7, ok, f"overfit loss drop {drop:.1f}x (need 10x); toy minADE_1s {model:.4f} vs anchor "
                     f"baseline {base:.4f}, {100 * gain:.0f}% lower (need 30%)")
    assert ok


@pytest.mark.slow
def test_criterion_08_corrective_ablation(toy, criterion):
    rows = []
    for seed in SEEDS:
        r = {}
        for corrective in (False, True):
            params, cfg, _ = trained(toy, seed, corrective)
            r[corrective, "rec"] = evaluate_model(params, cfg, toy.anchors, toy.recovery)
            r[corrective, "reg"] = evaluate_model(params, cfg, toy.anchors, toy.test)
        rows.append(r)
    ade_wins = sum(r[True, "rec"].minADE_1s < r[False, "rec"].minADE_1s for r in rows)
    l2_with = np.mean([r[True, "rec"].L2[2.0] for r in rows])
    l2_without = np.mean([r[False, "rec"].L2[2.0] for r in rows])
    reg_with = np.mean([r[True, "reg"].minADE_1s for r in rows])
    reg_without = np.mean([r[False, "reg"].minADE_1s for r in rows])
    l2_wins = sum(r[True, "rec"].L2[2.0] < r[False, "rec"].L2[2.0] for r in rows)
    ok = ade_wins == 3 and l2_with < l2_without and reg_with <= 1.1 * reg_without
    criterion(8, ok, f"recovery minADE_1s lower with expansion in {ade_wins}/3 seeds; mean recovery L2_2s "
                     f"{l2_with:.4f} vs {l2_without:.4f} (lower in {l2_wins}/3); regular minADE_1s {reg_with:.4f} vs {reg_without:.4f} "
                     f"(limit +10%)")
    assert ok


@pytest.mark.slow
def test_criterion_09_closed_loop(toy, criterion):
    devs = {False: [], True: []}
    for seed in SEEDS:
        for corrective in (False, True):
            params, cfg, _ = trained(toy, seed, corrective)
            policy = model_policy(params, cfg, toy.anchors)
            for lg in toy.logs_te[:10]:
                devs[corrective].append(rollout(policy, lg.scenario, T_h=cfg.T_h).max_deviation)
    with_c, without = float(np.mean(devs[True])), float(np.mean(devs[False]))
    ok = with_c < without
    criterion(9, ok, f"mean max lateral deviation {with_c:.3f} m with expansion vs {without:.3f} m without "
                     f"(10 scenarios x 3 seeds)")
    assert ok


@pytest.mark.slow
def test_criterion_10_query_free_only(toy, criterion):
    q_params, q_cfg, _ = trained(toy, 0, corrective=False, heads="Q")
    q_rep = evaluate_model(q_params, q_cfg, toy.anchors, toy.test)
    params, cfg, _ = trained(toy, 0, corrective=False)
    full = evaluate_model(params, cfg, toy.anchors, toy.test)
    # a model without query heads ranks nothing, so it scores as if its AP were 0
    ok = q_rep.mAP is None and full.mAP is not None and full.mAP > 0.0 and math.isfinite(q_rep.minADE_1s)
    criterion(10, ok, f"QF-only mAP {q_rep.mAP}; full-head mAP {full.mAP:.4f}")
    assert ok
