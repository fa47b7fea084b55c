import json

import numpy as np
import pytest

from mimic.curation import CurationConfig
from mimic.errors import FormatError
from mimic.pipeline import (
    DataConfig, anchor_baseline, anchors_from_samples, curate_logs, evaluate_model, generate_logs,
    make_batch, model_policy, predict, recovery_split,
)
from mimic.policynet import PolicyConfig, init_params
from mimic.scenegen import rollout
from mimic.store import read_store, write_store

DC = DataConfig(image_size=16, duration_s=14.0, T_h=4, T=24, stride=3)


@pytest.fixture(scope="module")
def data():
    logs = generate_logs(range(3), DC)
    # short windows on short logs are almost all straight, so lift the cap
    samples, _ = curate_logs(logs, DC, seed=0, ccfg=CurationConfig(straight_cap=1.0))
    assert len(samples) > 10
    return logs, samples


def same_sample(a, b):
    assert a.sample_id == b.sample_id and a.provenance == b.provenance and a.behavior == b.behavior
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.future.poses, b.future.poses) and np.array_equal(a.history.poses, b.history.poses)
    assert a.goal == b.goal and a.meta == b.meta and np.array_equal(a.cam, b.cam)


def test_store_round_trip_is_byte_stable(tmp_path, data):
    _, samples = data
    write_store(tmp_path / "a", samples)
    back = read_store(tmp_path / "a")
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        same_sample(a, b)
    write_store(tmp_path / "b", back)
    for name in ("index.jsonl", "arrays.npy"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_store_errors(tmp_path, data):
    _, samples = data
    with pytest.raises(FormatError):
        read_store(tmp_path / "missing")
    root = write_store(tmp_path / "s", samples[:2])
    raw = (root / "arrays.npy").read_bytes()
    (root / "arrays.npy").write_bytes(raw[: len(raw) // 3])
    with pytest.raises(FormatError):
        read_store(root)
    root = write_store(tmp_path / "v", samples[:1])
    row = json.loads((root / "index.jsonl").read_text())
    row["v"] = 99
    (root / "index.jsonl").write_text(json.dumps(row) + "\n")
    with pytest.raises(FormatError):
        read_store(root)


def test_make_batch_shapes(data):
    _, samples = data
    batch, gt = make_batch(samples[:3])
    assert batch.frames.shape == (3, DC.T_h + 1, 16, 16, 3) and batch.frames.max() <= 1.0
    assert batch.ego.shape == (3, DC.T_h, 3) and gt.shape == (3, DC.T, 3)
    assert np.all(gt[:, 0] == 0.0)


def test_predict_baseline_and_qf_only(data):
    _, samples = data
    anchors = anchors_from_samples(samples, 4, seed=0)
    base = anchor_baseline(anchors, samples)
    assert base.n == len(samples) and base.mAP is not None
    cfg = PolicyConfig(T_h=4, T=24, M=4, C=16, n_layers=1, image_size=16, patch_px=2, time_dim=8)
    params = init_params(cfg, seed=0)
    preds = predict(params, cfg, anchors, samples[:5], batch_size=2)
    assert len(preds) == 5 and preds[0][0].shape == (4, 24, 3)
    rep = evaluate_model(params, cfg, anchors, samples[:5])
    assert np.isfinite(rep.minADE_1s) and 0.0 <= rep.mAP <= 1.0
    qf = PolicyConfig(T_h=4, T=24, M=4, C=16, n_layers=1, image_size=16, patch_px=2, time_dim=8, heads="Q")
    q_rep = evaluate_model(init_params(qf, seed=0), qf, anchors, samples[:5])
    assert q_rep.mAP is None and np.isfinite(q_rep.minADE_1s)


def test_recovery_split_and_model_policy(data):
    logs, samples = data
    cam = logs[0].scenario.camera
    rec = recovery_split(samples[:3], cam, seed=1)
    assert rec and all(s.provenance == "corrective" for s in rec)
    assert recovery_split(samples[:3], cam, seed=1)[0].sample_id == rec[0].sample_id
    anchors = anchors_from_samples(samples, 4, seed=0)
    cfg = PolicyConfig(T_h=4, T=24, M=4, C=16, n_layers=1, image_size=16, patch_px=2, time_dim=8)
    policy = model_policy(init_params(cfg, seed=0), cfg, anchors)
    res = rollout(policy, logs[0].scenario, T_h=4, max_steps=3)
    assert res.steps == 3 and np.all(np.isfinite(res.deviations))
