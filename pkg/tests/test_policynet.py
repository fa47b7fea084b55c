import numpy as np
import pytest

from mimic import autodiff as ad
from mimic.errors import FormatError, ShapeMismatch
from mimic.gradcheck import policy_gradcheck, random_problem, small_config
from mimic.policynet import (
    EGO_DIM, FINE_GRID, Batch, PolicyConfig, ego_features, encode_context, film, forward, init_params,
    load_params, param_count, patchify, sample_masks, save_params,
)


def test_film_examples():
    rng = np.random.default_rng(0)
    tok = ad.Tensor(rng.normal(size=(2, 3, 4)))
    ones, zeros = ad.Tensor(np.ones((3, 4))), ad.Tensor(np.zeros((3, 4)))
    assert np.array_equal(film(tok, ones, zeros).data, tok.data)
    b = ad.Tensor(rng.normal(size=(3, 4)))
    assert np.array_equal(film(tok, zeros, b).data, np.broadcast_to(b.data, (2, 3, 4)))
    gamma = ad.Tensor(np.ones((3, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(film(ad.Tensor(tok.data[0]), gamma, zeros))
    tape.backward(loss)
    assert np.array_equal(gamma.grad, tok.data[0])
    with pytest.raises(ShapeMismatch):
        film(tok, ad.Tensor(np.ones((2, 4))), ad.Tensor(np.zeros((2, 4))))


def test_config_validation():
    with pytest.raises(Exception):
        PolicyConfig(T=12)
    with pytest.raises(ValueError):
        PolicyConfig(image_size=60, patch_px=8)
    with pytest.raises(ValueError):
        PolicyConfig(heads="ISX")
    cfg = PolicyConfig(M=8, heads="IQ")
    assert PolicyConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(FormatError):
        PolicyConfig.from_text("bogus=1\n")


def test_patchify_row_major():
    frames = np.arange(1 * 1 * 4 * 4 * 3, dtype=float).reshape(1, 1, 4, 4, 3)
    p = patchify(frames, 2)
    assert p.shape == (1, 1, 4, 12)
    assert np.array_equal(p[0, 0, 1].reshape(2, 2, 3), frames[0, 0, 0:2, 2:4])


def test_context_token_count_default_config():
    cfg = PolicyConfig()
    assert cfg.n_tokens == 16 + 64 + 2
    params = init_params(cfg, seed=0)
    batch, _, _ = random_problem(cfg, 0, B=1)
    V = encode_context(params, cfg, batch)
    assert V.shape == (1, 82, cfg.C)


def test_goal_mask_zeroes_goal_token():
    cfg = small_config()
    params = init_params(cfg, seed=1)
    batch, _, _ = random_problem(cfg, 1)
    keep = np.ones((2, cfg.n_tokens))
    goal_idx = cfg.T_h + FINE_GRID * FINE_GRID
    keep[:, goal_idx] = 0.0
    V = encode_context(params, cfg, batch, keep).data
    assert np.all(V[:, goal_idx] == 0.0)
    assert np.any(V[:, goal_idx + 1] != 0.0)


def test_sample_masks_rates():
    cfg = PolicyConfig()
    keep = sample_masks(cfg, 4000, np.random.default_rng(0))
    goal = keep[:, cfg.T_h + 64]
    others = np.delete(keep, cfg.T_h + 64, axis=1)
    assert abs(goal.mean() - 0.5) < 0.03 and abs(others.mean() - 0.8) < 0.01


def test_identical_frames_give_identical_coarse_tokens():
    cfg = small_config()
    params = init_params(cfg, seed=2)
    batch, _, _ = random_problem(cfg, 2)
    frames, ego = batch.frames.copy(), batch.ego.copy()
    frames[1], ego[1] = frames[0], ego[0]
    V = encode_context(params, cfg, Batch(frames, batch.goal, batch.cam, ego)).data
    assert np.array_equal(V[0, :cfg.T_h], V[1, :cfg.T_h])


def test_ego_states_enter_coarse_tokens_only():
    cfg = small_config()
    params = init_params(cfg, seed=2)
    batch, _, _ = random_problem(cfg, 2)
    V = encode_context(params, cfg, batch).data
    moved = Batch(batch.frames, batch.goal, batch.cam, batch.ego + 0.3)
    W = encode_context(params, cfg, moved).data
    assert not np.allclose(V[:, :cfg.T_h], W[:, :cfg.T_h])
    assert np.array_equal(V[:, cfg.T_h:], W[:, cfg.T_h:])
    with pytest.raises(ShapeMismatch):
        encode_context(params, cfg, Batch(batch.frames, batch.goal, batch.cam))
    off = small_config(ego_states=False)
    assert "ego.w1" not in init_params(off)
    assert encode_context(init_params(off), off, Batch(batch.frames, batch.goal, batch.cam)).shape == V.shape


def test_ego_features_constant_speed():
    hist = np.zeros((1, 4, 3))
    hist[0, :, 0] = -0.2 * np.arange(4, 0, -1)  # 1 m/s at 5 Hz along +x
    f = ego_features(hist, 5.0)
    assert f.shape == (1, 4, EGO_DIM)
    assert np.allclose(f[0, :, 4], 0.5) and np.allclose(f[0, :, 5], 0.0)
    assert np.allclose(f[0, :, 2], 1.0)


def test_zero_offsets_reproduce_anchors_and_half_confidence():
    cfg = small_config()
    params = init_params(cfg, seed=3, zero_offsets=True)
    for k in range(cfg.n_layers):
        for h in cfg.horizons:
            params[f"L{k}.{h}.conf.w"].data[:] = 0.0
    batch, _, anchors = random_problem(cfg, 3)
    bundle = forward(params, cfg, anchors, batch)
    assert len(bundle.layers) == cfg.n_layers
    for layer in bundle.layers:
        for h, n in cfg.horizons.items():
            assert layer.traj[h].shape == (2, cfg.M, n, 3)
            assert np.array_equal(layer.traj[h].data, np.broadcast_to(anchors[h], (2, cfg.M, n, 3)))
            assert np.all(layer.conf[h].data == 0.5)
        assert layer.qf.shape == (2, cfg.T // 4, 3)


def test_default_layer_count():
    assert PolicyConfig().n_layers == 4


def test_top_confidence_trajectory_is_an_anchor():
    cfg = small_config()
    params = init_params(cfg, seed=4, zero_offsets=True)
    batch, _, anchors = random_problem(cfg, 4)
    final = forward(params, cfg, anchors, batch).final
    for b in range(2):
        m = int(np.argmax(final.conf["L"].data[b]))
        assert any(np.array_equal(final.traj["L"].data[b, m], a) for a in anchors["L"])


def test_forward_determinism():
    cfg = small_config()
    params = init_params(cfg, seed=5, zero_offsets=False)
    batch, _, anchors = random_problem(cfg, 5)
    a = forward(params, cfg, anchors, batch, "eval").final
    b = forward(params, cfg, anchors, batch, "eval").final
    assert np.array_equal(a.traj["L"].data, b.traj["L"].data)
    c = forward(params, cfg, anchors, batch, "train", np.random.default_rng(8)).final
    d = forward(params, cfg, anchors, batch, "train", np.random.default_rng(8)).final
    assert np.array_equal(c.conf["M"].data, d.conf["M"].data)
    with pytest.raises(ValueError):
        forward(params, cfg, anchors, batch, "test")


def test_fine_token_permutation_without_positions():
    cfg = small_config(pos_emb=False)
    params = init_params(cfg, seed=6, zero_offsets=False)
    batch, _, anchors = random_problem(cfg, 6)
    p = cfg.patch_px
    cur = batch.frames[:, -1].reshape(2, FINE_GRID, p, FINE_GRID, p, 3)
    perm = np.random.default_rng(0).permutation(FINE_GRID * FINE_GRID)
    cells = cur.transpose(0, 1, 3, 2, 4, 5).reshape(2, FINE_GRID * FINE_GRID, p, p, 3)[:, perm]
    shuffled = cells.reshape(2, FINE_GRID, FINE_GRID, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    frames = batch.frames.copy()
    frames[:, -1] = shuffled.reshape(frames[:, -1].shape)
    a = forward(params, cfg, anchors, batch).final
    b = forward(params, cfg, anchors, Batch(frames, batch.goal, batch.cam, batch.ego)).final
    assert np.allclose(a.qf.data, b.qf.data, atol=1e-12)
    for h in cfg.horizons:
        assert np.allclose(a.traj[h].data, b.traj[h].data, atol=1e-12)
        assert np.allclose(a.conf[h].data, b.conf[h].data, atol=1e-12)


def test_outputs_finite_on_extreme_inputs():
    cfg = small_config()
    params = init_params(cfg, seed=7, zero_offsets=False)
    batch, _, anchors = random_problem(cfg, 7)
    for frames in (np.zeros_like(batch.frames), np.ones_like(batch.frames)):
        cam = np.full_like(batch.cam, 1e6)
        goal = np.tile([1e4, 1.0, 0.0], (2, 1))
        final = forward(params, cfg, anchors, Batch(frames, goal, cam, batch.ego * 1e3)).final
        for h in cfg.horizons:
            assert np.all(np.isfinite(final.traj[h].data)) and np.all(np.isfinite(final.conf[h].data))


def test_frame_shape_checked():
    cfg = small_config()
    params = init_params(cfg)
    batch, _, anchors = random_problem(cfg, 0)
    with pytest.raises(ShapeMismatch):
        forward(params, cfg, anchors, Batch(batch.frames[:, 1:], batch.goal, batch.cam, batch.ego))


def test_head_subsets_change_parameters():
    full = init_params(small_config(), seed=0)
    qf_only = init_params(small_config(heads="Q"), seed=0)
    assert param_count(qf_only) < param_count(full)
    assert not any(".ca." in k or k.startswith("query.") for k in qf_only)


def test_gradients_match_finite_differences():
    r = policy_gradcheck(11)
    assert r.max_error < 1e-4, sorted(r.worst.items(), key=lambda kv: -kv[1])[:3]
    # two single elements plus one random direction per tensor
    assert r.checks == sum(min(2, t.data.size) + 1 for t in init_params(small_config()).values())


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = init_params(cfg, seed=9, zero_offsets=False)
    save_params(tmp_path / "p.mnet", params)
    raw = (tmp_path / "p.mnet").read_bytes()
    assert raw.startswith(b"MNET1")
    back = load_params(tmp_path / "p.mnet", expected=params)
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k].data, params[k].data)
    save_params(tmp_path / "q.mnet", params)
    assert (tmp_path / "q.mnet").read_bytes() == raw


def test_checkpoint_rejects_mismatch(tmp_path):
    params = init_params(small_config(), seed=0)
    save_params(tmp_path / "p.mnet", params)
    other = init_params(small_config(C=8), seed=0)
    with pytest.raises(ShapeMismatch):
        load_params(tmp_path / "p.mnet", expected=other)
    raw = (tmp_path / "p.mnet").read_bytes()
    (tmp_path / "t.mnet").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_params(tmp_path / "t.mnet")
    (tmp_path / "m.mnet").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "m.mnet")
