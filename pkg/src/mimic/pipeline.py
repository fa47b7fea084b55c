"""End-to-end glue: scenario logs, sample batches, predictions and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import build_anchor_sets
from .camgeom import CameraModel, default_camera, to_uint8
from .curation import CurationConfig, TrainingSample, curate
from .expansion import ALPHA_RANGE, expand_samples
from .metrics import EvalConfig, EvalReport, evaluate_predictions
from .policynet import Batch, PolicyConfig, forward
from .scenegen import Observation, Scenario, make_scenario, render_sequence
from .trajcore import ego_states_from_trajectory, encode_goal


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    duration_s: float = 30.0
    rate_hz: float = 5.0
    difficulty_min: float = 0.3
    difficulty_max: float = 1.0
    abnormal_p: float = 0.1
    T_h: int = 16
    T: int = 40
    stride: int = 4


@dataclass
class ScenarioLog:
    log_id: int
    scenario: Scenario
    rgb: np.ndarray  # (n, H, W, 3) uint8
    depth: np.ndarray  # (n, H, W) float32
    v: np.ndarray
    omega: np.ndarray


def scenario_difficulty(seed: int, cfg: DataConfig) -> float:
    u = np.random.default_rng([int(seed), 4242]).random()
    return cfg.difficulty_min + (cfg.difficulty_max - cfg.difficulty_min) * u


def generate_log(seed: int, cfg: DataConfig, cam: CameraModel | None = None) -> ScenarioLog:
    cam = cam or default_camera(cfg.image_size)
    sc = make_scenario(seed, scenario_difficulty(seed, cfg), cam, cfg.duration_s, cfg.rate_hz,
                       abnormal_p=cfg.abnormal_p)
    rgb, depth = render_sequence(sc.world, cam, sc.expert)
    v, omega = ego_states_from_trajectory(sc.expert)
    return ScenarioLog(seed, sc, to_uint8(rgb), depth.astype(np.float32), v, omega)


def generate_logs(seeds, cfg: DataConfig, cam: CameraModel | None = None) -> list[ScenarioLog]:
    return [generate_log(int(s), cfg, cam) for s in seeds]


def log_tuples(logs):
    for lg in logs:
        yield (lg.log_id, lg.scenario.expert, lg.v, lg.omega, lg.scenario.camera.feature_vector,
               lg.rgb, lg.depth)


def curate_logs(logs, cfg: DataConfig, seed=0, ccfg: CurationConfig = CurationConfig()):
    return curate(log_tuples(logs), cfg.T_h, cfg.T, cfg.stride, seed, ccfg)


def make_batch(samples) -> tuple[Batch, np.ndarray]:
    """Stack samples into a :class:`Batch` plus ``(B, T, 3)`` future labels."""
    frames = np.stack([s.frames for s in samples])
    frames = frames.astype(np.float64) / 255.0 if frames.dtype == np.uint8 else frames.astype(np.float64)
    goal = np.stack([s.goal.as_array() for s in samples])
    cam = np.stack([np.asarray(s.cam, dtype=np.float64) for s in samples])
    gt = np.stack([s.future.poses for s in samples])
    ego = np.stack([s.history.poses for s in samples])
    return Batch(frames, goal, cam, ego), gt


def anchors_from_samples(samples, M: int, seed=0):
    return build_anchor_sets([s.future for s in samples], M, seed)


def longest_head(cfg: PolicyConfig) -> str | None:
    names = list(cfg.horizons)
    return names[-1] if names else None


def predict(params, cfg: PolicyConfig, anchors, samples, batch_size: int = 64):
    """``[(candidates, confidences or None, gt)]`` from the final layer.

    Candidates come from the longest enabled query head; with only the
    query-free head enabled the single QF trajectory is the only candidate
    and there are no confidences.
    """
    out = []
    head = longest_head(cfg)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch, gt = make_batch(chunk)
        layer = forward(params, cfg, anchors, batch, "eval").final
        for b in range(len(chunk)):
            if head is not None:
                out.append((layer.traj[head].data[b], layer.conf[head].data[b], gt[b]))
            else:
                out.append((layer.qf.data[b][None], None, gt[b]))
    return out


def evaluate_model(params, cfg: PolicyConfig, anchors, samples, ecfg: EvalConfig | None = None) -> EvalReport:
    ecfg = ecfg or EvalConfig(rate_hz=cfg.rate_hz)
    preds = predict(params, cfg, anchors, samples)
    return evaluate_predictions(preds, ecfg, [s.behavior.value for s in samples])


def anchor_baseline(anchors, samples, rate_hz: float = 5.0) -> EvalReport:
    """Raw longest-horizon anchors with uniform confidence as the candidate set."""
    longest = max(anchors, key=lambda s: s.horizon_len).anchors
    conf = np.full(longest.shape[0], 1.0 / longest.shape[0])
    preds = [(longest, conf, s.future.poses) for s in samples]
    return evaluate_predictions(preds, EvalConfig(rate_hz=rate_hz))


def recovery_split(samples, cam: CameraModel, seed=0, alpha_range=ALPHA_RANGE):
    """Held-out perturbed observations paired with their recovery supervision."""
    rec, _ = expand_samples(samples, cam, seed=seed, corrective=True, relight_set=False,
                            alpha_range=alpha_range)
    return rec


def model_policy(params, cfg: PolicyConfig, anchors):
    """Wrap a model as a rollout policy returning the most confident longest-horizon trajectory."""
    head = longest_head(cfg)

    def policy(obs: Observation) -> np.ndarray:
        frames = to_uint8(obs.frames).astype(np.float64)[None] / 255.0
        goal = encode_goal(obs.goal_xy).as_array()[None]
        batch = Batch(frames, goal, obs.camera.feature_vector[None], obs.history[None])
        layer = forward(params, cfg, anchors, batch, "eval").final
        if head is None:
            return layer.qf.data[0]
        return layer.traj[head].data[0, int(np.argmax(layer.conf[head].data[0]))]
    return policy


def original_samples(samples: list[TrainingSample]) -> list[TrainingSample]:
    return [s for s in samples if s.provenance == "original"]
