"""Corrective behavior expansion and foreground/background relighting.

A recorded window is displaced by a sine-shaped drift that starts and ends
at zero. Every observed frame is re-rendered from its displaced viewpoint by
splatting the colored point cloud unprojected from that frame's own depth.
The supervision is the original future pulled back onto the expert path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .camgeom import DEFAULT_SPLAT_PX, CameraModel, splat_render, unproject, valid_depth_mask
from .curation import TrainingSample
from .errors import DimensionMismatch, InsufficientCoverage, LengthMismatch
from .trajcore import (Pose, Trajectory, encode_goal, heading_from_positions, points_from_ego,
                       points_to_ego, transform_to_ego, wrap_angle)

C_MIN = 0.6
D_SPLIT = 8.0
ALPHA_RANGE = (0.2, 1.0)
P_LATERAL = 0.8


class Direction(str, Enum):
    LATERAL = "Lateral"
    LONGITUDINAL = "Longitudinal"


@dataclass(frozen=True)
class PerturbationProfile:
    alpha: float
    length: int
    direction: Direction
    values: np.ndarray
    side: int = 1  # +1 drifts left/ahead, -1 right/behind


def perturbation_profile(alpha: float, T_h: int, T: int,
                         direction: Direction = Direction.LATERAL, side: int = 1) -> PerturbationProfile:
    """``values[tau] = alpha * sin(pi * tau / (T_h + T))`` for ``tau = 0..T_h+T-1``.

    ``values`` is the displacement magnitude; ``side`` picks which way it is applied.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    if T_h <= 0 or T <= 0:
        raise ValueError("T_h and T must be positive")
    n = T_h + T
    values = alpha * np.sin(math.pi * np.arange(n) / n)
    values.setflags(write=False)
    return PerturbationProfile(float(alpha), n, Direction(direction), values, int(side))


def _offset_dirs(poses: np.ndarray, direction: Direction) -> np.ndarray:
    psi = poses[:, 2]
    if direction is Direction.LATERAL:
        return np.column_stack([-np.sin(psi), np.cos(psi)])
    return np.column_stack([np.cos(psi), np.sin(psi)])


def _displace(poses: np.ndarray, shifts: np.ndarray, direction: Direction, min_step: float = 1e-6):
    """Shift positions along the pose normals/tangents and carry heading changes over.

    Headings move by the change in finite-difference heading the shift causes, so
    a zero shift leaves the poses bit-identical. Where the original path does
    not move, the heading is kept as is.
    """
    shifted_xy = poses[:, :2] + shifts[:, None] * _offset_dirs(poses, direction)
    fd_old = heading_from_positions(poses[:, :2])
    fd_new = heading_from_positions(shifted_xy)
    step = np.linalg.norm(np.diff(poses[:, :2], axis=0), axis=1)
    moving = np.concatenate([step, step[-1:]]) > min_step if len(poses) > 1 else np.zeros(1, bool)
    dpsi = np.where(moving, wrap_angle(fd_new - fd_old), 0.0)
    psi = np.where(dpsi != 0.0, wrap_angle(poses[:, 2] + dpsi), poses[:, 2])
    return np.column_stack([shifted_xy, psi])


def perturb_trajectory(world_traj: Trajectory, profile: PerturbationProfile) -> Trajectory:
    """Displace pose ``tau`` by ``side * values[tau]`` along the path normal or tangent."""
    if len(world_traj) != profile.length:
        raise LengthMismatch(f"trajectory has {len(world_traj)} poses, profile {profile.length}")
    out = _displace(world_traj.poses, profile.side * np.asarray(profile.values), profile.direction)
    return Trajectory(out, world_traj.rate_hz, world_traj.frame_id)


def recovery_shifts(profile: PerturbationProfile, T_h: int, T: int) -> np.ndarray:
    """Sine tail applied to the ``T`` future waypoints.

    Waypoint ``j`` takes the profile at ``T_h + j * T / (T - 1)``: it starts at
    the drift of the current pose and reaches zero on the last waypoint, so
    the supervision rejoins the expert path exactly at the horizon end.
    """
    n = T_h + T
    amp = profile.side * profile.alpha
    if T == 1:
        return np.array([amp * math.sin(math.pi * T_h / n)])
    tau = T_h + np.arange(T) * (T / (T - 1))
    shifts = amp * np.sin(math.pi * tau / n)
    shifts[-1] = 0.0
    return shifts


@dataclass
class CorrectivePair:
    frames: np.ndarray  # (T_h + 1, H, W, 3) in [0, 1]
    coverage: np.ndarray  # (T_h + 1,) covered fraction per frame
    perturbed_world: Trajectory  # full displaced window
    recovery_future: Trajectory  # ego frame of the displaced current pose
    recovery_world: Trajectory
    goal_xy: np.ndarray
    source_id: str
    alpha: float
    direction: Direction
    side: int = 1


def sample_perturbation(rng: np.random.Generator, alpha_range=ALPHA_RANGE, p_lateral: float = P_LATERAL):
    """``(alpha, direction, side)``; both sides are equally likely."""
    alpha = float(rng.uniform(*alpha_range))
    direction = Direction.LATERAL if rng.random() < p_lateral else Direction.LONGITUDINAL
    side = 1 if rng.random() < 0.5 else -1
    return alpha, direction, side


def synthesize_corrective_pair(sample: TrainingSample, cam: CameraModel, alpha: float,
                               direction: Direction, T_h: int | None = None,
                               c_min: float = C_MIN, splat_px: int = DEFAULT_SPLAT_PX,
                               rgb=None, depth=None, side: int = 1) -> CorrectivePair:
    """Re-render a sample's observations under drift and build the recovery label.

    Each observed frame ``tau`` is unprojected in the robot frame at its raw
    pose and rendered from that pose moved by the displacement the drift
    applies to window pose ``tau``.
    """
    rgb = sample.frames if rgb is None else rgb
    depth = sample.depth if depth is None else depth
    if rgb is None or depth is None:
        raise ValueError("sample carries no frames/depth to re-render")
    win = sample.window_world
    raw = sample.raw_world if sample.raw_world is not None else win
    T_h = len(sample.history) if T_h is None else T_h
    T = len(sample.future)
    if len(win) != T_h + T:
        raise LengthMismatch("window length does not match T_h + T")
    if len(rgb) != T_h + 1 or len(depth) != T_h + 1:
        raise LengthMismatch(f"expected {T_h + 1} frames, got {len(rgb)}/{len(depth)}")

    profile = perturbation_profile(alpha, T_h, T, direction, side)
    pert = perturb_trajectory(win, profile)
    disp = pert.poses - win.poses
    disp[:, 2] = wrap_angle(disp[:, 2])

    frames = np.empty((T_h + 1, cam.height, cam.width, 3))
    cover = np.empty(T_h + 1)
    for tau in range(T_h + 1):
        img = rgb[tau]
        img = img / 255.0 if img.dtype == np.uint8 else np.asarray(img, dtype=np.float64)
        cloud = unproject(depth[tau], img, cam)
        src = raw.pose(tau)
        view = Pose(src.x + disp[tau, 0], src.y + disp[tau, 1], src.psi + disp[tau, 2])
        rel = points_to_ego(np.array([[view.x, view.y]]), src)[0]
        rel_pose = Pose(float(rel[0]), float(rel[1]), wrap_angle(view.psi - src.psi))
        frames[tau], covered = splat_render(cloud, cam, rel_pose, splat_px=splat_px)
        cover[tau] = covered.mean()
        if cover[tau] < c_min:
            raise InsufficientCoverage(float(cover[tau]), c_min)

    fut_world = win.poses[T_h:]
    rec_world = _displace(fut_world, recovery_shifts(profile, T_h, T), profile.direction)
    # the last waypoint is pinned to the expert endpoint
    rec_world[-1, :2] = fut_world[-1, :2]
    rec_world = Trajectory(rec_world, win.rate_hz, win.frame_id)
    cur = pert.pose(T_h)
    goal_world = points_from_ego(np.asarray(sample.goal_xy)[None], win.pose(T_h))
    goal_xy = points_to_ego(goal_world, cur)[0]
    return CorrectivePair(frames, cover, pert, transform_to_ego(rec_world, cur), rec_world,
                          goal_xy, sample.sample_id, float(alpha), Direction(direction), int(side))


def corrective_sample(sample: TrainingSample, pair: CorrectivePair, T_h: int | None = None) -> TrainingSample:
    """Wrap a corrective pair as a training sample (frames quantized to 8 bits)."""
    T_h = len(sample.history) if T_h is None else T_h
    ego = transform_to_ego(pair.perturbed_world, pair.perturbed_world.pose(T_h))
    return TrainingSample(
        sample_id=f"{sample.sample_id}/c",
        history=ego[:T_h],
        future=pair.recovery_future,
        goal=encode_goal(pair.goal_xy),
        goal_xy=pair.goal_xy,
        cam=sample.cam,
        provenance="corrective",
        behavior=sample.behavior,
        log_id=sample.log_id,
        start=sample.start,
        window_world=pair.perturbed_world,
        raw_world=None,
        frames=np.clip(np.rint(pair.frames * 255.0), 0, 255).astype(np.uint8),
        depth=None,
        meta={"alpha": pair.alpha, "direction": pair.direction.value, "side": pair.side,
              "coverage": float(pair.coverage.min())},
    )


# -- sensor augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class RelightParams:
    gain: float = 1.0
    gamma: float = 1.0
    tint: tuple = (1.0, 1.0, 1.0)
    strength_f: float = 0.1
    strength_b: float = 0.5

    def __post_init__(self):
        if not self.gain > 0 or not self.gamma > 0:
            raise ValueError("gain and gamma must be positive")
        if len(self.tint) != 3:
            raise ValueError("tint needs three channels")
        if not 0.0 <= self.strength_f <= self.strength_b <= 1.0:
            raise ValueError("need 0 <= strength_f <= strength_b <= 1")


def sample_relight_params(rng: np.random.Generator, strength_f: float = 0.1,
                          strength_b: float = 0.5) -> RelightParams:
    return RelightParams(gain=float(rng.uniform(0.6, 1.4)), gamma=float(rng.uniform(0.7, 1.4)),
                         tint=tuple(float(t) for t in rng.uniform(0.8, 1.2, size=3)),
                         strength_f=strength_f, strength_b=strength_b)


def _check_pair(rgb, depth):
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if rgb.shape[:2] != depth.shape or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionMismatch(f"rgb {rgb.shape} vs depth {depth.shape}")
    return rgb, depth


def split_foreground(rgb, depth, d_split: float = D_SPLIT):
    """``(mask, I_f, I_b)`` with mask = valid depth nearer than ``d_split``; off-mask pixels are 0."""
    rgb, depth = _check_pair(rgb, depth)
    with np.errstate(invalid="ignore"):
        mask = valid_depth_mask(depth) & (depth < d_split)
    fg = np.where(mask[..., None], rgb, 0.0)
    bg = np.where(mask[..., None], 0.0, rgb)
    return mask, fg, bg


def relight(img, strength: float, params: RelightParams) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lit = np.clip(np.asarray(params.tint) * (params.gain * np.power(img, params.gamma)), 0.0, 1.0)
    return (1.0 - strength) * img + strength * lit


def relight_blend(rgb, depth, params: RelightParams, d_split: float = D_SPLIT) -> np.ndarray:
    """Foreground relit at ``strength_f``, background at ``strength_b``, joined on the depth mask."""
    mask, fg, bg = split_foreground(rgb, depth, d_split)
    out = np.where(mask[..., None], relight(fg, params.strength_f, params),
                   relight(bg, params.strength_b, params))
    return np.clip(out, 0.0, 1.0)


def relit_sample(sample: TrainingSample, params: RelightParams, d_split: float = D_SPLIT) -> TrainingSample:
    if sample.frames is None or sample.depth is None:
        raise ValueError("sample carries no frames/depth to relight")
    frames = np.stack([relight_blend(np.asarray(f, dtype=np.float64) / 255.0, d, params, d_split)
                       for f, d in zip(sample.frames, sample.depth)])
    return TrainingSample(
        sample_id=f"{sample.sample_id}/r",
        history=sample.history, future=sample.future, goal=sample.goal, goal_xy=sample.goal_xy,
        cam=sample.cam, provenance="relit", behavior=sample.behavior, log_id=sample.log_id,
        start=sample.start, window_world=sample.window_world, raw_world=sample.raw_world,
        frames=np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8), depth=sample.depth,
        meta={"gain": params.gain, "gamma": params.gamma, "tint": params.tint},
    )


# -- expansion driver and manifest ----------------------------------------------------------

@dataclass
class ExpansionStats:
    corrective: int = 0
    relit: int = 0
    low_coverage: int = 0


def expand_samples(samples, cam: CameraModel, seed=0, corrective: bool = True, relight_set: bool = False,
                   alpha_range=ALPHA_RANGE, p_lateral: float = P_LATERAL, c_min: float = C_MIN,
                   splat_px: int = DEFAULT_SPLAT_PX, d_split: float = D_SPLIT, fraction: float = 1.0):
    """Synthesize corrective and/or relit copies of each sample.

    Each sample draws from its own stream ``(seed, index)``, so results do not
    depend on processing order. Returns ``(new_samples, stats)``; originals
    are not included.
    """
    out = []
    stats = ExpansionStats()
    for i, smp in enumerate(samples):
        rng = np.random.default_rng([int(seed), i])
        take = rng.random() < fraction
        alpha, direction, side = sample_perturbation(rng, alpha_range, p_lateral)
        params = sample_relight_params(rng)
        if not take:
            continue
        if corrective:
            try:
                pair = synthesize_corrective_pair(smp, cam, alpha, direction, c_min=c_min, splat_px=splat_px,
                                                  side=side)
            except InsufficientCoverage:
                stats.low_coverage += 1
            else:
                out.append(corrective_sample(smp, pair))
                stats.corrective += 1
        if relight_set:
            out.append(relit_sample(smp, params, d_split))
            stats.relit += 1
    return out, stats


MANIFEST_HEADER = "#EXPAND v1"


def write_manifest(path, rows) -> None:
    """Rows are ``(sample_id, source_id, provenance, alpha, direction, frames_path, traj_path)``.

    ``alpha`` is signed here: its sign is the drift side.
    """
    lines = [MANIFEST_HEADER + " fields=sample_id,source_id,provenance,alpha,direction,frames,supervision"]
    for r in rows:
        sid, src, prov, alpha, direction, fpath, tpath = r
        lines.append(f"{sid} {src} {prov} {float(alpha)!r} {direction} {fpath} {tpath}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(MANIFEST_HEADER):
        raise ValueError(f"{path}: missing {MANIFEST_HEADER} header")
    rows = []
    for line in text[1:]:
        if line.strip():
            sid, src, prov, alpha, direction, fpath, tpath = line.split()
            rows.append((sid, src, prov, float(alpha), direction, fpath, tpath))
    return rows
