"""Turning raw driving logs into training samples.

Steps: behavior labelling and straight-walking downsampling, abnormal segment
filtering, goal definition, and constant-velocity window resampling.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import EmptyInput, TooShort
from .trajcore import (GoalEncoding, Trajectory, cumulative_arc_length, encode_goal,
                       interpolate_along, points_to_ego, resample_constant_velocity,
                       transform_to_ego, wrap_angle)


class Behavior(str, Enum):
    STRAIGHT = "Straight"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    STOP = "Stop"


class GoalMode(str, Enum):
    RANDOM_AHEAD = "RandomAhead"
    SEGMENT_ENDPOINT = "SegmentEndpoint"


@dataclass(frozen=True)
class CurationConfig:
    v_stop: float = 0.1
    theta_turn: float = math.pi / 6
    omega_max: float = 0.5
    v_back: float = 0.05
    n_abn: int = 5
    straight_cap: float = 0.5
    goal_k_min: int = 5
    goal_k_max: int = 20
    seg_n_min: int = 3
    seg_n_max: int = 7


@dataclass
class TrainingSample:
    """One observation/action window.

    ``history`` and ``future`` are in the ego frame of the current pose, which
    is history frame ``T_h`` of the window; ``future[0]`` is that pose, so it
    sits at the origin. ``frames``/``depth`` hold ``T_h + 1`` images, oldest
    first, the last being the current view.
    """

    sample_id: str
    history: Trajectory
    future: Trajectory
    goal: GoalEncoding
    goal_xy: np.ndarray
    cam: np.ndarray
    provenance: str = "original"
    behavior: Behavior = Behavior.STRAIGHT
    log_id: int = 0
    start: int = 0
    window_world: Trajectory | None = None
    raw_world: Trajectory | None = None
    frames: np.ndarray | None = None
    depth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def classify_behavior(segment: Trajectory, v_stop: float = 0.1,
                      theta_turn: float = math.pi / 6) -> Behavior:
    if len(segment) < 2:
        raise TooShort("classification needs at least two poses")
    duration = (len(segment) - 1) / segment.rate_hz
    if segment.arc_length() / duration < v_stop:
        return Behavior.STOP
    turn = float(np.sum(wrap_angle(np.diff(segment.psi))))
    if turn > theta_turn:
        return Behavior.TURN_LEFT
    if turn < -theta_turn:
        return Behavior.TURN_RIGHT
    return Behavior.STRAIGHT


def max_straight_count(n_other: int, cap: float) -> int:
    """Largest ``n_s`` with ``n_s <= cap * (n_s + n_other)``."""
    if cap >= 1.0:
        return np.iinfo(np.int64).max
    if cap <= 0.0:
        return 0
    n = int(math.floor(cap * n_other / (1.0 - cap)))
    while (n + 1) <= cap * (n + 1 + n_other):
        n += 1
    while n > 0 and n > cap * (n + n_other):
        n -= 1
    return n


def balance_by_behavior(labels, straight_cap: float = 0.5, seed=0) -> np.ndarray:
    """Indices kept after randomly downsampling Straight samples.

    Every non-Straight sample is kept; Straight ones are capped so they make up
    at most ``straight_cap`` of the output. Returned indices are sorted.
    """
    labels = [Behavior(lb) for lb in labels]
    if not labels:
        raise EmptyInput("no samples to balance")
    idx = np.arange(len(labels))
    straight = idx[[lb is Behavior.STRAIGHT for lb in labels]]
    other = idx[[lb is not Behavior.STRAIGHT for lb in labels]]
    n_keep = min(len(straight), max_straight_count(len(other), straight_cap))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(straight, size=n_keep, replace=False) if n_keep < len(straight) else straight
    return np.sort(np.concatenate([other, chosen]).astype(np.int64))


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def projected_velocity(traj: Trajectory) -> np.ndarray:
    """Per-step displacement projected on the heading at the step start, in m/s."""
    d = np.diff(traj.xy, axis=0)
    c, s = np.cos(traj.psi[:-1]), np.sin(traj.psi[:-1])
    return (c * d[:, 0] + s * d[:, 1]) * traj.rate_hz


def filter_abnormal(traj: Trajectory, v, omega, cfg: CurationConfig = CurationConfig()):
    """Return ``(keep, reason)``; reason is ``"ok"``, ``"rotation-while-still"`` or ``"backward"``."""
    v = np.asarray(v, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if v.shape != (len(traj),) or omega.shape != (len(traj),):
        raise ValueError("ego states must align with the trajectory")
    spin = (np.abs(omega) > cfg.omega_max) & (np.abs(v) < cfg.v_stop)
    if _longest_run(spin) >= cfg.n_abn:
        return False, "rotation-while-still"
    if len(traj) >= 2 and _longest_run(projected_velocity(traj) < -cfg.v_back) >= cfg.n_abn:
        return False, "backward"
    return True, "ok"


def goal_world_point(traj: Trajectory, t: int, mode: GoalMode, rng: np.random.Generator,
                     cfg: CurationConfig = CurationConfig()) -> np.ndarray:
    n = len(traj)
    mode = GoalMode(mode)
    if mode is GoalMode.RANDOM_AHEAD:
        if t + cfg.goal_k_min > n - 1:
            raise TooShort(f"need {cfg.goal_k_min} frames after t={t}, have {n - 1 - t}")
        k = int(rng.integers(cfg.goal_k_min, cfg.goal_k_max + 1))
        return traj.xy[min(t + k, n - 1)].copy()
    s = cumulative_arc_length(traj.xy)
    if s[-1] <= 0.0:
        raise TooShort("zero-length trajectory cannot be split into segments")
    n_seg = int(rng.integers(cfg.seg_n_min, cfg.seg_n_max + 1))
    ends = s[-1] * np.arange(1, n_seg + 1) / n_seg
    ahead = ends[ends > s[t] + 1e-9]
    if ahead.size == 0:
        raise TooShort(f"no segment endpoint ahead of t={t}")
    pos, _ = interpolate_along(traj.xy, np.zeros(n), ahead[:1])
    return pos[0]


def define_goal(traj: Trajectory, t: int, mode: GoalMode, rng: np.random.Generator,
                cfg: CurationConfig = CurationConfig()) -> np.ndarray:
    """Goal point in the ego frame of pose ``t``.

    RandomAhead picks the pose ``k ~ U{k_min..k_max}`` frames ahead (clamped to
    the log end). SegmentEndpoint splits the path into ``N ~ U{n_min..n_max}``
    equal-arc-length pieces and takes the first endpoint strictly ahead of ``t``.
    """
    g = goal_world_point(traj, t, mode, rng, cfg)
    return points_to_ego(g[None], traj.pose(t))[0]


def window_count(n: int, T_h: int, T: int, stride: int) -> int:
    if n < T_h + T:
        return 0
    return (n - (T_h + T)) // stride + 1


def build_samples(log: Trajectory, T_h: int, T: int, stride: int, seed=0, log_id: int = 0,
                  cam_features=None, frames=None, depth=None,
                  cfg: CurationConfig = CurationConfig()) -> list[TrainingSample]:
    """Sliding windows of ``T_h + T`` poses, each resampled at constant velocity.

    Goals are drawn on the full log (mode chosen 50/50 per window) and
    expressed in the ego frame of the resampled current pose.
    """
    n = len(log)
    N = T_h + T
    if n < N:
        raise TooShort(f"log has {n} poses, windows need {N}")
    if stride < 1:
        raise ValueError("stride must be positive")
    rng = np.random.default_rng([int(seed), int(log_id)])
    cam = np.zeros(16) if cam_features is None else np.asarray(cam_features, dtype=np.float64)
    out = []
    for w in range(window_count(n, T_h, T, stride)):
        s0 = w * stride
        raw = log[s0:s0 + N]
        with warnings.catch_warnings():
            # fully stationary windows legitimately resample to copies
            warnings.simplefilter("ignore", RuntimeWarning)
            win = resample_constant_velocity(raw, N)
        win = Trajectory(win.poses, log.rate_hz, log.frame_id)
        cur = win.pose(T_h)
        ego = transform_to_ego(win, cur)
        mode = GoalMode.RANDOM_AHEAD if rng.random() < 0.5 else GoalMode.SEGMENT_ENDPOINT
        t_log = s0 + T_h
        try:
            g_world = goal_world_point(log, t_log, mode, rng, cfg)
        except TooShort:
            alt = GoalMode.SEGMENT_ENDPOINT if mode is GoalMode.RANDOM_AHEAD else GoalMode.RANDOM_AHEAD
            try:
                g_world = goal_world_point(log, t_log, alt, rng, cfg)
            except TooShort:
                # current pose is the end of the log: nothing lies ahead
                g_world = log.xy[-1].copy()
        goal_xy = points_to_ego(g_world[None], cur)[0]
        sample = TrainingSample(
            sample_id=f"{log_id}:{s0}",
            history=ego[:T_h],
            future=ego[T_h:],
            goal=encode_goal(goal_xy),
            goal_xy=goal_xy,
            cam=cam,
            behavior=classify_behavior(raw[T_h:], cfg.v_stop, cfg.theta_turn),
            log_id=log_id,
            start=s0,
            window_world=win,
            raw_world=raw,
            frames=None if frames is None else frames[s0:s0 + T_h + 1],
            depth=None if depth is None else depth[s0:s0 + T_h + 1],
        )
        out.append(sample)
    return out


@dataclass
class CurationReport:
    windows: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    behavior_in: Counter = field(default_factory=Counter)
    behavior_out: Counter = field(default_factory=Counter)
    too_short_logs: int = 0

    def format(self) -> str:
        lines = [f"windows {self.windows}  kept {self.kept}  too-short logs {self.too_short_logs}",
                 "reason                  dropped"]
        for reason in ("rotation-while-still", "backward", "balance"):
            lines.append(f"{reason:<22}  {self.dropped.get(reason, 0)}")
        lines.append("behavior     before  after")
        for b in Behavior:
            lines.append(f"{b.value:<11}  {self.behavior_in.get(b.value, 0):>6}  "
                         f"{self.behavior_out.get(b.value, 0):>5}")
        return "\n".join(lines)


def curate(logs, T_h: int, T: int, stride: int, seed=0, cfg: CurationConfig = CurationConfig()):
    """Window, filter and balance a collection of logs.

    ``logs`` yields ``(log_id, trajectory, v, omega, cam_features, frames, depth)``
    tuples (frames/depth may be None). Returns ``(samples, report)``.
    """
    report = CurationReport()
    candidates = []
    any_log = False
    for log_id, traj, v, omega, cam, frames, depth in logs:
        any_log = True
        try:
            samples = build_samples(traj, T_h, T, stride, seed, log_id, cam, frames, depth, cfg)
        except TooShort:
            report.too_short_logs += 1
            continue
        for smp in samples:
            report.windows += 1
            sl = slice(smp.start, smp.start + T_h + T)
            keep, reason = filter_abnormal(traj[sl], v[sl], omega[sl], cfg)
            if not keep:
                report.dropped[reason] += 1
                continue
            report.behavior_in[smp.behavior.value] += 1
            candidates.append(smp)
    if not any_log:
        raise EmptyInput("no logs to curate")
    if not candidates:
        return [], report
    keep = balance_by_behavior([c.behavior for c in candidates], cfg.straight_cap, seed)
    report.dropped["balance"] += len(candidates) - len(keep)
    out = [candidates[i] for i in keep]
    for smp in out:
        report.behavior_out[smp.behavior.value] += 1
    report.kept = len(out)
    return out, report
