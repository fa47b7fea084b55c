"""Planar poses, trajectories and the frame conventions used everywhere.

Convention: x forward, y left, heading psi counter-clockwise from +x and
wrapped to (-pi, pi]. Timestamps are implicit: pose ``i`` of a trajectory
sampled at ``rate_hz`` sits at ``i / rate_hz`` seconds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ZeroLengthPath

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap angle(s) into (-pi, pi]. Works on scalars and arrays."""
    arr = np.asarray(theta, dtype=np.float64)
    out = np.mod(arr + math.pi, TWO_PI) - math.pi
    # mod lands on [-pi, pi); the closed end belongs to +pi
    out = np.where(out <= -math.pi, math.pi, out)
    if np.ndim(theta) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.psi)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])


@dataclass(frozen=True)
class EgoState:
    pose: Pose
    v: float
    omega: float


@dataclass(frozen=True)
class GoalEncoding:
    d: float
    cos_phi: float
    sin_phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.cos_phi, self.sin_phi])


class Trajectory:
    """Immutable pose sequence at a fixed rate, stored as an ``(n, 3)`` array."""

    __slots__ = ("_poses", "rate_hz", "frame_id")

    def __init__(self, poses, rate_hz: float, frame_id: str = "world"):
        arr = np.array(poses, dtype=np.float64).reshape(-1, 3)
        if arr.shape[0] < 1:
            raise ValueError("trajectory needs at least one pose")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trajectory contains non-finite values")
        if not rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        arr[:, 2] = wrap_angle(arr[:, 2])
        arr.setflags(write=False)
        self._poses = arr
        self.rate_hz = float(rate_hz)
        self.frame_id = frame_id

    @classmethod
    def from_poses(cls, poses: Iterable[Pose], rate_hz: float, frame_id: str = "world"):
        return cls([p.as_array() for p in poses], rate_hz, frame_id)

    @property
    def poses(self) -> np.ndarray:
        return self._poses

    @property
    def xy(self) -> np.ndarray:
        return self._poses[:, :2]

    @property
    def psi(self) -> np.ndarray:
        return self._poses[:, 2]

    def pose(self, i: int) -> Pose:
        x, y, psi = self._poses[i]
        return Pose(float(x), float(y), float(psi))

    def __len__(self) -> int:
        return self._poses.shape[0]

    def __getitem__(self, sl: slice) -> "Trajectory":
        if not isinstance(sl, slice):
            raise TypeError("use .pose(i) for single poses")
        return Trajectory(self._poses[sl], self.rate_hz, self.frame_id)

    def arc_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.xy, axis=0), axis=1)))

    def __repr__(self) -> str:
        return f"Trajectory(n={len(self)}, rate_hz={self.rate_hz}, frame_id={self.frame_id!r})"


def _rot(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def transform_to_ego(world_traj: Trajectory, anchor_pose: Pose, frame_id: str = "ego") -> Trajectory:
    """Express ``world_traj`` relative to ``anchor_pose`` (anchor -> origin, heading 0)."""
    d = world_traj.xy - np.array([anchor_pose.x, anchor_pose.y])
    # row-vector form of R(-psi) @ d
    local = d @ _rot(anchor_pose.psi)
    psi = wrap_angle(world_traj.psi - anchor_pose.psi)
    return Trajectory(np.column_stack([local, psi]), world_traj.rate_hz, frame_id)


def transform_from_ego(ego_traj: Trajectory, anchor_pose: Pose, frame_id: str = "world") -> Trajectory:
    """Inverse of :func:`transform_to_ego`."""
    world = ego_traj.xy @ _rot(anchor_pose.psi).T + np.array([anchor_pose.x, anchor_pose.y])
    psi = wrap_angle(ego_traj.psi + anchor_pose.psi)
    return Trajectory(np.column_stack([world, psi]), ego_traj.rate_hz, frame_id)


def points_to_ego(points_xy: np.ndarray, anchor_pose: Pose) -> np.ndarray:
    d = np.asarray(points_xy, dtype=np.float64) - np.array([anchor_pose.x, anchor_pose.y])
    return d @ _rot(anchor_pose.psi)


def points_from_ego(points_xy: np.ndarray, anchor_pose: Pose) -> np.ndarray:
    p = np.asarray(points_xy, dtype=np.float64)
    return p @ _rot(anchor_pose.psi).T + np.array([anchor_pose.x, anchor_pose.y])


def encode_goal(goal_xy) -> GoalEncoding:
    gx, gy = (float(v) for v in goal_xy)
    d = math.hypot(gx, gy)
    if d == 0.0:
        return GoalEncoding(0.0, 1.0, 0.0)
    phi = math.atan2(gy, gx)  # dividing by d is inexact for subnormal goals
    return GoalEncoding(d, math.cos(phi), math.sin(phi))


def cumulative_arc_length(xy: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def interpolate_along(xy: np.ndarray, psi: np.ndarray, s_query: np.ndarray):
    """Positions and headings at arc-length coordinates ``s_query`` on a polyline.

    Headings take the shortest arc between the bracketing vertices.
    """
    s = cumulative_arc_length(xy)
    s_query = np.clip(np.asarray(s_query, dtype=np.float64), 0.0, s[-1])
    # side="right" - 1 never selects a zero-length segment as the bracket start
    idx = np.searchsorted(s, s_query, side="right") - 1
    idx = np.clip(idx, 0, len(s) - 2)
    seg_len = s[idx + 1] - s[idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(seg_len > 0, (s_query - s[idx]) / seg_len, 0.0)
    f = np.clip(f, 0.0, 1.0)
    pos = xy[idx] + f[:, None] * (xy[idx + 1] - xy[idx])
    dpsi = wrap_angle(psi[idx + 1] - psi[idx])
    heading = wrap_angle(psi[idx] + f * dpsi)
    return pos, heading


def resample_constant_velocity(traj: Trajectory, n_out: int) -> Trajectory:
    """Re-space poses equally in arc length along the input polyline.

    The output spans the same duration, so its rate becomes
    ``rate_hz * (n_out - 1) / (n - 1)``. For a zero-length path a
    :class:`ZeroLengthPath` warning is issued and ``n_out`` copies of the first
    pose are returned.
    """
    if len(traj) < 2 or n_out < 2:
        raise ValueError("resampling needs at least two input and two output poses")
    rate = traj.rate_hz * (n_out - 1) / (len(traj) - 1)
    total = traj.arc_length()
    if total == 0.0:
        warnings.warn(ZeroLengthPath("total arc length is zero"), RuntimeWarning, stacklevel=2)
        return Trajectory(np.repeat(traj.poses[:1], n_out, axis=0), rate, traj.frame_id)
    s_out = np.linspace(0.0, total, n_out)
    pos, heading = interpolate_along(traj.xy, traj.psi, s_out)
    out = np.column_stack([pos, heading])
    out[0] = traj.poses[0]
    out[-1] = traj.poses[-1]
    return Trajectory(out, rate, traj.frame_id)


def heading_from_positions(xy: np.ndarray) -> np.ndarray:
    """Forward-difference headings; the last copies its predecessor, stationary steps yield 0."""
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) < 2:
        return np.zeros(len(xy))
    d = np.diff(xy, axis=0)
    psi = np.arctan2(d[:, 1], d[:, 0])
    return np.concatenate([psi, psi[-1:]])


# -- trajectory log -----------------------------------------------------------

_HEADER = "#TRAJ v1"


def write_trajectory(path, traj: Trajectory, v: Sequence[float] | None = None,
                     omega: Sequence[float] | None = None) -> None:
    """Write the ``#TRAJ v1`` text log. Missing speeds are written as zeros."""
    n = len(traj)
    v = np.zeros(n) if v is None else np.asarray(v, dtype=np.float64)
    omega = np.zeros(n) if omega is None else np.asarray(omega, dtype=np.float64)
    if v.shape != (n,) or omega.shape != (n,):
        raise ValueError("v/omega must match the trajectory length")
    lines = [f"{_HEADER} rate_hz={float(traj.rate_hz)!r} frame={traj.frame_id}"]
    for i, (row, vi, wi) in enumerate(zip(traj.poses.tolist(), v.tolist(), omega.tolist())):
        lines.append(f"{i} {row[0]!r} {row[1]!r} {row[2]!r} {vi!r} {wi!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path):
    """Read a ``#TRAJ v1`` log. Returns ``(trajectory, v, omega)``."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(_HEADER):
        raise FormatError(f"{path}: missing #TRAJ v1 header")
    fields = dict(tok.split("=", 1) for tok in text[0][len(_HEADER):].split())
    try:
        rate = float(fields["rate_hz"])
        frame = fields["frame"]
    except KeyError as exc:
        raise FormatError(f"{path}: header lacks {exc}") from None
    rows = []
    for ln, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise FormatError(f"{path}: no poses")
    arr = np.array(rows)
    if not np.array_equal(arr[:, 0], np.arange(len(arr))):
        raise FormatError(f"{path}: t_index must count 0..n-1")
    return Trajectory(arr[:, 1:4], rate, frame), arr[:, 4].copy(), arr[:, 5].copy()


def ego_states_from_trajectory(traj: Trajectory):
    """Finite-difference speed (signed along heading) and yaw rate per pose."""
    dt = 1.0 / traj.rate_hz
    n = len(traj)
    if n < 2:
        return np.zeros(n), np.zeros(n)
    d = np.diff(traj.xy, axis=0)
    fwd = np.cos(traj.psi[:-1]) * d[:, 0] + np.sin(traj.psi[:-1]) * d[:, 1]
    v = np.concatenate([fwd, fwd[-1:]]) / dt
    w = wrap_angle(np.diff(traj.psi)) / dt
    omega = np.concatenate([w, w[-1:]])
    return v, omega
