"""Synthetic sidewalk worlds, expert demonstrations and an analytic renderer.

A world is a curved sidewalk (centerline polyline) bordered by grass and two
facade walls, with axis-aligned box obstacles beside the walking corridor.
Rendering is exact ray casting against the ground plane, boxes and wall
quads, so depth maps agree with the pinhole model in :mod:`camgeom`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .camgeom import CameraModel, Rigid, read_depth, read_ppm, write_depth, write_ppm, DEFAULT_D_MAX
from .errors import FormatError, Infeasible
from .trajcore import (Pose, Trajectory, cumulative_arc_length, ego_states_from_trajectory,
                       interpolate_along, points_from_ego, points_to_ego, read_trajectory,
                       transform_to_ego, wrap_angle, write_trajectory)

SKY_COLOR = np.array([0.65, 0.78, 0.95])
WALL_COLOR = np.array([0.55, 0.45, 0.40])
SIDEWALK_GRAY = 0.62
GRASS_COLOR = np.array([0.25, 0.50, 0.20])

CENTERLINE_STEP = 0.25
WALL_STEP = 8  # centerline vertices per wall segment (2 m)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    sx: float
    sy: float
    sz: float
    color: tuple

    def bounds(self):
        return (np.array([self.cx - self.sx / 2, self.cy - self.sy / 2, 0.0]),
                np.array([self.cx + self.sx / 2, self.cy + self.sy / 2, self.sz]))

    def distance_xy(self, pts: np.ndarray) -> np.ndarray:
        """Planar distance from points to the box footprint (0 inside)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        dx = np.maximum(np.abs(pts[:, 0] - self.cx) - self.sx / 2, 0.0)
        dy = np.maximum(np.abs(pts[:, 1] - self.cy) - self.sy / 2, 0.0)
        return np.hypot(dx, dy)


@dataclass(frozen=True, eq=False)
class World:
    centerline: np.ndarray
    boxes: tuple = ()
    half_width: float = 1.5
    wall_offset: float = 4.0
    wall_height: float = 3.0
    texture_seed: int = 0
    difficulty: float = 0.0
    seed: int = 0
    _walls: tuple = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        cl = np.array(self.centerline, dtype=np.float64)
        cl.setflags(write=False)
        object.__setattr__(self, "centerline", cl)
        object.__setattr__(self, "_walls", _wall_segments(cl, self.wall_offset))

    @property
    def walls(self):
        """Wall segments as ``(p0 (S, 2), p1 (S, 2))``."""
        return self._walls

    def lateral_distance(self, pts) -> np.ndarray:
        return polyline_distance(self.centerline, pts)

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (np.array_equal(self.centerline, other.centerline) and self.boxes == other.boxes
                and (self.half_width, self.wall_offset, self.wall_height, self.texture_seed,
                     self.difficulty, self.seed)
                == (other.half_width, other.wall_offset, other.wall_height, other.texture_seed,
                    other.difficulty, other.seed))

    __hash__ = None


@dataclass(frozen=True)
class Scenario:
    world: World
    expert: Trajectory
    camera: CameraModel
    scenario_id: str = "s0000"


def polyline_normals(xy: np.ndarray) -> np.ndarray:
    """Left-pointing unit normals at each vertex (central differences)."""
    xy = np.asarray(xy, dtype=np.float64)
    t = np.gradient(xy, axis=0)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return np.column_stack([-t[:, 1], t[:, 0]])


def _wall_segments(cl: np.ndarray, offset: float):
    n = polyline_normals(cl)
    p0s, p1s = [], []
    for side in (1.0, -1.0):
        pts = cl + side * offset * n
        idx = list(range(0, len(pts), WALL_STEP))
        if idx[-1] != len(pts) - 1:
            idx.append(len(pts) - 1)
        sub = pts[idx]
        p0s.append(sub[:-1])
        p1s.append(sub[1:])
    return np.concatenate(p0s), np.concatenate(p1s)


def polyline_distance(poly: np.ndarray, pts) -> np.ndarray:
    return kernels.polyline_distance(poly, pts)


def polyline_project(poly: np.ndarray, pt) -> tuple[float, float]:
    """Arc-length coordinate and distance of the closest polyline point."""
    pt = np.asarray(pt, dtype=np.float64).reshape(1, 2)
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-18)
    t = np.clip(np.sum((pt - a) * ab, axis=1) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    dist = np.linalg.norm(pt - closest, axis=1)
    k = int(np.argmin(dist))
    s = cumulative_arc_length(poly)
    return float(s[k] + t[k] * math.sqrt(denom[k])), float(dist[k])


# -- generation -------------------------------------------------------------------

def _centerline(rng, difficulty: float, length: float) -> np.ndarray:
    headings = []
    psi = 0.0
    n_first = int(6.0 / CENTERLINE_STEP)
    headings.extend([psi] * n_first)
    sign = rng.choice([-1.0, 1.0])
    while len(headings) * CENTERLINE_STEP < length:
        turn = sign * rng.uniform(0.5, 1.0) * difficulty * (math.pi / 2)
        radius = rng.uniform(6.0, 10.0)
        n_arc = max(1, int(abs(turn) * radius / CENTERLINE_STEP))
        for _ in range(n_arc):
            psi += turn / n_arc
            headings.append(psi)
        headings.extend([psi] * int(rng.uniform(4.0, 8.0) / CENTERLINE_STEP))
        sign = -sign if rng.random() < 0.7 else sign
    n = int(length / CENTERLINE_STEP) + 1
    h = np.array(headings[: n - 1])
    steps = CENTERLINE_STEP * np.column_stack([np.cos(h), np.sin(h)])
    return np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])


def generate_world(seed: int, difficulty: float, length: float = 45.0,
                   r_robot: float = 0.4, max_jitter: float = 0.2) -> World:
    """Deterministic world per ``(seed, difficulty)``.

    ``difficulty`` in [0, 1] scales centerline curvature and obstacle count;
    0 yields an empty straight corridor.
    """
    difficulty = float(np.clip(difficulty, 0.0, 1.0))
    rng = np.random.default_rng([seed, 7001])
    cl = _centerline(rng, difficulty, length)
    normals = polyline_normals(cl)
    s = cumulative_arc_length(cl)
    n_boxes = int(round(12 * difficulty))
    boxes = []
    tries = 0
    while len(boxes) < n_boxes and tries < 200 * max(n_boxes, 1):
        tries += 1
        s_box = rng.uniform(8.0, s[-1] - 2.0)
        k = int(np.searchsorted(s, s_box))
        side = rng.choice([-1.0, 1.0])
        off = rng.uniform(1.2, 3.0)
        c = cl[k] + side * off * normals[k]
        sx, sy = rng.uniform(0.4, 1.0, size=2)
        sz = rng.uniform(0.5, 1.5)
        color = tuple(float(v) for v in rng.uniform(0.15, 0.95, size=3))
        box = Box(float(c[0]), float(c[1]), float(sx), float(sy), float(sz), color)
        # keep the walking corridor free and stay clear of the facades
        if np.min(box.distance_xy(cl)) < r_robot + max_jitter + 0.1:
            continue
        if np.max(polyline_distance(cl, _box_corners(box))) > 4.0 - 0.2:
            continue
        if any(_boxes_overlap(box, b) for b in boxes):
            continue
        boxes.append(box)
    return World(cl, tuple(boxes), texture_seed=int(rng.integers(0, 2**31 - 1)),
                 difficulty=difficulty, seed=int(seed))


def _box_corners(b: Box) -> np.ndarray:
    return np.array([[b.cx + sx * b.sx / 2, b.cy + sy * b.sy / 2] for sx in (-1, 1) for sy in (-1, 1)])


def _boxes_overlap(a: Box, b: Box, margin: float = 0.2) -> bool:
    return (abs(a.cx - b.cx) < (a.sx + b.sx) / 2 + margin
            and abs(a.cy - b.cy) < (a.sy + b.sy) / 2 + margin)


def _jitter_fn(rng, amplitude: float):
    freqs = rng.uniform(0.05, 0.2, size=2)
    phases = rng.uniform(0, 2 * math.pi, size=2)
    weights = rng.uniform(0.3, 0.7, size=2)
    weights = weights / weights.sum()

    def f(s):
        s = np.asarray(s, dtype=np.float64)
        return amplitude * sum(w * np.sin(2 * math.pi * fr * s + ph)
                               for w, fr, ph in zip(weights, freqs, phases))
    return f


def _smooth_step(x):
    x = np.clip(x, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(math.pi * x)


def plan_expert(world: World, seed: int, duration_s: float = 30.0, rate_hz: float = 5.0,
                r_robot: float = 0.4, stop_p: float = 0.5, abnormal_p: float = 0.0,
                max_jitter: float = 0.2) -> Trajectory:
    """Smooth corridor-following demonstration at about 1 m/s.

    The expert may pause (``stop_p``). With probability ``abnormal_p`` an
    abnormal episode is injected: spinning in place or reversing, the two
    patterns curation is meant to filter.
    """
    rng = np.random.default_rng([seed, 7002])
    cl = world.centerline
    s_cl = cumulative_arc_length(cl)
    normals = polyline_normals(cl)
    amp = max_jitter * 0.75 * min(1.0, 2.0 * world.difficulty)
    jitter = _jitter_fn(rng, amp)
    n = int(round(duration_s * rate_hz))
    dt = 1.0 / rate_hz
    t = np.arange(n) * dt
    v0 = rng.uniform(0.9, 1.1)
    v = np.full(n, v0)
    stop = None
    if rng.random() < stop_p:
        t0 = rng.uniform(6.0, 18.0)
        dur = rng.uniform(2.0, 9.0)
        stop = (t0, t0 + dur)
        ramp_down = _smooth_step((t - (t0 - 1.0)) / 1.0)
        ramp_up = _smooth_step((t - (t0 + dur)) / 1.0)
        v = v0 * (1.0 - ramp_down + ramp_up)
    abnormal = None
    if rng.random() < abnormal_p:
        abnormal = rng.choice(["spin", "reverse"])
        if abnormal == "reverse":
            t0 = rng.uniform(8.0, 20.0)
            win = (t >= t0) & (t < t0 + 2.5)
            v = np.where(win, -0.4, v)
        elif stop is None:
            t0 = rng.uniform(8.0, 18.0)
            stop = (t0, t0 + 4.0)
            ramp_down = _smooth_step((t - (t0 - 1.0)) / 1.0)
            ramp_up = _smooth_step((t - (t0 + 4.0)) / 1.0)
            v = v0 * (1.0 - ramp_down + ramp_up)
    s = np.concatenate([[0.5], 0.5 + np.cumsum(v[:-1] * dt)])
    s = np.clip(s, 0.0, s_cl[-1] - 1.0)

    def path_point(sq):
        base, _ = interpolate_along(cl, np.zeros(len(cl)), sq)
        k = np.clip(np.searchsorted(s_cl, sq), 0, len(cl) - 1)
        return base + jitter(sq)[:, None] * normals[k]

    pos = path_point(s)
    eps = 0.05
    tang = path_point(np.minimum(s + eps, s_cl[-1])) - path_point(np.maximum(s - eps, 0.0))
    psi = np.arctan2(tang[:, 1], tang[:, 0])
    if abnormal == "spin":
        t0, t1 = stop
        inside = (t > t0 + 0.5) & (t < t1 - 0.5)
        psi = psi + np.where(inside, 0.5 * np.sin(2 * math.pi * 0.8 * (t - t0)), 0.0)
    for b in world.boxes:
        if np.min(b.distance_xy(pos)) < r_robot:
            raise Infeasible(f"expert path passes within {r_robot} m of an obstacle")
    return Trajectory(np.column_stack([pos, psi]), rate_hz, "world")


# -- rendering --------------------------------------------------------------------

def _hash01(ix, iy, seed):
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (int(seed) * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    return ((h ^ (h >> 16)) & 0xFFFF).astype(np.float64) / 65535.0


def _ray_box(o, d, lo, hi):
    """Slab test; returns entry distance (inf on miss) and hit axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_near = np.max(tmin, axis=-1)
    t_far = np.min(tmax, axis=-1)
    axis = np.argmax(tmin, axis=-1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf), axis


def _ray_walls(o, d, p0, p1, height):
    """Distances to vertical wall quads, (P,) minimum and segment index."""
    e = p1 - p0  # (S, 2)
    dx, dy = d[:, 0:1], d[:, 1:2]
    denom = dx * e[None, :, 1] - dy * e[None, :, 0]  # (P, S)
    w = p0[None] - o[None, None, :2]  # (1, S, 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
        u = (w[..., 0] * dy - w[..., 1] * dx) / denom
        z = o[2] + t * d[:, 2:3]
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0) & (u <= 1) & (z >= 0) & (z <= height)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    return t[np.arange(t.shape[0]), k], k, u[np.arange(t.shape[0]), k]


def cast_rays(world: World, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray. Returns ``(t, kind, aux)``; kind 0 sky, 1 ground, 2 wall, 3+b box b."""
    P = dirs.shape[0]
    best = np.full(P, np.inf)
    kind = np.zeros(P, dtype=np.int64)
    aux = np.zeros(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < -1e-12, -origin[2] / dirs[:, 2], np.inf)
    tg = np.where(tg > 1e-9, tg, np.inf)
    upd = tg < best
    best[upd], kind[upd] = tg[upd], 1
    p0, p1 = world.walls
    tw, _, uw = _ray_walls(origin, dirs, p0, p1, world.wall_height)
    upd = tw < best
    best[upd], kind[upd], aux[upd] = tw[upd], 2, uw[upd]
    for bi, box in enumerate(world.boxes):
        lo, hi = box.bounds()
        tb, axis = _ray_box(origin[None], dirs, lo, hi)
        upd = tb < best
        best[upd], kind[upd], aux[upd] = tb[upd], 3 + bi, axis[upd]
    return best, kind, aux


def render_frame(world: World, cam: CameraModel, pose: Pose, d_max: float = DEFAULT_D_MAX):
    """Ray-cast RGB and z-depth from a robot at ``pose``. Misses and far hits clip to ``d_max``."""
    rays = cam.pixel_rays().reshape(-1, 3)
    T_wc = Rigid.from_pose(pose) @ cam.extrinsic.camera_to_robot()
    dirs = rays @ T_wc.R.T
    origin = T_wc.t
    t, kind, aux = cast_rays(world, origin, dirs)
    depth = np.minimum(t, d_max)
    hit = origin[None] + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    rgb = np.tile(SKY_COLOR, (t.size, 1))

    g = kind == 1
    if np.any(g):
        gp = hit[g, :2]
        lat = world.lateral_distance(gp)
        checker = (np.floor(gp[:, 0]) + np.floor(gp[:, 1])) % 2
        walk = np.clip(SIDEWALK_GRAY + 0.06 * checker - 0.25 * (lat > world.half_width - 0.12), 0, 1)
        noise = _hash01(np.floor(gp[:, 0] * 2), np.floor(gp[:, 1] * 2), world.texture_seed)
        grass = GRASS_COLOR[None] * (0.85 + 0.3 * noise)[:, None]
        col = np.where((lat <= world.half_width)[:, None], walk[:, None] * np.ones(3), grass)
        rgb[g] = col
    w = kind == 2
    if np.any(w):
        stripe = (np.floor(aux[w] * 4) % 2)[:, None]
        band = (hit[w, 2] > 1.0) & (hit[w, 2] < 1.6)
        rgb[w] = WALL_COLOR[None] * (0.9 + 0.15 * stripe) * np.where(band, 0.75, 1.0)[:, None]
    for bi, box in enumerate(world.boxes):
        m = kind == 3 + bi
        if np.any(m):
            shade = np.array([0.85, 0.7, 1.0])[aux[m].astype(np.int64)]
            rgb[m] = np.asarray(box.color)[None] * shade[:, None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)


def render_sequence(world: World, cam: CameraModel, traj: Trajectory, d_max: float = DEFAULT_D_MAX):
    frames = [render_frame(world, cam, traj.pose(i), d_max) for i in range(len(traj))]
    return np.stack([f[0] for f in frames]), np.stack([f[1] for f in frames])


def make_scenario(seed: int, difficulty: float, cam: CameraModel, duration_s: float = 30.0,
                  rate_hz: float = 5.0, abnormal_p: float = 0.0, scenario_id: str | None = None) -> Scenario:
    """World plus expert; re-draws the world (with a derived seed) if the expert is infeasible."""
    for attempt in range(20):
        wseed = seed if attempt == 0 else seed * 1000 + attempt
        world = generate_world(wseed, difficulty)
        try:
            expert = plan_expert(world, seed, duration_s, rate_hz, abnormal_p=abnormal_p)
        except Infeasible:
            continue
        return Scenario(world, expert, cam, scenario_id or f"s{seed:04d}")
    raise Infeasible(f"no feasible scenario for seed {seed}")


# -- scenario bundle ------------------------------------------------------------

def write_world(path, world: World) -> None:
    hw, wo, wh = float(world.half_width), float(world.wall_offset), float(world.wall_height)
    lines = [f"#WORLD v1 seed={world.seed} difficulty={float(world.difficulty)!r} half_width={hw!r} "
             f"wall_offset={wo!r} wall_height={wh!r} "
             f"texture_seed={world.texture_seed}"]
    lines += [f"centerline {float(x)!r} {float(y)!r}" for x, y in world.centerline]
    for b in world.boxes:
        lines.append("box " + " ".join(repr(float(v)) for v in (b.cx, b.cy, b.sx, b.sy, b.sz, *b.color)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_world(path) -> World:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#WORLD v1"):
        raise FormatError(f"{path}: missing #WORLD v1 header")
    hdr = dict(tok.split("=", 1) for tok in text[0].split()[2:])
    cl, boxes = [], []
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "centerline":
            cl.append([float(parts[1]), float(parts[2])])
        elif parts[0] == "box":
            v = [float(p) for p in parts[1:]]
            boxes.append(Box(v[0], v[1], v[2], v[3], v[4], tuple(v[5:8])))
        else:
            raise FormatError(f"{path}: unknown record {parts[0]!r}")
    return World(np.array(cl), tuple(boxes), half_width=float(hdr["half_width"]),
                 wall_offset=float(hdr["wall_offset"]), wall_height=float(hdr["wall_height"]),
                 texture_seed=int(hdr["texture_seed"]), difficulty=float(hdr["difficulty"]),
                 seed=int(hdr["seed"]))


def write_camera(path, cam: CameraModel) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in cam.feature_vector) + "\n")


def read_camera(path) -> CameraModel:
    return CameraModel.from_feature_vector(Path(path).read_text().split())


def write_scenario_bundle(root, scenario: Scenario, rgb=None, depth=None) -> Path:
    """Directory with world.txt, camera.txt, expert.traj, frames/*.ppm|*.depth and manifest.txt."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    write_world(root / "world.txt", scenario.world)
    write_camera(root / "camera.txt", scenario.camera)
    v, omega = ego_states_from_trajectory(scenario.expert)
    write_trajectory(root / "expert.traj", scenario.expert, v, omega)
    if rgb is None or depth is None:
        rgb, depth = render_sequence(scenario.world, scenario.camera, scenario.expert)
    lines = [f"#SCENARIO v1 id={scenario.scenario_id} frames={len(rgb)} "
             f"boxes={len(scenario.world.boxes)}", "world world.txt", "camera camera.txt",
             "trajectory expert.traj"]
    for i in range(len(rgb)):
        write_ppm(root / "frames" / f"{i:04d}.ppm", rgb[i])
        write_depth(root / "frames" / f"{i:04d}.depth", depth[i])
        lines.append(f"frame {i} frames/{i:04d}.ppm frames/{i:04d}.depth")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_scenario_bundle(root, load_frames: bool = True):
    """Returns ``(scenario, v, omega, rgb, depth)``; frames are None if not loaded."""
    root = Path(root)
    lines = (root / "manifest.txt").read_text().splitlines()
    if not lines or not lines[0].startswith("#SCENARIO v1"):
        raise FormatError(f"{root}: bad scenario manifest")
    hdr = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    world = read_world(root / "world.txt")
    cam = read_camera(root / "camera.txt")
    expert, v, omega = read_trajectory(root / "expert.traj")
    rgb = depth = None
    if load_frames:
        frames = [ln.split() for ln in lines if ln.startswith("frame ")]
        rgb = np.stack([read_ppm(root / f[2]) for f in frames])
        depth = np.stack([read_depth(root / f[3]) for f in frames])
    return Scenario(world, expert, cam, hdr["id"]), v, omega, rgb, depth


# -- closed-loop rollout ------------------------------------------------------------

@dataclass
class Observation:
    frames: np.ndarray  # (T_h + 1, H, W, 3), oldest first, current last
    goal_xy: np.ndarray  # ego frame
    camera: CameraModel
    pose: Pose  # world pose, for oracle policies only
    history: np.ndarray | None = None  # (T_h, 3) past poses in the current ego frame, oldest first


@dataclass
class RolloutResult:
    trace: list
    deviations: np.ndarray
    max_deviation: float
    mean_deviation: float
    goal_reached: bool
    steps: int

    @property
    def timed_out(self) -> bool:
        return not self.goal_reached


def unicycle_step(pose: Pose, target_xy, dt: float, v_max: float = 1.5) -> Pose:
    """Follow the circular arc through ``target_xy`` (ego frame) for ``dt`` seconds."""
    x, y = float(target_xy[0]), float(target_xy[1])
    r2 = x * x + y * y
    if r2 < 1e-12:
        return pose
    kappa = 2.0 * y / r2
    if abs(kappa) < 1e-9:
        arc = x
    else:
        arc = 2.0 * math.atan2(y, x) / kappa
    v = float(np.clip(arc / dt, -v_max, v_max))
    s = v * dt
    dpsi = kappa * s
    if abs(dpsi) < 1e-9:
        lx, ly = s, 0.0
    else:
        lx, ly = math.sin(dpsi) / kappa, (1 - math.cos(dpsi)) / kappa
    wx, wy = points_from_ego(np.array([[lx, ly]]), pose)[0]
    return Pose(float(wx), float(wy), pose.psi + dpsi)


def lateral_deviation(expert: Trajectory, xy) -> np.ndarray:
    return polyline_distance(expert.xy, xy)


def rollout(policy: Callable[[Observation], np.ndarray], scenario: Scenario, T_h: int = 16,
            controller_step_s: float = 0.2, max_steps: int | None = None, goal_lookahead_m: float = 3.0,
            goal_radius_m: float = 1.0, init_offset_m: float = 0.0, v_max: float = 1.5) -> RolloutResult:
    """Closed-loop run: render, predict, execute the waypoint one control step ahead, repeat.

    ``policy`` maps an :class:`Observation` to an ego-frame trajectory whose
    waypoint ``j`` lies ``j / rate_hz`` seconds ahead (waypoint 0 = now).
    """
    expert = scenario.expert
    rate = expert.rate_hz
    if max_steps is None:
        max_steps = int((len(expert) - T_h) / (controller_step_s * rate)) + 20
    end_xy = expert.xy[-1]
    s_exp = cumulative_arc_length(expert.xy)
    zero_psi = np.zeros(len(expert))

    hist_times = [k / rate for k in range(T_h)]
    hist_poses = [expert.pose(k) for k in range(T_h)]
    start = expert.pose(T_h)
    if init_offset_m:
        n = np.array([-math.sin(start.psi), math.cos(start.psi)])
        start = Pose(start.x + init_offset_m * n[0], start.y + init_offset_m * n[1], start.psi)
    frame_cache = {}

    def frame_at(i, p):
        if i not in frame_cache:
            frame_cache[i] = render_frame(scenario.world, scenario.camera, p)[0]
        return frame_cache[i]

    times = list(hist_times)
    poses = list(hist_poses)
    now = T_h / rate
    pose = start
    trace = [pose]
    reached = False
    steps = 0
    for steps in range(1, max_steps + 1):
        times.append(now)
        poses.append(pose)
        idx = []
        for k in range(T_h, 0, -1):
            tq = now - k / rate
            idx.append(int(np.argmin(np.abs(np.array(times) - tq))))
        idx.append(len(poses) - 1)
        frames = np.stack([frame_at(i, poses[i]) for i in idx])
        s_here, _ = polyline_project(expert.xy, [pose.x, pose.y])
        goal_w, _ = interpolate_along(expert.xy, zero_psi, np.array([min(s_here + goal_lookahead_m, s_exp[-1])]))
        goal = points_to_ego(goal_w, pose)[0]
        past = Trajectory(np.array([[poses[i].x, poses[i].y, poses[i].psi] for i in idx[:-1]]), rate)
        history = transform_to_ego(past, pose).poses
        obs = Observation(frames, goal, scenario.camera, pose, history)
        traj = np.asarray(policy(obs), dtype=np.float64)
        j = int(round(controller_step_s * rate))
        j = min(max(j, 1), len(traj) - 1)
        pose = unicycle_step(pose, traj[j, :2], controller_step_s, v_max)
        now += controller_step_s
        trace.append(pose)
        if math.hypot(pose.x - end_xy[0], pose.y - end_xy[1]) <= goal_radius_m:
            reached = True
            break
    xy = np.array([[p.x, p.y] for p in trace])
    dev = lateral_deviation(expert, xy)
    return RolloutResult(trace, dev, float(dev.max()), float(dev.mean()), reached, steps)


def expert_replay_policy(scenario: Scenario, T_h: int = 16, horizon: int = 40):
    """Oracle: replays the expert's future from the current time step, relative to the robot."""
    expert = scenario.expert
    calls = [0]

    def policy(obs: Observation) -> np.ndarray:
        k = min(T_h + calls[0], len(expert) - 1)
        calls[0] += 1
        fut = expert.poses[k:k + horizon]
        if len(fut) < horizon:
            fut = np.vstack([fut, np.repeat(fut[-1:], horizon - len(fut), axis=0)])
        return transform_to_ego(Trajectory(fut, expert.rate_hz), obs.pose).poses
    return policy
