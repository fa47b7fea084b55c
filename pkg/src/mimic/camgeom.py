"""Pinhole camera, depth unprojection and z-buffered splat reprojection.

Camera optical frame: x right, y down, z forward. Robot frame: x forward,
y left, z up. Depth values are z-depth along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionMismatch, FormatError
from .trajcore import Pose

# columns are the optical axes expressed in the robot frame
_OPTICAL_TO_ROBOT = np.array([[0.0, 0.0, 1.0],
                              [-1.0, 0.0, 0.0],
                              [0.0, -1.0, 0.0]])

HOLE_FILL = 0.5
DEFAULT_SPLAT_PX = 2
DEFAULT_D_MAX = 50.0


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class Rigid:
    """``p_dst = R @ p_src + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __matmul__(self, other: "Rigid") -> "Rigid":
        return Rigid(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Rigid":
        Rt = self.R.T
        return Rigid(Rt, -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @classmethod
    def from_pose(cls, pose: Pose) -> "Rigid":
        """Robot frame at ``pose`` -> frame the pose is expressed in."""
        return cls(rot_z(pose.psi), np.array([pose.x, pose.y, 0.0]))


@dataclass(frozen=True)
class Extrinsic:
    """Camera mounting relative to the robot center (meters, radians).

    Positive pitch tilts the optical axis down.
    """

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def camera_to_robot(self) -> Rigid:
        R = rot_z(self.yaw) @ rot_y(self.pitch) @ rot_x(self.roll) @ _OPTICAL_TO_ROBOT
        return Rigid(R, np.array([self.tx, self.ty, self.tz]))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Extrinsic = Extrinsic()

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def feature_vector(self) -> np.ndarray:
        e = self.extrinsic
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                         e.tx, e.ty, e.tz, e.yaw, e.pitch, e.roll, 0.0, 0.0, 0.0, 0.0])

    @classmethod
    def from_feature_vector(cls, vec) -> "CameraModel":
        f = [float(v) for v in vec]
        if len(f) != 16:
            raise DimensionMismatch("camera feature vector must have 16 entries")
        return cls(f[0], f[1], f[2], f[3], int(f[4]), int(f[5]), Extrinsic(*f[6:12]))

    def project(self, p_cam: np.ndarray):
        p = np.asarray(p_cam, dtype=np.float64)
        z = p[..., 2]
        return self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy, z

    def pixel_rays(self) -> np.ndarray:
        """Optical-frame ray per pixel with unit z component, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                         np.ones_like(uu)], axis=-1)


def default_camera(size: int = 32) -> CameraModel:
    """Square 90-degree camera, 0.8 m up, pitched 0.25 rad down."""
    half = size / 2.0
    return CameraModel(fx=half, fy=half, cx=half - 0.5, cy=half - 0.5, width=size, height=size,
                       extrinsic=Extrinsic(tx=0.2, ty=0.0, tz=0.8, pitch=0.25))


@dataclass(frozen=True)
class ColoredPointCloud:
    xyz: np.ndarray
    rgb: np.ndarray
    frame_id: str = "robot"

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def transformed(self, tf: Rigid, frame_id: str) -> "ColoredPointCloud":
        return ColoredPointCloud(tf.apply(self.xyz), self.rgb, frame_id)


def compose_rigid(view_pose: Pose, extrinsic: Extrinsic) -> Rigid:
    """World -> camera transform for a robot at ``view_pose``."""
    return (Rigid.from_pose(view_pose) @ extrinsic.camera_to_robot()).inverse()


def _check_frames(depth, rgb, cam):
    depth = np.asarray(depth, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise DimensionMismatch(f"depth {depth.shape} vs camera {(cam.height, cam.width)}")
    if rgb.shape != (cam.height, cam.width, 3):
        raise DimensionMismatch(f"rgb {rgb.shape} vs camera {(cam.height, cam.width, 3)}")
    return depth, rgb


def valid_depth_mask(depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


def unproject(depth, rgb, cam: CameraModel) -> ColoredPointCloud:
    """Colored point cloud in the robot frame from valid pixels, row-major order."""
    depth, rgb = _check_frames(depth, rgb, cam)
    valid = valid_depth_mask(depth)
    d = depth[valid]
    p_cam = cam.pixel_rays()[valid] * d[:, None]
    p_robot = cam.extrinsic.camera_to_robot().apply(p_cam)
    return ColoredPointCloud(p_robot, rgb[valid].copy(), "robot")


def splat_render(cloud: ColoredPointCloud, cam: CameraModel, view_pose: Pose,
                 splat_px: int = DEFAULT_SPLAT_PX, near: float = 1e-3, fill: float = HOLE_FILL):
    """Render ``cloud`` (expressed in the frame of ``view_pose``) into ``cam``.

    Returns ``(rgb, coverage)``. Uncovered pixels are set to ``fill`` gray.
    """
    tf = compose_rigid(view_pose, cam.extrinsic)
    p = tf.apply(cloud.xyz) if len(cloud) else np.zeros((0, 3))
    front = p[:, 2] > near
    p = p[front]
    u, v, z = cam.project(p)
    image, covered = kernels.splat_zbuffer(u, v, z, cloud.rgb[front], cam.width, cam.height, splat_px)
    image[~covered] = fill
    return image, covered


# -- file formats ---------------------------------------------------------------

DEPTH_MAGIC = b"MDPT1"


def write_depth(path, depth) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    payload = np.nan_to_num(depth, nan=0.0).astype("<f4").tobytes()
    Path(path).write_bytes(DEPTH_MAGIC + f"\n{w} {h}\n".encode("ascii") + payload)


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(DEPTH_MAGIC):
        raise FormatError(f"{path}: bad depth magic")
    rest = raw[len(DEPTH_MAGIC):].lstrip(b" \n")
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing dimension line")
    try:
        w, h = (int(t) for t in rest[:nl].split())
    except ValueError:
        raise FormatError(f"{path}: bad dimension line") from None
    payload = rest[nl + 1:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)


def to_uint8(rgb) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb) -> None:
    img = rgb if np.asarray(rgb).dtype == np.uint8 else to_uint8(rgb)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_ppm(path, as_float: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    # magic, width, height, maxval separated by whitespace (comments allowed)
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0 if as_float else img.copy()
