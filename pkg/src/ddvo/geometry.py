"""SE(3) poses, pinhole camera model, and pixel warping.

Conventions used throughout the package:

* A ``Pose`` maps points between coordinate frames as ``x_out = R @ x_in + t``.
  Relative poses are written ``T_ab`` meaning "take coordinates expressed in
  frame ``b`` into frame ``a``": ``x_a = T_ab @ x_b``.  World poses kept by the
  tracker follow the same rule (``T_tw`` maps world coordinates into camera
  ``t``); trajectory *files* store the inverse (camera-to-world), see
  :mod:`ddvo.evaluation`.
* Pixel ``(u, v)`` names the center of image cell ``(u, v)``; ``u`` grows to
  the right (columns), ``v`` grows downward (rows).
* All numerics are 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Below this rotation angle, Rodrigues coefficients switch to series form.
SMALL_ANGLE = 1e-8
# log() refuses rotations closer than this to pi.
ANGLE_PI_MARGIN = 1e-6
# Points with camera z below this do not project.
MIN_DEPTH = 1e-6


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


class BehindCamera(ValueError):
    """Point is behind (or numerically on) the camera plane."""


class NonpositiveInverseDepth(ValueError):
    """Inverse depth must be strictly positive."""


def _skew(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of ``m`` with determinant +1."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def rotation_defect(m: np.ndarray) -> float:
    """Max absolute entry deviation of ``m`` from its nearest rotation."""
    return float(np.max(np.abs(np.asarray(m, dtype=np.float64) - nearest_rotation(m))))


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians, via the trace with a clamped arccos."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x_out = R @ x_in + t`` (R: 3x3 rotation, t: 3-vector)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))
        self.R.flags.writeable = False
        self.t.flags.writeable = False

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def matrix34(self) -> np.ndarray:
        """3x4 matrix ``[R | t]`` (row-major KITTI layout)."""
        return np.hstack([self.R, self.t[:, None]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.max(np.abs(self.R.T @ self.R - np.eye(3))) <= tol
        return bool(ortho and abs(np.linalg.det(self.R) - 1.0) <= tol)


@dataclass(frozen=True)
class Twist:
    """se(3) element: rotation vector ``omega`` (rad) and translation part ``v``."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.array(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=np.float64).reshape(3))

    @staticmethod
    def from_vector(x: np.ndarray) -> "Twist":
        x = np.asarray(x, dtype=np.float64).reshape(6)
        return Twist(x[:3], x[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


def _rodrigues_coeffs(theta: float):
    """(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with series fallback."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
    return a, b, c


def se3_exp(xi: Twist) -> Pose:
    """Exponential map se(3) -> SE(3); principal branch (|omega| < pi)."""
    theta = float(np.linalg.norm(xi.omega))
    a, b, c = _rodrigues_coeffs(theta)
    k = _skew(xi.omega)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    vmat = np.eye(3) + b * k + c * k2
    return Pose(r, vmat @ xi.v)


def se3_log(p: Pose) -> Twist:
    """Inverse of :func:`se3_exp`; raises :class:`AngleNearPi` near angle pi."""
    theta = rotation_angle(p.R)
    if theta > np.pi - ANGLE_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} within {ANGLE_PI_MARGIN} of pi")
    if theta < SMALL_ANGLE:
        # R - R^T = 2 sin(theta) [axis]x; for tiny angles vee(R - R^T)/2 = omega + O(t^3)
        omega = np.array([p.R[2, 1] - p.R[1, 2], p.R[0, 2] - p.R[2, 0], p.R[1, 0] - p.R[0, 1]]) / 2.0
        vinv_b = 1.0 / 12.0 + theta * theta / 720.0
    else:
        omega = theta / (2.0 * np.sin(theta)) * np.array(
            [p.R[2, 1] - p.R[1, 2], p.R[0, 2] - p.R[2, 0], p.R[1, 0] - p.R[0, 1]]
        )
        vinv_b = (1.0 - theta * np.cos(theta / 2.0) / (2.0 * np.sin(theta / 2.0))) / (theta * theta)
    k = _skew(omega)
    vinv = np.eye(3) - 0.5 * k + vinv_b * (k @ k)
    return Twist(omega, vinv @ p.t)


def compose(a: Pose, b: Pose) -> Pose:
    """Group composition: ``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Pose(a.R @ b.R, a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    return Pose(a.R.T, -(a.R.T @ a.t))


def constant_motion_extrapolate(t_prev_w: Pose, t_prevprev_w: Pose) -> Pose:
    """Predict the next inter-frame motion as the previous one.

    Arguments are the world-to-camera poses of frames t-1 and t-2; the result
    is ``T_{t-1,t-2}``, reused as the predicted ``T_{t,t-1}``.
    """
    return compose(t_prev_w, inverse(t_prevprev_w))


class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics (pixels) plus image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "CameraModel":
        """Camera for pyramid level ``level`` (each level half the previous).

        Follows the cell-center convention: a level-1 pixel centers on the
        2x2 block it averages, so c' = (c - 0.5) / 2 per level.
        """
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(level):
            fx, fy = fx / 2.0, fy / 2.0
            cx, cy = (cx - 0.5) / 2.0, (cy - 0.5) / 2.0
            w, h = w // 2, h // 2
        return CameraModel(fx, fy, cx, cy, w, h)

    def in_bounds(self, u, v, margin: float = 0.0):
        """True where (u, v) is bilinear-samplable with the given extra margin."""
        return (
            (u >= margin)
            & (u <= self.width - 1 - margin)
            & (v >= margin)
            & (v <= self.height - 1 - margin)
        )


def project(cam: CameraModel, point: np.ndarray) -> Pixel:
    """Pinhole projection of a single camera-frame point; z must exceed MIN_DEPTH."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= MIN_DEPTH:
        raise BehindCamera(f"z = {z} <= {MIN_DEPTH}")
    return Pixel(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)


def project_batch(cam: CameraModel, points: np.ndarray):
    """Vectorized projection: (..., 3) -> ((..., 2) pixels, bool validity).

    Invalid entries (z <= MIN_DEPTH) carry unspecified pixel values.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    uv = np.empty(points.shape[:-1] + (2,))
    uv[..., 0] = cam.fx * points[..., 0] / zs + cam.cx
    uv[..., 1] = cam.fy * points[..., 1] / zs + cam.cy
    return uv, valid


def backproject(cam: CameraModel, p: Pixel, inv_depth: float) -> np.ndarray:
    """Ray through pixel ``p`` at depth ``1/inv_depth``, in camera coordinates."""
    if not inv_depth > 0.0:
        raise NonpositiveInverseDepth(f"inverse depth {inv_depth} <= 0")
    z = 1.0 / inv_depth
    return np.array([(p[0] - cam.cx) / cam.fx * z, (p[1] - cam.cy) / cam.fy * z, z])


def pixel_rays(cam: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Unit-depth ray directions ((u-cx)/fx, (v-cy)/fy, 1) for (...,2) pixels."""
    uv = np.asarray(uv, dtype=np.float64)
    rays = np.empty(uv.shape[:-1] + (3,))
    rays[..., 0] = (uv[..., 0] - cam.cx) / cam.fx
    rays[..., 1] = (uv[..., 1] - cam.cy) / cam.fy
    rays[..., 2] = 1.0
    return rays


def warp_pixel(cam: CameraModel, pose: Pose, p: Pixel, depth: float):
    """Map target pixel ``p`` with known depth into the source view.

    ``pose`` takes target-camera coordinates into source-camera coordinates.
    Returns ``(Pixel, in_bounds flag)``; raises :class:`BehindCamera` when the
    transformed point lands behind the source camera.
    """
    if not depth > 0.0:
        raise NonpositiveInverseDepth(f"depth {depth} <= 0")
    x_src = pose.apply(backproject(cam, p, 1.0 / depth))
    q = project(cam, x_src)
    return q, bool(cam.in_bounds(q.u, q.v))


def warp_grid(cam: CameraModel, pose: Pose, depth: np.ndarray, depth_valid: np.ndarray):
    """Warp every pixel of the target grid through ``pose`` at the given depths.

    Returns ``(uv (H,W,2), z_src (H,W), valid (H,W))``; ``valid`` requires a
    valid input depth, a point in front of the source camera, and an in-bounds
    landing pixel.
    """
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays = pixel_rays(cam, np.stack([u, v], axis=-1))
    safe_depth = np.where(depth_valid, depth, 1.0)
    x_src = pose.apply(rays * safe_depth[..., None])
    uv, in_front = project_batch(cam, x_src)
    valid = depth_valid & in_front & cam.in_bounds(uv[..., 0], uv[..., 1])
    return uv, x_src[..., 2], valid
