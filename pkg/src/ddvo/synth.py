"""Deterministic synthetic scenes: textured planes rendered along known camera
paths, with exact depth and pose ground truth.

Textures are band-limited (sums of four smooth sinusoids at incommensurate
frequencies), so bilinear resampling error is bounded and warp-consistency
checks against ground truth are meaningful.

Everything is a pure function of (preset, seed): generating the same sequence
twice produces byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Pose, Twist, compose, inverse, pixel_rays, se3_exp
from .imaging import GrayImage, save_pgm
from .losses import DepthMap, save_depth_raster

PRESETS = ("straight-line", "constant-velocity-arc", "sharp-turn", "stationary", "shaky")

# golden/silver/bronze-ratio multipliers: no two frequencies share a period
_FREQ_MULTIPLIERS = np.array([1.0, 1.6180339887, 2.4142135624, 3.3027756377])

_DEFAULT_FRAMES = {
    "straight-line": 30,
    "constant-velocity-arc": 60,
    "sharp-turn": 30,
    "stationary": 20,
    "shaky": 30,
}


@dataclass(frozen=True)
class PlaneTexture:
    """sum_k a_k sin(fu_k*u + fv_k*v + phi_k) around 0.5, range [0.1, 0.9]."""

    amps: np.ndarray
    freq_u: np.ndarray
    freq_v: np.ndarray
    phases: np.ndarray

    def value(self, u: np.ndarray, v: np.ndarray, sigma: np.ndarray | None = None) -> np.ndarray:
        """Texture intensity; ``sigma`` is an optional per-sample Gaussian
        footprint (texture units) that prefilters each component analytically,
        so grazing views fade to flat gray instead of aliasing."""
        out = np.full_like(np.asarray(u, dtype=np.float64), 0.5)
        for a, fu, fv, ph in zip(self.amps, self.freq_u, self.freq_v, self.phases):
            term = np.sin(fu * u + fv * v + ph)
            if sigma is not None:
                term = term * np.exp(-0.5 * (fu * fu + fv * fv) * sigma * sigma)
            out += a * term
        return out


@dataclass(frozen=True)
class Plane:
    """n . X = offset in world frame; e1/e2 span the plane for texture coords.

    ``bounds`` of (u_lo, u_hi, v_lo, v_hi) in (e1, e2) coordinates restricts
    the plane to a rectangle (a free-standing panel); None means infinite."""

    normal: np.ndarray
    offset: float
    e1: np.ndarray
    e2: np.ndarray
    texture: PlaneTexture
    bounds: tuple = None


@dataclass(frozen=True)
class Scene:
    planes: tuple
    background: float = 0.5


@dataclass(frozen=True)
class CameraPath:
    """Timestamps with world-to-camera poses, plus the shared intrinsics."""

    timestamps: tuple
    poses: tuple
    cam: CameraModel

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timestamps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if len(ts) != len(self.poses):
            raise ValueError("one pose per timestamp")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)


def _plane_basis(normal: np.ndarray):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return n, e1, e2


def _make_texture(rng: np.random.Generator, wavelength: float) -> PlaneTexture:
    """Random texture whose shortest component period is wavelength / 3.3."""
    base = 2.0 * np.pi / wavelength
    omegas = base * _FREQ_MULTIPLIERS
    # pink-ish spectrum: less energy at the highest frequency
    raw = rng.uniform(0.6, 1.0, 4) / _FREQ_MULTIPLIERS
    amps = 0.4 * raw / raw.sum()
    angles = rng.uniform(0.0, 2.0 * np.pi, 4)
    phases = rng.uniform(0.0, 2.0 * np.pi, 4)
    return PlaneTexture(
        amps=amps,
        freq_u=omegas * np.cos(angles),
        freq_v=omegas * np.sin(angles),
        phases=phases,
    )


def make_plane(rng, normal, offset, wavelength, center=None, half_extent=None) -> Plane:
    n, e1, e2 = _plane_basis(normal)
    bounds = None
    if half_extent is not None:
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        cu, cv = float(c @ e1), float(c @ e2)
        bounds = (cu - half_extent[0], cu + half_extent[0], cv - half_extent[1], cv + half_extent[1])
    return Plane(n, float(offset), e1, e2, _make_texture(rng, wavelength), bounds)


_NEAR_CLIP = 0.05


def render_frame(scene: Scene, cam: CameraModel, pose: Pose):
    """Render with per-pixel ray casting; nearest plane wins.

    ``pose`` maps world to camera coordinates. Depth is exact z-depth (the ray
    parameter for unit-z camera rays). Pixels hitting nothing get the
    background intensity and invalid depth.
    """
    uu, vv = np.meshgrid(
        np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64)
    )
    rays_cam = pixel_rays(cam, np.stack([uu, vv], axis=-1))
    dirs = rays_cam @ pose.R  # R^T applied row-wise: camera rays in world frame
    origin = -pose.R.T @ pose.t

    depth = np.full((cam.height, cam.width), np.inf)
    img = np.full((cam.height, cam.width), scene.background)
    dir_norm = np.linalg.norm(dirs, axis=-1)
    focal = 0.5 * (cam.fx + cam.fy)
    for plane in scene.planes:
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            tval = (plane.offset - plane.normal @ origin) / denom
        hit = np.isfinite(tval) & (tval > _NEAR_CLIP) & (tval < depth)
        if not hit.any():
            continue
        points = origin + tval[..., None] * dirs
        pu, pv = points @ plane.e1, points @ plane.e2
        if plane.bounds is not None:
            u_lo, u_hi, v_lo, v_hi = plane.bounds
            hit &= (pu >= u_lo) & (pu <= u_hi) & (pv >= v_lo) & (pv <= v_hi)
            if not hit.any():
                continue
        # pixel footprint on the plane: ray spacing t/f stretched by grazing
        # incidence; sigma ~ half a pixel keeps normal views nearly unfiltered
        spread = tval * dir_norm / (focal * np.maximum(np.abs(denom), 1e-9))
        tex = plane.texture.value(pu, pv, 0.5 * spread)
        depth[hit] = tval[hit]
        img[hit] = tex[hit]

    valid = np.isfinite(depth)
    return GrayImage(np.clip(img, 0.0, 1.0)), DepthMap(np.where(valid, depth, 0.0), valid)


def _default_camera(width: int, height: int) -> CameraModel:
    # ~65 degree horizontal field of view
    f = float(round(width * 0.785))
    return CameraModel(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def _yaw_pose(yaw: float, center: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at ``center`` yawed about world y."""
    c, s = np.cos(yaw), np.sin(yaw)
    r_wc = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return Pose(r_wc.T, -r_wc.T @ np.asarray(center, dtype=np.float64))


def _box_scene(rng, half_x, half_z, floor_y, ceil_y, wavelength) -> Scene:
    return Scene(
        planes=(
            make_plane(rng, (1, 0, 0), half_x, wavelength),
            make_plane(rng, (1, 0, 0), -half_x, wavelength),
            make_plane(rng, (0, 0, 1), half_z, wavelength),
            make_plane(rng, (0, 0, 1), -half_z, wavelength),
            make_plane(rng, (0, 1, 0), floor_y, wavelength * 0.6),
            make_plane(rng, (0, 1, 0), ceil_y, wavelength * 0.6),
        )
    )


def _wall_scene(rng, x_lo, x_hi, z_lo, z_hi, wavelength) -> Scene:
    """Four vertical walls, no floor/ceiling: every surface is seen at
    moderate incidence, so resampling stays unbiased for tracking."""
    return Scene(
        planes=(
            make_plane(rng, (1, 0, 0), x_hi, wavelength),
            make_plane(rng, (1, 0, 0), x_lo, wavelength),
            make_plane(rng, (0, 0, 1), z_hi, wavelength),
            make_plane(rng, (0, 0, 1), z_lo, wavelength),
        )
    )


def _ring_scene(rng, center, wall_radius, n_faces, wavelength, panels=0, panel_radius=None) -> Scene:
    """Vertical walls forming a regular polygon around ``center``: wall
    distance is nearly the same at every heading, so a camera circling
    inside sees a steady depth profile all the way around.

    ``panels`` adds that many free-standing vertical strips just inside the
    wall. A lone plane filling the view leaves the translation direction
    unobservable (any tilt can be traded against it); the panels keep a
    second depth and orientation in sight at every heading."""
    cx, cz = center
    planes = []
    for i in range(n_faces):
        a = 2.0 * np.pi * i / n_faces
        n = (np.cos(a), 0.0, np.sin(a))
        planes.append(make_plane(rng, n, wall_radius + n[0] * cx + n[2] * cz, wavelength))
    r_p = wall_radius - 1.0 if panel_radius is None else panel_radius
    for i in range(panels):
        a = 2.0 * np.pi * (i + 0.5) / panels
        c = np.array([cx + r_p * np.cos(a), 0.0, cz + r_p * np.sin(a)])
        n = (-np.cos(a), 0.0, -np.sin(a))
        planes.append(
            make_plane(rng, n, float(np.dot(n, c)), wavelength * 0.5, center=c, half_extent=(0.45, 1.6))
        )
    return Scene(planes=tuple(planes))


def _corridor_scene(rng, z_end: float) -> Scene:
    return Scene(
        planes=(
            make_plane(rng, (1, 0, 0), 2.0, 1.2),
            make_plane(rng, (1, 0, 0), -2.0, 1.2),
            make_plane(rng, (0, 1, 0), 1.0, 0.9),
            make_plane(rng, (0, 1, 0), -1.5, 0.9),
            make_plane(rng, (0, 0, 1), z_end, 1.6),
        )
    )


def make_scene_and_path(
    preset: str, seed: int, n_frames: int | None = None, width: int = 160, height: int = 120
):
    """Build the scene and ground-truth camera path for a named preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    n = n_frames if n_frames is not None else _DEFAULT_FRAMES[preset]
    if n < 2:
        raise ValueError("a sequence needs at least two frames")
    rng = np.random.default_rng(seed)
    cam = _default_camera(width, height)

    if preset == "straight-line":
        step = 0.12
        scene = _corridor_scene(rng, z_end=step * n + 6.0)
        poses = [_yaw_pose(0.0, (0.0, 0.0, step * k)) for k in range(n)]
    elif preset == "constant-velocity-arc":
        d_yaw, step = 0.02, 0.12
        radius = step / d_yaw
        # camera mounted ~35 deg off the velocity vector, looking at the wall
        # ring it is skirting: every frame sees that wall obliquely, near edge
        # a couple of units away and far edge ~5, so each image carries strong
        # depth relief and a few pixels of parallax per frame. 32 faces keep
        # at least two distinct plane orientations in every view; a single
        # dominant plane admits a second, twisted two-view interpretation
        # that can out-score the true one photometrically
        mount = -0.61
        scene = _ring_scene(rng, (radius, 0.0), radius + 2.0, 32, 3.0)
        poses = [
            _yaw_pose(
                k * d_yaw + mount,
                (radius * (1 - np.cos(k * d_yaw)), 0.0, radius * np.sin(k * d_yaw)),
            )
            for k in range(n)
        ]
    elif preset == "sharp-turn":
        scene = _wall_scene(rng, -10.0, 10.0, -10.0, 10.0, 4.0)
        step, turn_rate = 0.15, np.deg2rad(21.0)
        yaw, center = 0.0, np.array([0.0, 0.0, -6.0])
        poses = []
        for k in range(n):
            poses.append(_yaw_pose(yaw, center))
            if 8 <= k < 13:
                yaw += turn_rate
            center = center + step * np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    elif preset == "stationary":
        scene = _box_scene(rng, 10.0, 10.0, 1.2, -1.8, 4.0)
        poses = [_yaw_pose(0.0, (0.0, 0.0, 0.0))] * n
    else:  # shaky
        scene = _box_scene(rng, 10.0, 10.0, 1.2, -1.8, 4.0)
        nominal = _yaw_pose(0.0, (0.0, 0.0, 0.0))
        poses = []
        for _ in range(n):
            omega = rng.normal(0.0, np.deg2rad(0.8), 3)
            jitter = rng.normal(0.0, 0.01, 3)
            poses.append(compose(se3_exp(Twist(omega, jitter)), nominal))

    timestamps = tuple(0.1 * k for k in range(n))
    return scene, CameraPath(timestamps, tuple(poses), cam)


def generate_sequence(
    preset: str,
    seed: int,
    out_dir,
    n_frames: int | None = None,
    width: int = 160,
    height: int = 120,
) -> CameraPath:
    """Render a preset to disk: frames/%06d.pgm, depth/%06d.f32,
    gt_poses.txt (camera-to-world rows), intrinsics.txt."""
    from .evaluation import Trajectory, save_trajectory_kitti

    scene, path = make_scene_and_path(preset, seed, n_frames, width, height)
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    for k, pose in enumerate(path.poses):
        img, depth = render_frame(scene, path.cam, pose)
        save_pgm(img, out / "frames" / f"{k:06d}.pgm")
        save_depth_raster(depth, out / "depth" / f"{k:06d}.f32")
    cam_to_world = tuple(inverse(p) for p in path.poses)
    save_trajectory_kitti(Trajectory(path.timestamps, cam_to_world), out / "gt_poses.txt")
    cam = path.cam
    (out / "intrinsics.txt").write_text(
        f"{cam.fx} {cam.fy} {cam.cx} {cam.cy} {cam.width} {cam.height}\n"
    )
    return path
