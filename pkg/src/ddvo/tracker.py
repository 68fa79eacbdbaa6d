"""Direct photometric tracking against the latest keyframe.

Sparse points with inverse depths are selected on a keyframe; each new frame
is aligned to it by coarse-to-fine Gauss-Newton on Huber-weighted photometric
residuals. The seed of every alignment is the composition of an inter-frame
prior (identity, constant motion, or an external source) with the previous
frame's keyframe-relative pose; that seeding is exactly where the prior
substitution changes behavior.

Pose conventions: ``T_t_kf`` maps keyframe camera coordinates into frame-t
camera coordinates; ``pose_world`` (``T_kf_w``) maps world coordinates into
keyframe camera coordinates. Exported trajectories are camera-to-world.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import (
    MIN_DEPTH,
    AngleNearPi,
    CameraModel,
    Pose,
    Twist,
    compose,
    constant_motion_extrapolate,
    inverse,
    pixel_rays,
    se3_exp,
    se3_log,
)
from .imaging import (
    GradientImage,
    GrayImage,
    Pyramid,
    build_pyramid,
    compute_gradients,
    sample_values,
    sample_with_gradient,
)
from .priors import FrameContext, PriorResponse, PriorSource, get_prior

STATUS_CONVERGED = "converged"
STATUS_DIVERGED = "diverged"
STATUS_INSUFFICIENT = "insufficient-overlap"


class TrackingLost(RuntimeError):
    """Alignment failed and every recovery attempt failed too."""


@dataclass(frozen=True)
class PointPattern:
    """Residual neighborhood around each host pixel (du, dv offsets)."""

    offsets: tuple

    def __post_init__(self):
        if (0, 0) not in self.offsets:
            raise ValueError("pattern must contain the host pixel (0, 0)")
        if len(self.offsets) > 8:
            raise ValueError("pattern limited to 8 offsets")

    def array(self) -> np.ndarray:
        return np.array(self.offsets, dtype=np.float64)


# spread pattern: host, 4-cross at radius 2, 3 diagonal fill-ins
DEFAULT_PATTERN = PointPattern(
    ((0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1))
)


@dataclass
class TrackedPoint:
    u: int
    v: int
    idepth: float
    variance: float = 1e4
    status: str = "active"  # active | outlier | out-of-bounds


@dataclass
class Keyframe:
    id: int
    pyramid: Pyramid
    gradients: tuple  # GradientImage per level
    points: list
    pose_world: Pose  # world -> keyframe camera
    cam: CameraModel

    def active_points(self) -> list:
        return [p for p in self.points if p.status == "active"]

    def usable(self, min_points: int = 50) -> bool:
        return len(self.active_points()) >= min_points


@dataclass(frozen=True)
class TrackerConfig:
    levels: int = 4
    target_points: int = 800
    gradient_threshold: float = 0.008  # plus a median-adaptive offset at selection
    huber_k: float = 0.035
    max_iterations: int = 20
    convergence_threshold: float = 1e-6
    kf_flow_threshold: float = 20.0  # pixels of mean flow since the keyframe
    kf_residual_factor: float = 1.5  # versus running median RMSE
    init_flow_threshold: float = 9.0  # parallax required before bootstrap depths count
    init_rotation_residual: float = 0.018  # rot-only fit below this = no baseline yet
    kf_min_parallax: float = 12.0  # baseline required before depths are re-estimated
    min_valid_residuals: int = 20
    min_inlier_fraction: float = 0.3
    min_usable_points: int = 50
    recovery_delta: float = 0.02  # radians, the small-rotation grid
    pattern: PointPattern = DEFAULT_PATTERN

    def __post_init__(self):
        numeric = (
            self.levels,
            self.target_points,
            self.gradient_threshold,
            self.huber_k,
            self.max_iterations,
            self.convergence_threshold,
            self.kf_flow_threshold,
            self.kf_residual_factor,
            self.min_valid_residuals,
            self.min_inlier_fraction,
            self.min_usable_points,
            self.recovery_delta,
        )
        if any(x <= 0 for x in numeric):
            raise ValueError("tracker config values must be positive")


@dataclass(frozen=True)
class TrackResult:
    pose: Pose  # keyframe -> frame camera map
    rmse: float
    inlier_fraction: float
    iterations: int
    status: str

    def __post_init__(self):
        if not 0.0 <= self.inlier_fraction <= 1.0:
            raise ValueError("inlier fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Point selection


def select_points(img: GrayImage, grad: GradientImage, cfg: TrackerConfig) -> list:
    """Grid selection: one max-gradient pixel per cell above an adaptive
    threshold, never two selections within 2 pixels of each other."""
    h, w = img.data.shape
    mag = grad.magnitude()
    cell = max(int(math.ceil(math.sqrt(w * h / cfg.target_points))), 1)
    threshold = cfg.gradient_threshold + 0.25 * float(np.median(mag))
    taken = np.zeros((h, w), dtype=bool)
    out = []
    for cy in range(0, h, cell):
        for cx in range(0, w, cell):
            block = mag[cy : cy + cell, cx : cx + cell]
            k = int(np.argmax(block))
            dv, du = divmod(k, block.shape[1])
            v, u = cy + dv, cx + du
            if mag[v, u] <= threshold:
                continue
            y0, y1 = max(v - 1, 0), min(v + 2, h)
            x0, x1 = max(u - 1, 0), min(u + 2, w)
            if taken[y0:y1, x0:x1].any():
                continue
            taken[v, u] = True
            out.append((u, v))
    return out


def build_keyframe(
    kf_id: int,
    pyramid: Pyramid,
    pose_world: Pose,
    cam: CameraModel,
    cfg: TrackerConfig,
    idepths=None,
) -> Keyframe:
    grads = tuple(compute_gradients(level) for level in pyramid.levels)
    pix = select_points(pyramid[0], grads[0], cfg)
    points = []
    for k, (u, v) in enumerate(pix):
        idepth = 1.0 if idepths is None else float(idepths[k])
        points.append(TrackedPoint(u, v, idepth))
    return Keyframe(kf_id, pyramid, grads, points, pose_world, cam)


# ---------------------------------------------------------------------------
# Residuals and alignment


def _level_coords(host: np.ndarray, level: int) -> np.ndarray:
    # cell-center downsampling: u_l = (u_0 + 0.5) / 2^l - 0.5
    s = float(2**level)
    return (host + 0.5) / s - 0.5


def photometric_residuals(kf: Keyframe, frame: Pyramid, pose: Pose, level: int, cfg: TrackerConfig):
    """Residuals r = I_frame[p'] - I_kf[p] over active points x pattern.

    Returns (r, J, valid) flattened; J is the analytic d r / d twist for a
    left-composed (omega, v) perturbation of ``pose``. Rows marked invalid
    are zeroed.
    """
    pts = kf.active_points()
    if not pts:
        z = np.zeros(0)
        return z, np.zeros((0, 6)), np.zeros(0, dtype=bool)
    host = np.array([[p.u, p.v] for p in pts], dtype=np.float64)
    idepth = np.array([p.idepth for p in pts])
    cam_l = kf.cam.scaled(level)
    offsets = cfg.pattern.array()
    q = _level_coords(host, level)[:, None, :] + offsets[None, :, :]  # (N, P, 2)

    i_kf, ok_kf = sample_values(kf.pyramid[level].data, q[..., 0], q[..., 1])
    rays = pixel_rays(cam_l, q)
    x_kf = rays / idepth[:, None, None]
    x_f = x_kf @ pose.R.T + pose.t
    z = x_f[..., 2]
    ok_z = z > MIN_DEPTH
    zs = np.where(ok_z, z, 1.0)
    u = cam_l.fx * x_f[..., 0] / zs + cam_l.cx
    v = cam_l.fy * x_f[..., 1] / zs + cam_l.cy
    val, gx, gy, ok_s = sample_with_gradient(frame[level].data, u, v)
    valid = ok_kf & ok_z & ok_s

    r = np.where(valid, val - i_kf, 0.0)
    iz = 1.0 / zs
    gfx = gx * cam_l.fx * iz
    gfy = gy * cam_l.fy * iz
    gz = -(gfx * x_f[..., 0] + gfy * x_f[..., 1]) * iz
    jac = np.stack(
        [
            -gfy * x_f[..., 2] + gz * x_f[..., 1],
            gfx * x_f[..., 2] - gz * x_f[..., 0],
            -gfx * x_f[..., 1] + gfy * x_f[..., 0],
            gfx,
            gfy,
            gz,
        ],
        axis=-1,
    )
    jac = np.where(valid[..., None], jac, 0.0)
    n = len(pts) * offsets.shape[0]
    return r.reshape(n), jac.reshape(n, 6), valid.reshape(n)


def _huber_weights(r: np.ndarray, k: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-300))


def _weighted_rmse(r: np.ndarray, valid: np.ndarray, k: float) -> float:
    if not valid.any():
        return float("inf")
    w = _huber_weights(r[valid], k)
    return float(np.sqrt((w * r[valid] ** 2).mean()))


def _solve_normal_equations(h: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        delta = np.linalg.solve(h, b)
        if np.isfinite(delta).all():
            return delta
    except np.linalg.LinAlgError:
        pass
    lam = 1e-4 * np.trace(h) / 6.0 + 1e-12
    return np.linalg.solve(h + lam * np.eye(6), b)


def gauss_newton_align(
    kf: Keyframe, frame: Pyramid, init: Pose, cfg: TrackerConfig, rotation_only: bool = False
) -> TrackResult:
    """Coarse-to-fine Gauss-Newton; steps that raise the weighted RMSE are
    halved (max 5 times) and never accepted, so the per-level error is
    monotone. Status reports divergence rather than raising.

    ``rotation_only`` freezes translation. Rotation-only warps are
    depth-invariant, so this mode is reliable even when the keyframe's
    inverse depths are placeholders (bootstrap)."""
    n_levels = min(cfg.levels, kf.pyramid.n_levels, frame.n_levels)
    r0, _, v0 = photometric_residuals(kf, frame, init, 0, cfg)
    if int(v0.sum()) < cfg.min_valid_residuals:
        return TrackResult(init, _weighted_rmse(r0, v0, cfg.huber_k), 0.0, 0, STATUS_INSUFFICIENT)
    initial_rmse = _weighted_rmse(r0, v0, cfg.huber_k)

    pose = init
    total_iters = 0
    r, jac, valid = r0, None, v0
    rmse = initial_rmse
    for level in range(n_levels - 1, -1, -1):
        r, jac, valid = photometric_residuals(kf, frame, pose, level, cfg)
        if int(valid.sum()) < cfg.min_valid_residuals:
            return TrackResult(pose, rmse, 0.0, total_iters, STATUS_INSUFFICIENT)
        rmse = _weighted_rmse(r, valid, cfg.huber_k)
        for _ in range(cfg.max_iterations):
            w = _huber_weights(r, cfg.huber_k) * valid
            j = jac[:, :3] if rotation_only else jac
            h = (j * w[:, None]).T @ j
            b = -j.T @ (w * r)
            delta = _solve_normal_equations(h, b)
            if not np.isfinite(delta).all():
                break
            if rotation_only:
                delta = np.concatenate([delta, np.zeros(3)])
            step = delta.copy()
            accepted = False
            for _ in range(6):  # full step plus up to 5 halvings
                cand = compose(se3_exp(Twist.from_vector(step)), pose)
                r2, j2, v2 = photometric_residuals(kf, frame, cand, level, cfg)
                if int(v2.sum()) >= cfg.min_valid_residuals:
                    rmse2 = _weighted_rmse(r2, v2, cfg.huber_k)
                    if rmse2 <= rmse:
                        pose, r, jac, valid, rmse = cand, r2, j2, v2, rmse2
                        accepted = True
                        break
                step = step / 2.0
            total_iters += 1
            if not accepted:
                break
            if float(np.linalg.norm(delta)) < cfg.convergence_threshold:
                break

    n_valid = int(valid.sum())
    inliers = float(((np.abs(r) <= cfg.huber_k) & valid).sum() / max(n_valid, 1))
    if n_valid < cfg.min_valid_residuals:
        status = STATUS_INSUFFICIENT
    # small slack: a near-optimal seed may end marginally above its own
    # finest-level error after the coarse levels detour through their optimum
    elif rmse > initial_rmse * 1.05 + 1e-4 or inliers < cfg.min_inlier_fraction:
        status = STATUS_DIVERGED
    else:
        status = STATUS_CONVERGED
    return TrackResult(pose, rmse, inliers, total_iters, status)


def _warped_pixels(kf: Keyframe, pose: Pose):
    """(host, warped, valid) pixel coordinates of active points at level 0."""
    pts = kf.active_points()
    if not pts:
        z = np.zeros((0, 2))
        return z, z, np.zeros(0, dtype=bool)
    host = np.array([[p.u, p.v] for p in pts], dtype=np.float64)
    idepth = np.array([p.idepth for p in pts])
    x = pixel_rays(kf.cam, host) / idepth[:, None]
    x_f = x @ pose.R.T + pose.t
    z = x_f[:, 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    warped = np.stack(
        [kf.cam.fx * x_f[:, 0] / zs + kf.cam.cx, kf.cam.fy * x_f[:, 1] / zs + kf.cam.cy], axis=1
    )
    return host, warped, ok


def mean_flow(kf: Keyframe, pose: Pose) -> float:
    """Mean displacement of active host pixels under the keyframe-to-frame
    warp, at the finest level."""
    host, warped, ok = _warped_pixels(kf, pose)
    if not ok.any():
        return 0.0
    return float(np.hypot(*(warped[ok] - host[ok]).T).mean())


def mean_parallax(kf: Keyframe, pose: Pose) -> float:
    """Mean rotation-compensated displacement: how far the warp moves pixels
    beyond what rotation alone explains. Raw flow overstates usable baseline
    when motion is rotation-heavy, so bootstrap gates on this instead."""
    host, warped, ok = _warped_pixels(kf, pose)
    _, rot_only, ok2 = _warped_pixels(kf, Pose(pose.R, np.zeros(3)))
    both = ok & ok2
    if not both.any():
        return 0.0
    return float(np.hypot(*(warped[both] - rot_only[both]).T).mean())


# ---------------------------------------------------------------------------
# Inverse-depth refinement


def _point_depth_terms(p: TrackedPoint, kf: Keyframe, frame: Pyramid, pose: Pose, cfg, idepth):
    offsets = cfg.pattern.array()
    q = np.array([p.u, p.v], dtype=np.float64)[None, :] + offsets
    i_kf, ok_kf = sample_values(kf.pyramid[0].data, q[:, 0], q[:, 1])
    rays = pixel_rays(kf.cam, q)
    x = rays / idepth
    x_f = x @ pose.R.T + pose.t
    z = x_f[:, 2]
    ok_z = z > MIN_DEPTH
    zs = np.where(ok_z, z, 1.0)
    u = kf.cam.fx * x_f[:, 0] / zs + kf.cam.cx
    v = kf.cam.fy * x_f[:, 1] / zs + kf.cam.cy
    val, gx, gy, ok_s = sample_with_gradient(frame[0].data, u, v)
    valid = ok_kf & ok_z & ok_s
    r = np.where(valid, val - i_kf, 0.0)
    iz = 1.0 / zs
    gfx = gx * kf.cam.fx * iz
    gfy = gy * kf.cam.fy * iz
    gz = -(gfx * x_f[:, 0] + gfy * x_f[:, 1]) * iz
    # d X_f / d idepth = R @ (-x / idepth)
    dxf = (-x / idepth) @ pose.R.T
    j_d = gfx * dxf[:, 0] + gfy * dxf[:, 1] + gz * dxf[:, 2]
    j_d = np.where(valid, j_d, 0.0)
    return r, j_d, valid


def refine_inverse_depths(
    kf: Keyframe, frame: Pyramid, pose: Pose, cfg: TrackerConfig, iterations: int = 3,
    id_lo: float = None, id_hi: float = None
) -> Keyframe:
    """Per-point 1-D Gauss-Newton on inverse depth with the pose held fixed.

    Variance comes from the final curvature; unobservable points (zero
    baseline or no gradient along the induced flow) are left untouched.
    Points whose mean |residual| exceeds 3x the Huber threshold are marked
    outliers; points warping off-image are marked out-of-bounds. When
    ``id_lo``/``id_hi`` are given, points escaping that bracket are marked
    outliers too -- a weak-parallax point can otherwise run off to any depth
    while barely changing the residual.
    """
    for p in kf.active_points():
        idepth = p.idepth
        for _ in range(iterations):
            r, j_d, valid = _point_depth_terms(p, kf, frame, pose, cfg, idepth)
            w = _huber_weights(r, cfg.huber_k) * valid
            den = float((w * j_d * j_d).sum())
            if den < 1e-12:
                break
            step = -float((w * j_d * r).sum()) / den
            new_idepth = idepth + step
            idepth = new_idepth if new_idepth > 1e-8 else idepth * 0.5
        r, j_d, valid = _point_depth_terms(p, kf, frame, pose, cfg, idepth)
        if not valid[0]:  # host pixel itself leaves the frame
            p.status = "out-of-bounds"
            continue
        w = _huber_weights(r, cfg.huber_k) * valid
        den = float((w * j_d * j_d).sum())
        p.idepth = idepth
        if den >= 1e-12:
            p.variance = 1.0 / den
        if valid.any() and float(np.abs(r[valid]).mean()) > 3.0 * cfg.huber_k:
            p.status = "outlier"
        elif id_lo is not None and not (id_lo <= idepth <= id_hi):
            p.status = "outlier"
    return kf


def _two_view_terms(kf: Keyframe, frame: Pyramid, pose: Pose, cfg: TrackerConfig,
                    idepth: np.ndarray, level: int = 0):
    """Residuals at ``level`` with both pose and inverse-depth Jacobians,
    kept in (points, pattern) shape for per-point elimination."""
    pts = kf.active_points()
    host = np.array([[p.u, p.v] for p in pts], dtype=np.float64)
    cam_l = kf.cam.scaled(level)
    offsets = cfg.pattern.array()
    q = _level_coords(host, level)[:, None, :] + offsets[None, :, :]
    i_kf, ok_kf = sample_values(kf.pyramid[level].data, q[..., 0], q[..., 1])
    rays = pixel_rays(cam_l, q)
    x = rays / idepth[:, None, None]
    x_f = x @ pose.R.T + pose.t
    z = x_f[..., 2]
    ok_z = z > MIN_DEPTH
    zs = np.where(ok_z, z, 1.0)
    u = cam_l.fx * x_f[..., 0] / zs + cam_l.cx
    v = cam_l.fy * x_f[..., 1] / zs + cam_l.cy
    val, gx, gy, ok_s = sample_with_gradient(frame[level].data, u, v)
    valid = ok_kf & ok_z & ok_s
    r = np.where(valid, val - i_kf, 0.0)
    iz = 1.0 / zs
    gfx = gx * cam_l.fx * iz
    gfy = gy * cam_l.fy * iz
    gz = -(gfx * x_f[..., 0] + gfy * x_f[..., 1]) * iz
    jac = np.stack(
        [
            -gfy * x_f[..., 2] + gz * x_f[..., 1],
            gfx * x_f[..., 2] - gz * x_f[..., 0],
            -gfx * x_f[..., 1] + gfy * x_f[..., 0],
            gfx,
            gfy,
            gz,
        ],
        axis=-1,
    )
    jac = np.where(valid[..., None], jac, 0.0)
    dxf = (-x / idepth[:, None, None]) @ pose.R.T
    j_d = gfx * dxf[..., 0] + gfy * dxf[..., 1] + gz * dxf[..., 2]
    j_d = np.where(valid, j_d, 0.0)
    return r, jac, j_d, valid


def joint_two_view_refine(kf: Keyframe, frame: Pyramid, pose: Pose,
                          cfg: TrackerConfig, iterations: int = 8) -> Pose:
    """Jointly optimize the relative pose and every active inverse depth on
    one frame pair (Levenberg-damped, depths eliminated per point).

    Estimating the two alternately stalls: a tilted depth field and a bent
    translation direction fit each other almost perfectly at small baseline,
    and each re-fit confirms the other. The joint step moves along that
    coupled direction directly. Depths are mutated in place; the refined
    pose is returned. The overall scale stays a gauge freedom -- callers pin
    it afterwards.
    """
    pts = kf.active_points()
    if len(pts) < cfg.min_usable_points:
        return pose
    idepth = np.array([p.idepth for p in pts])
    n_levels = min(3, cfg.levels, kf.pyramid.n_levels, frame.n_levels)
    for level in range(n_levels - 1, -1, -1):
        lam = 1e-3
        r, jac, j_d, valid = _two_view_terms(kf, frame, pose, cfg, idepth, level)
        cost = _weighted_rmse(r.reshape(-1), valid.reshape(-1), cfg.huber_k)
        for _ in range(iterations):
            w = _huber_weights(r, cfg.huber_k) * valid
            h_pose = np.einsum("npi,np,npj->ij", jac, w, jac)
            b_pose = np.einsum("npi,np->i", jac, w * r)
            c = (w * j_d * j_d).sum(axis=1)
            e = np.einsum("npi,np->ni", jac, w * j_d)
            g = (w * j_d * r).sum(axis=1)
            obs = c > 1e-12
            c_damped = c * (1.0 + lam) + 1e-300
            h = h_pose + lam * np.diag(np.diag(h_pose))
            eo = e[obs]
            co = c_damped[obs]
            h_schur = h - (eo.T / co) @ eo
            b_schur = -(b_pose - eo.T @ (g[obs] / co))
            try:
                delta = np.linalg.solve(h_schur, b_schur)
            except np.linalg.LinAlgError:
                lam = min(lam * 8.0, 1e3)
                continue
            if not np.isfinite(delta).all():
                lam = min(lam * 8.0, 1e3)
                continue
            dd = np.zeros(len(idepth))
            dd[obs] = -(g[obs] + eo @ delta) / co
            cand_pose = compose(se3_exp(Twist.from_vector(delta)), pose)
            cand_id = np.maximum(idepth + dd, 1e-8)
            r2, jac2, j_d2, valid2 = _two_view_terms(kf, frame, cand_pose, cfg, cand_id, level)
            cost2 = _weighted_rmse(r2.reshape(-1), valid2.reshape(-1), cfg.huber_k)
            if cost2 <= cost:
                small = float(np.linalg.norm(delta)) < cfg.convergence_threshold
                pose, idepth, cost = cand_pose, cand_id, cost2
                r, jac, j_d, valid = r2, jac2, j_d2, valid2
                lam = max(lam * 0.5, 1e-6)
                if small:
                    break
            else:
                lam = min(lam * 8.0, 1e3)
    for p, d in zip(pts, idepth):
        p.idepth = float(d)
    return pose


def search_inverse_depths(
    kf: Keyframe,
    frame: Pyramid,
    pose: Pose,
    cfg: TrackerConfig,
    id_lo: float,
    id_hi: float,
    n_hyp: int = 32,
) -> Keyframe:
    """Coarse 1-D line search over inverse depth, one point at a time.

    The photometric profile along a point's ray has local minima one texture
    period apart, so plain Gauss-Newton from a poor guess locks onto the wrong
    lobe. This evaluates pattern SSD against ``frame`` at log-spaced inverse
    depths (plus the current estimate) and keeps the argmin; follow with
    :func:`refine_inverse_depths` to polish within the chosen basin.
    """
    pts = kf.active_points()
    if not pts or not (0.0 < id_lo < id_hi):
        return kf
    offsets = cfg.pattern.array()
    host = np.array([[p.u, p.v] for p in pts], dtype=np.float64)
    q = host[:, None, :] + offsets[None, :, :]
    n, m = q.shape[0], q.shape[1]
    i_kf, ok_kf = sample_values(kf.pyramid[0].data, q[..., 0], q[..., 1])
    rays = pixel_rays(kf.cam, q.reshape(-1, 2)).reshape(n, m, 3)
    data = frame[0].data
    min_valid = max(4, m // 2)

    def pattern_cost(idepth_col: np.ndarray) -> np.ndarray:
        x_f = rays / idepth_col[:, None, None] @ pose.R.T + pose.t
        z = x_f[..., 2]
        okz = z > MIN_DEPTH
        zs = np.where(okz, z, 1.0)
        u = kf.cam.fx * x_f[..., 0] / zs + kf.cam.cx
        v = kf.cam.fy * x_f[..., 1] / zs + kf.cam.cy
        val, oks = sample_values(data, u, v)
        valid = ok_kf & okz & oks
        r = np.where(valid, val - i_kf, 0.0)
        nv = valid.sum(axis=1)
        return np.where(nv >= min_valid, (r * r).sum(axis=1) / np.maximum(nv, 1), np.inf)

    cur_idepth = np.array([p.idepth for p in pts])
    cur_cost = pattern_cost(cur_idepth)
    best_idepth = cur_idepth.copy()
    best_cost = cur_cost.copy()
    for idepth in np.geomspace(id_lo, id_hi, n_hyp):
        cost = pattern_cost(np.full(n, idepth))
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_idepth[better] = idepth
    # a flat profile (far geometry, weak parallax) makes the argmin close to
    # arbitrary; move off the current estimate only for a clear win
    adopt = best_cost < 0.9 * cur_cost
    for p, ide, take in zip(pts, best_idepth, adopt):
        if take:
            p.idepth = float(ide)
    return kf


# ---------------------------------------------------------------------------
# Two-frame initialization


@dataclass(frozen=True)
class NotYet:
    """Initialization did not succeed on this pair; try the next frame."""

    reason: str


def _scale_gauge(kf: Keyframe, pose: Pose, scale: float) -> Pose:
    """Rescale translation by ``scale`` and inverse depths to match, leaving
    every projection unchanged."""
    for p in kf.points:
        p.idepth /= scale
        p.variance /= scale * scale
    return Pose(pose.R, pose.t * scale)


# the 26 sign combinations of {-1,0,1}^3, normalized: a fixed, deterministic
# grid of translation-direction seeds whose nearest member is within ~22
# degrees of any direction
_INIT_DIRECTIONS = tuple(
    np.array(v, dtype=np.float64) / np.linalg.norm(v)
    for v in itertools.product((-1, 0, 1), repeat=3)
    if any(v)
)


def initialize_two_frame(
    first: Pyramid,
    second: Pyramid,
    prior_pose: Pose,
    cfg: TrackerConfig,
    cam: CameraModel,
    kf_id: int = 0,
    kf_pose_world: Pose = None,
):
    """Bootstrap pose and structure from two frames.

    A full 6-dof alignment against placeholder depths locks onto arbitrary
    minima, so the rotation is fitted first (rotation-only warps are
    depth-invariant). If that fit already explains the pair at near-noise
    residual there is no usable baseline and the caller should keep feeding
    frames -- this keeps static and purely-rotating input cheap to reject.

    The translation direction cannot be descended to from a single seed:
    depth and direction compensate each other, and short-baseline pairs of
    near-planar views admit self-consistent wrong-direction solutions that
    plain descent happily falls into. Instead every direction in a fixed
    26-point grid is scored by a shallow search-and-refine pass, the best
    few are re-solved deeply (bounded hypothesis search, joint pose+depth
    refinement, then a second search around the recovered depth range), and
    the photometric argmin wins.

    Succeeds when the winner's final alignment converges with inlier
    fraction >= 0.6 and the rotation-compensated parallax reaches
    ``cfg.init_flow_threshold`` pixels; with less baseline the recovered
    depths are mush. Returns (Keyframe, pose) with the translation gauge
    fixed to the prior's norm (unit norm for an identity prior), or NotYet.
    """
    probe = build_keyframe(kf_id, first, kf_pose_world or Pose.identity(), cam, cfg)
    if not probe.usable(cfg.min_usable_points):
        return NotYet("too few selectable points")
    rot = gauss_newton_align(probe, second, Pose(prior_pose.R, np.zeros(3)), cfg,
                             rotation_only=True)
    if rot.status == STATUS_INSUFFICIENT:
        return NotYet(f"rotation fit {rot.status}")
    if rot.status == STATUS_CONVERGED and rot.rmse < cfg.init_rotation_residual:
        return NotYet("rotation alone explains the pair (no baseline)")

    def solve_from(direction, shallow):
        kf = build_keyframe(kf_id, first, kf_pose_world or Pose.identity(), cam, cfg)
        pose = Pose(rot.pose.R.copy(), 0.08 * direction)
        search_inverse_depths(kf, second, pose, cfg, 0.1, 10.0, n_hyp=32)
        refine_inverse_depths(kf, second, pose, cfg, id_lo=0.02, id_hi=50.0)
        pose = joint_two_view_refine(kf, second, pose, cfg,
                                     iterations=2 if shallow else 8)
        if not shallow and kf.usable(cfg.min_usable_points):
            ids = [p.idepth for p in kf.active_points()]
            lo, hi = np.percentile(ids, 2.5), np.percentile(ids, 97.5)
            if 0.0 < lo < hi:
                search_inverse_depths(kf, second, pose, cfg, 0.5 * lo, 2.0 * hi, n_hyp=32)
                refine_inverse_depths(kf, second, pose, cfg, id_lo=0.25 * lo, id_hi=4.0 * hi)
                pose = joint_two_view_refine(kf, second, pose, cfg)
        result = gauss_newton_align(kf, second, pose, cfg)
        return kf, result

    shallow_scores = []
    best_parallax = 0.0
    for i, d in enumerate(_INIT_DIRECTIONS):
        kf, res = solve_from(d, shallow=True)
        if res.status != STATUS_CONVERGED:
            continue
        shallow_scores.append((res.rmse, i))
        best_parallax = max(best_parallax, mean_parallax(kf, res.pose))
    if not shallow_scores:
        return NotYet("no direction hypothesis converged")
    if best_parallax < 0.8 * cfg.init_flow_threshold:
        return NotYet(f"mean parallax below {cfg.init_flow_threshold} pixels")

    shallow_scores.sort()
    best = None
    for _, i in shallow_scores[:6]:
        kf, res = solve_from(_INIT_DIRECTIONS[i], shallow=False)
        if res.status != STATUS_CONVERGED or not kf.usable(cfg.min_usable_points):
            continue
        if best is None or res.rmse < best[1].rmse:
            best = (kf, res)
    if best is None:
        return NotYet("no direction hypothesis survived deep refinement")
    kf, result = best
    if result.inlier_fraction < 0.6:
        return NotYet("inlier fraction below 0.6")
    parallax = mean_parallax(kf, result.pose)
    if parallax < cfg.init_flow_threshold:
        return NotYet(f"mean parallax below {cfg.init_flow_threshold} pixels")
    t_norm = float(np.linalg.norm(result.pose.t))
    if t_norm < 1e-9:
        return NotYet("no translation recovered")
    target = float(np.linalg.norm(prior_pose.t))
    if target < 1e-12:
        target = 1.0
    pose = _scale_gauge(kf, result.pose, target / t_norm)
    return kf, pose


# ---------------------------------------------------------------------------
# Odometry state machine


@dataclass(frozen=True)
class FrameRecord:
    index: int
    timestamp: float
    status: str
    rmse: float
    inliers: float
    iterations: int
    prior_source: str


def _geodesic_scale(pose: Pose, s: float) -> Pose:
    xi = se3_log(pose)
    return se3_exp(Twist(xi.omega * s, xi.v * s))


class VisualOdometry:
    """Sequential frame-to-keyframe tracking with prior-seeded alignment.

    Frames before initialization succeeds are reported with identity world
    pose and status "not-initialized"; a sequence with no parallax (e.g. a
    static camera) simply never leaves that phase.
    """

    def __init__(self, cam: CameraModel, cfg: TrackerConfig = None, chain=None,
                 enable_recovery: bool = True, reanchor_after: int = 10):
        self.cam = cam
        self.cfg = cfg or TrackerConfig()
        self.chain = list(chain) if chain else [PriorSource("identity")]
        if self.chain[-1].kind != "identity":
            self.chain.append(PriorSource("identity"))
        self.enable_recovery = enable_recovery
        self.reanchor_after = reanchor_after

        self.phase = "initializing"
        self.frame_index = -1
        self.timestamps = []
        self.world_poses = []  # world -> camera, one per processed frame
        self.records = []
        self.keyframe = None
        self.keyframes = []
        self.t_prev_kf = None
        self.prev_world = None
        self.prevprev_world = None
        self.inter_poses = []  # accepted previous-to-current camera maps
        self.chain_anchor_world = None
        self.rmse_history = deque(maxlen=20)
        self.last_seed = None  # inspection hook: seed of the latest alignment

        self._anchor_pyr = None
        self._anchor_index = None
        self._accum_prior = Pose.identity()
        self._init_attempts = 0
        self._pending = []  # pyramids seen while waiting for init parallax
        self._last_segment = None  # (pose, gap) of the last accepted keyframe segment

    # -- frame ingestion ----------------------------------------------------

    def process_frame(self, img: GrayImage, timestamp: float = None) -> FrameRecord:
        self.frame_index += 1
        idx = self.frame_index
        ts = float(idx) if timestamp is None else float(timestamp)
        pyr = build_pyramid(img, self.cfg.levels)
        if self.phase == "initializing":
            rec = self._init_step(idx, ts, pyr)
        else:
            rec = self._track_step(idx, ts, pyr)
        self.records.append(rec)
        self.timestamps.append(ts)
        return rec

    def _init_step(self, idx: int, ts: float, pyr: Pyramid) -> FrameRecord:
        if self._anchor_pyr is None:
            self._anchor_pyr = pyr
            self._anchor_index = idx
            self._accum_prior = Pose.identity()
            self._pending = []
            self.world_poses.append(Pose.identity())
            return FrameRecord(idx, ts, "not-initialized", 0.0, 0.0, 0, "none")
        prior = get_prior(self.chain, FrameContext(idx - 1, idx))
        self._accum_prior = compose(prior.pose, self._accum_prior)
        result = initialize_two_frame(
            self._anchor_pyr, pyr, self._accum_prior, self.cfg, self.cam,
            kf_id=self._anchor_index,
        )
        if isinstance(result, NotYet):
            self.world_poses.append(Pose.identity())
            self._pending.append(pyr)
            self._init_attempts += 1
            if self._init_attempts >= self.reanchor_after:
                self._anchor_pyr = pyr
                self._anchor_index = idx
                self._accum_prior = Pose.identity()
                self._init_attempts = 0
                self._pending = []
            return FrameRecord(idx, ts, "not-initialized", 0.0, 0.0, 0, prior.source)

        kf, pose = result
        self.keyframe = kf
        self.keyframes = [kf]
        self.t_prev_kf = pose
        t_w = compose(pose, kf.pose_world)
        self.world_poses.append(t_w)
        self.chain_anchor_world = t_w
        gap = idx - self._anchor_index
        try:
            step = _geodesic_scale(pose, 1.0 / gap)
        except AngleNearPi:
            step = pose if gap == 1 else Pose.identity()
        # frames seen while waiting were reported at identity; now that the
        # keyframe has structure, align them retroactively (interpolated seed)
        for j, pend in enumerate(self._pending[: gap - 1], start=1):
            try:
                seed = _geodesic_scale(pose, j / gap)
            except AngleNearPi:
                seed = Pose.identity()
            res = gauss_newton_align(kf, pend, seed, self.cfg)
            t_j = res.pose if res.status == STATUS_CONVERGED else seed
            self.world_poses[self._anchor_index + j] = compose(t_j, kf.pose_world)
        self._pending = []
        self._last_segment = (pose, gap)
        self.prev_world = t_w
        self.prevprev_world = compose(inverse(step), t_w)
        self.phase = "tracking"
        return FrameRecord(idx, ts, "initialized", 0.0, 1.0, 0, prior.source)

    def _track_step(self, idx: int, ts: float, pyr: Pyramid) -> FrameRecord:
        prior = get_prior(
            self.chain, FrameContext(idx - 1, idx, self.prev_world, self.prevprev_world)
        )
        seed = compose(prior.pose, self.t_prev_kf)
        self.last_seed = seed
        result = gauss_newton_align(self.keyframe, pyr, seed, self.cfg)
        source = prior.source
        if result.status != STATUS_CONVERGED:
            if not self.enable_recovery:
                raise TrackingLost(f"frame {idx}: {result.status}, recovery disabled")
            result, source = self.recovery_attempts(pyr, prior)

        t_t_kf = result.pose
        flow = mean_flow(self.keyframe, t_t_kf)
        self.rmse_history.append(result.rmse)

        median_rmse = float(np.median(self.rmse_history))
        need_kf = (
            flow > self.cfg.kf_flow_threshold
            or (len(self.rmse_history) >= 5 and result.rmse > self.cfg.kf_residual_factor * median_rmse)
            or not self.keyframe.usable(self.cfg.min_usable_points)
        )
        if need_kf and self.keyframe.usable(self.cfg.min_usable_points):
            # depth re-estimation needs baseline: a promotion one frame after
            # the last one hands the searcher a near-zero-parallax pair and
            # the junk field it returns poisons every segment after it
            if mean_parallax(self.keyframe, t_t_kf) < self.cfg.kf_min_parallax:
                need_kf = False
        if need_kf:
            # promotion re-estimates the segment pose jointly with the new
            # structure, so the current frame's world pose comes from it
            t_w = self._promote_keyframe(idx, pyr, t_t_kf)
        else:
            self.t_prev_kf = t_t_kf
            t_w = compose(t_t_kf, self.keyframe.pose_world)

        self.inter_poses.append(compose(t_w, inverse(self.prev_world)))
        self.prevprev_world = self.prev_world
        self.prev_world = t_w
        self.world_poses.append(t_w)
        return FrameRecord(idx, ts, result.status, result.rmse, result.inlier_fraction,
                           result.iterations, source)

    # -- keyframe management --------------------------------------------------

    def _promote_keyframe(self, idx: int, pyr: Pyramid, t_old_to_cur: Pose) -> Pose:
        """Make the current frame the keyframe and return its world pose."""
        old = self.keyframe
        pts = old.active_points()
        if pts:
            host = np.array([[p.u, p.v] for p in pts], dtype=np.float64)
            idepth = np.array([p.idepth for p in pts])
            x = pixel_rays(old.cam, host) / idepth[:, None]
            x_c = x @ t_old_to_cur.R.T + t_old_to_cur.t
            z = x_c[:, 2]
            ok = z > MIN_DEPTH
            u = old.cam.fx * x_c[:, 0] / np.where(ok, z, 1.0) + old.cam.cx
            v = old.cam.fy * x_c[:, 1] / np.where(ok, z, 1.0) + old.cam.cy
            ok &= (u >= 0) & (u <= old.cam.width - 1) & (v >= 0) & (v <= old.cam.height - 1)
        else:
            vals = [p.idepth for p in old.points]
            idepth = np.array(vals if vals else [1.0])
            ok = np.zeros(0, dtype=bool)
            u = v = z = np.zeros(0)
        if ok.any():
            median_z = float(np.median(z[ok]))
            # percentile bracket: a handful of runaway depths in the old
            # field must not stretch the hypothesis window (a too-wide
            # geomspace is too coarse to land on the true lobe)
            id_lo = 0.5 / float(np.percentile(z[ok], 97.5))
            id_hi = 2.0 / float(np.percentile(z[ok], 2.5))
        else:
            median_z, id_lo, id_hi = 1.0 / max(float(np.median(idepth)), MIN_DEPTH), 1e-3, 1e3
        proj = {}
        for uu, vv, zz in zip(u[ok], v[ok], z[ok]):
            key = (int(round(uu)), int(round(vv)))
            if key not in proj or zz < proj[key]:
                proj[key] = zz

        grads = tuple(compute_gradients(level) for level in pyr.levels)
        pix = select_points(pyr[0], grads[0], self.cfg)

        def transferred_idepth(pu, pv):
            # seed from the projected old field where it covers the pixel:
            # transferred values carry the running scale gauge pointwise,
            # where a flat re-initialization would let each segment's
            # re-searched field drift in scale
            bz, bd2 = None, 7.0
            for du in (-2, -1, 0, 1, 2):
                for dv in (-2, -1, 0, 1, 2):
                    zz = proj.get((pu + du, pv + dv))
                    if zz is not None:
                        d2 = du * du + dv * dv
                        if d2 < bd2:
                            bz, bd2 = zz, d2
            return 1.0 / bz if bz is not None else 1.0 / max(median_z, MIN_DEPTH)

        def fresh_kf():
            points = [TrackedPoint(pu, pv, transferred_idepth(pu, pv)) for pu, pv in pix]
            return Keyframe(idx, pyr, grads, points, Pose.identity(), self.cam)

        new_kf = fresh_kf()
        if not new_kf.usable(self.cfg.min_usable_points) and old.usable(self.cfg.min_usable_points):
            self.t_prev_kf = t_old_to_cur  # keep tracking the old keyframe
            return compose(t_old_to_cur, old.pose_world)

        # the tracked segment pose accumulates per-frame direction noise (a
        # one-frame baseline pins direction poorly), which can land the seed
        # outside the joint solve's pull-in range, and a wrong-basin result
        # still looks converged. So the whole solve -- bounded hypothesis
        # search, per-point polish, joint pose+depth refinement -- runs once
        # from the tracked seed and once from a constant-motion extrapolation
        # of the last accepted segment, and the photometric argmin wins.
        gap = idx - old.id
        tracked = t_old_to_cur
        candidates = [inverse(t_old_to_cur)]
        if self._last_segment is not None:
            seg_pose, seg_gap = self._last_segment
            try:
                candidates.append(inverse(_geodesic_scale(seg_pose, gap / seg_gap)))
            except AngleNearPi:
                pass
        best = None
        for cand in candidates:
            kf_c = fresh_kf()
            search_inverse_depths(kf_c, old.pyramid, cand, self.cfg, id_lo, id_hi)
            refine_inverse_depths(kf_c, old.pyramid, cand, self.cfg,
                                  id_lo=0.5 * id_lo, id_hi=2.0 * id_hi)
            pose_c = joint_two_view_refine(kf_c, old.pyramid, cand, self.cfg)
            res = gauss_newton_align(kf_c, old.pyramid, pose_c, self.cfg)
            converged = res.status == STATUS_CONVERGED
            cost = res.rmse if converged else np.inf
            if best is None or cost < best[0]:
                best = (cost, kf_c, res.pose if converged else pose_c)
        _, new_kf, back = best
        back = joint_two_view_refine(new_kf, old.pyramid, back, self.cfg)
        t_old_to_cur = inverse(back)
        # pin the scale to the projected field: projection carries the
        # running gauge almost exactly, while searched depths inherit any
        # error in the estimated baseline and would compound per promotion
        ratios = []
        for p in new_kf.active_points():
            bz, best_d2 = None, 7.0  # pair against projections within ~2.5 px
            for du in (-2, -1, 0, 1, 2):
                for dv in (-2, -1, 0, 1, 2):
                    zz = proj.get((p.u + du, p.v + dv))
                    if zz is not None:
                        d2 = du * du + dv * dv
                        if d2 < best_d2:
                            bz, best_d2 = zz, d2
            if bz is not None:
                ratios.append(bz * p.idepth)
        if len(ratios) >= 20:
            s = float(np.median(ratios))
            if 0.2 < s < 5.0:
                for p in new_kf.points:
                    p.idepth /= s
                    p.variance /= s * s
                # the joint solve can slide along its scale null direction;
                # keep the segment translation in the same gauge as the map
                t_old_to_cur = Pose(t_old_to_cur.R, t_old_to_cur.t * s)
        # the intermediate frames of the segment were reported against the
        # tracked (uncorrected) endpoint; spread the endpoint correction
        # over them geodesically so the stored chain stays consistent
        try:
            delta = compose(t_old_to_cur, inverse(tracked))
            for j in range(1, gap):
                w = old.id + j
                self.world_poses[w] = compose(_geodesic_scale(delta, j / gap),
                                              self.world_poses[w])
            if gap >= 2:
                self.prev_world = self.world_poses[idx - 1]
        except AngleNearPi:
            pass
        t_w = compose(t_old_to_cur, old.pose_world)
        new_kf.pose_world = t_w
        self.keyframe = new_kf
        self.keyframes.append(new_kf)
        self.t_prev_kf = Pose.identity()
        self._last_segment = (t_old_to_cur, gap)
        # residual scale is per-keyframe; a stale median from the previous
        # segment would re-trigger promotion on every frame
        self.rmse_history.clear()
        return t_w

    # -- recovery -------------------------------------------------------------

    def recovery_attempts(self, pyr: Pyramid, failed_prior: PriorResponse):
        """Ladder of alternative inter-frame seeds; first convergent wins.

        When an external/oracle source exists and was not what just failed,
        it is asked first; then identity, half and double constant motion,
        then the 27 small-rotation perturbations of constant motion.
        """
        candidates = []
        if failed_prior.source not in ("external", "oracle"):
            for src in self.chain:
                if src.kind in ("external", "oracle"):
                    resp = get_prior(
                        [src, PriorSource("identity")],
                        FrameContext(self.frame_index - 1, self.frame_index,
                                     self.prev_world, self.prevprev_world),
                    )
                    if resp.source == src.kind:
                        candidates.append((src.kind, resp.pose))
                    break
        if self.prev_world is not None and self.prevprev_world is not None:
            const = constant_motion_extrapolate(self.prev_world, self.prevprev_world)
        else:
            const = Pose.identity()
        candidates.append(("recovery-identity", Pose.identity()))
        for label, factor in (("recovery-half", 0.5), ("recovery-double", 2.0)):
            try:
                candidates.append((label, _geodesic_scale(const, factor)))
            except AngleNearPi:
                pass
        d = self.cfg.recovery_delta
        for wx in (-d, 0.0, d):
            for wy in (-d, 0.0, d):
                for wz in (-d, 0.0, d):
                    rot = se3_exp(Twist(np.array([wx, wy, wz]), np.zeros(3)))
                    candidates.append(("recovery-rotation", compose(rot, const)))

        for label, m in candidates:
            result = gauss_newton_align(self.keyframe, pyr, compose(m, self.t_prev_kf), self.cfg)
            if result.status == STATUS_CONVERGED:
                return result, label
        raise TrackingLost(f"frame {self.frame_index}: all recovery attempts failed")

    # -- exports ----------------------------------------------------------------

    def trajectory(self):
        from .evaluation import Trajectory

        return Trajectory(
            tuple(self.timestamps), tuple(inverse(p) for p in self.world_poses)
        )


def save_tracking_log(records, path) -> None:
    lines = ["frame,status,rmse,inliers,iters,prior_source"]
    for r in records:
        lines.append(
            f"{r.index},{r.status},{r.rmse:.6e},{r.inliers:.4f},{r.iterations},{r.prior_source}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def save_map_ply(keyframes, path) -> None:
    """All keyframe points backprojected to world, ASCII PLY."""
    rows = []
    for kf in keyframes:
        cam_to_world = inverse(kf.pose_world)
        for p in kf.active_points():
            ray = pixel_rays(kf.cam, np.array([float(p.u), float(p.v)]))
            x_w = cam_to_world.apply(ray / p.idepth)
            gray = int(round(kf.pyramid[0].data[p.v, p.u] * 255.0))
            rows.append((x_w[0], x_w[1], x_w[2], gray))
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(rows)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar intensity",
        "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f} {g}" for x, y, z, g in rows]
    with open(path, "w") as f:
        f.write("\n".join(header + body) + "\n")
