"""Unsupervised scale-consistency loss kernels over images, depths, and poses.

All losses are pure functions of their inputs. Partiality is carried by
boolean masks, and every masked reduction canonicalizes the values stored at
invalid entries first, so results are bit-for-bit independent of whatever
garbage an invalid pixel holds.

Pose direction convention: a snippet pose ``T_ab`` ("a to b") maps frame-a
camera coordinates into frame-b camera coordinates, which is exactly the
transform needed to look up frame-b pixels for frame-a's grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Pose, Twist, compose, inverse, se3_exp, warp_grid
from .imaging import (
    DimensionMismatch,
    GrayImage,
    compute_gradients,
    erode_mask,
    sample_values,
    ssim_map,
)

DEPTH_MAGIC = b"DDVODPT1"


class EmptyMask(ValueError):
    """No valid pixels to reduce over."""


class DegenerateDepth(ValueError):
    """Mean inverse depth is zero; normalization impossible."""


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth (scene units) with a validity mask.

    Invalid entries are stored as 0 so equal masks imply equal rasters.
    """

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if d.shape != m.shape or d.ndim != 2:
            raise ValueError("depth and mask must be equal 2-D shapes")
        m = m & np.isfinite(d) & (d > 0.0)
        d = np.where(m, d, 0.0)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "valid", m)
        d.flags.writeable = False
        m.flags.writeable = False

    @staticmethod
    def from_array(d: np.ndarray) -> "DepthMap":
        """All finite positive entries valid."""
        d = np.asarray(d, dtype=np.float64)
        return DepthMap(d, np.isfinite(d) & (d > 0.0))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """Balance factors of the total loss and the SSIM/L1 mixing weight."""

    alpha: float = 0.5
    beta: float = 0.5
    gamma_w: float = 0.5
    delta1: float = 0.85

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma_w) < 0.0:
            raise ValueError("balance factors must be nonnegative")
        if not 0.0 <= self.delta1 <= 1.0:
            raise ValueError("delta1 must lie in [0, 1]")


@dataclass(frozen=True)
class SnippetSample:
    """Three consecutive frames with depths and the three inter-frame poses.

    ``frames[1]`` is the middle (target) frame. ``pose_1_2`` maps frame-1
    coordinates into frame-2 coordinates, and so on.
    """

    frames: tuple
    depths: tuple
    pose_1_2: Pose
    pose_2_3: Pose
    pose_1_3: Pose
    cam: CameraModel

    def __post_init__(self):
        if len(self.frames) != 3 or len(self.depths) != 3:
            raise ValueError("a snippet holds exactly three frames and depths")
        shape = self.frames[0].data.shape
        for f in self.frames:
            if f.data.shape != shape:
                raise DimensionMismatch("frame sizes differ")
        for d in self.depths:
            if d.data.shape != shape:
                raise DimensionMismatch("depth size differs from frames")
        if (self.cam.height, self.cam.width) != shape:
            raise DimensionMismatch("camera size differs from frames")


def reconstruct_view(
    src: GrayImage, depth_of_target: DepthMap, pose_t_to_src: Pose, cam: CameraModel
):
    """Resample ``src`` onto the target grid through pose and target depth.

    Returns ``(GrayImage, mask)``; the mask is false where the target depth is
    invalid, the warped point lands behind the camera, or the sample falls out
    of bounds. Invalid reconstruction pixels are set to 0.
    """
    uv, _, valid = warp_grid(cam, pose_t_to_src, depth_of_target.data, depth_of_target.valid)
    vals, samp_ok = sample_values(src.data, uv[..., 0], uv[..., 1])
    mask = valid & samp_ok
    return GrayImage(np.where(mask, vals, 0.0)), mask


def photometric_similarity(
    target: GrayImage, recon: GrayImage, mask: np.ndarray, delta1: float, window: int = 3
) -> float:
    """Masked mean of ``delta1 * (1 - SSIM)/2 + (1 - delta1) * |diff|``.

    Pixels whose SSIM window touches any invalid pixel are excluded from the
    mean entirely.
    """
    if target.data.shape != recon.data.shape or mask.shape != target.data.shape:
        raise DimensionMismatch("target/recon/mask sizes differ")
    recon_c = GrayImage(np.where(mask, recon.data, 0.0))
    ok = erode_mask(mask, window)
    if not ok.any():
        raise EmptyMask("no pixel has a fully valid SSIM window")
    ssim = ssim_map(target, recon_c, window)
    integrand = delta1 * (1.0 - ssim) / 2.0 + (1.0 - delta1) * np.abs(
        target.data - recon_c.data
    )
    return float(integrand[ok].mean())


def view_reconstruction_loss(sample: SnippetSample, delta1: float = 0.85, window: int = 3) -> float:
    """Bidirectional view-reconstruction loss, both directions anchored on the
    middle frame's depth map."""
    i1, i2, i3 = sample.frames
    d2 = sample.depths[1]
    recon1, m1 = reconstruct_view(i1, d2, inverse(sample.pose_1_2), sample.cam)
    recon3, m3 = reconstruct_view(i3, d2, sample.pose_2_3, sample.cam)
    return photometric_similarity(i2, recon1, m1, delta1, window) + photometric_similarity(
        i2, recon3, m3, delta1, window
    )


def _masked_gradient(values: np.ndarray, valid: np.ndarray):
    """Central differences with one-sided borders, plus per-pixel validity
    (a gradient is valid only if every pixel it reads is valid)."""
    gx = np.empty_like(values)
    gy = np.empty_like(values)
    okx = np.empty_like(valid)
    oky = np.empty_like(valid)
    gx[:, 1:-1] = (values[:, 2:] - values[:, :-2]) / 2.0
    gx[:, 0] = values[:, 1] - values[:, 0]
    gx[:, -1] = values[:, -1] - values[:, -2]
    okx[:, 1:-1] = valid[:, 2:] & valid[:, :-2]
    okx[:, 0] = valid[:, 1] & valid[:, 0]
    okx[:, -1] = valid[:, -1] & valid[:, -2]
    gy[1:-1, :] = (values[2:, :] - values[:-2, :]) / 2.0
    gy[0, :] = values[1, :] - values[0, :]
    gy[-1, :] = values[-1, :] - values[-2, :]
    oky[1:-1, :] = valid[2:, :] & valid[:-2, :]
    oky[0, :] = valid[1, :] & valid[0, :]
    oky[-1, :] = valid[-1, :] & valid[-2, :]
    return gx, gy, okx, oky


def smoothness_loss(depth: DepthMap, img: GrayImage, literal_sign: bool = False) -> float:
    """Edge-weighted smoothness of the mean-normalized inverse depth.

    The default weight is exp(-|dI|) so image edges relax the penalty;
    ``literal_sign`` switches to the signed exp(+dI) variant.
    """
    if depth.data.shape != img.data.shape:
        raise DimensionMismatch("depth size differs from image")
    if not depth.valid.any():
        raise EmptyMask("depth map has no valid pixels")
    inv = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.data, 1.0), 0.0)
    mean_inv = inv[depth.valid].mean()
    if not mean_inv > 0.0:
        raise DegenerateDepth("mean inverse depth is zero")
    dstar = inv / mean_inv
    gdx, gdy, okx, oky = _masked_gradient(dstar, depth.valid)
    grad_i = compute_gradients(img)
    if literal_sign:
        wx = np.exp(grad_i.gx)
        wy = np.exp(grad_i.gy)
    else:
        wx = np.exp(-np.abs(grad_i.gx))
        wy = np.exp(-np.abs(grad_i.gy))
    ok = depth.valid & okx & oky
    if not ok.any():
        raise EmptyMask("no pixel has a valid depth gradient")
    term = np.abs(gdx) * wx + np.abs(gdy) * wy
    return float(term[ok].mean())


def depth_alignment_loss(sample: SnippetSample, source_index: int, use_ssim: bool = False) -> float:
    """L1 gap between projected target depth and the warped source depth map.

    ``source_index`` selects frame 0 or frame 2 of the snippet; the middle
    frame is always the target. ``use_ssim`` swaps the L1 for an SSIM-style
    distance on range-normalized depths (the alternative the surrounding text
    of the constraint suggests).
    """
    if source_index not in (0, 2):
        raise ValueError("source_index must be 0 or 2")
    d_t = sample.depths[1]
    d_s = sample.depths[source_index]
    pose = inverse(sample.pose_1_2) if source_index == 0 else sample.pose_2_3
    uv, z_src, ok_warp = warp_grid(sample.cam, pose, d_t.data, d_t.valid)
    samp, ok_samp = sample_values(d_s.data, uv[..., 0], uv[..., 1])
    frac_valid, _ = sample_values(d_s.valid.astype(np.float64), uv[..., 0], uv[..., 1])
    mask = ok_warp & ok_samp & (frac_valid == 1.0) & (z_src > 0.0)
    if not mask.any():
        raise EmptyMask("no depth correspondence survives warping")
    if not use_ssim:
        return float(np.abs(z_src - samp)[mask].mean())
    scale = max(z_src[mask].max(), samp[mask].max())
    a = GrayImage(np.where(mask, z_src, 0.0) / scale)
    b = GrayImage(np.where(mask, samp, 0.0) / scale)
    ok = erode_mask(mask, 3)
    if not ok.any():
        raise EmptyMask("no pixel has a fully valid SSIM window")
    return float(((1.0 - ssim_map(a, b, 3)) / 2.0)[ok].mean())


def pose_to_trajectory_loss(sample: SnippetSample) -> float:
    """L1 gap between frame-3 reconstructions via the direct and the composed
    1-to-3 pose, both on frame 1's grid with frame 1's depth.

    Exactly zero whenever ``pose_1_3 == compose(pose_2_3, pose_1_2)`` (the
    frame-1-to-frame-3 chain), for any images and depths.
    """
    i3 = sample.frames[2]
    d1 = sample.depths[0]
    composed = compose(sample.pose_2_3, sample.pose_1_2)
    recon_direct, m_direct = reconstruct_view(i3, d1, sample.pose_1_3, sample.cam)
    recon_chain, m_chain = reconstruct_view(i3, d1, composed, sample.cam)
    mask = m_direct & m_chain
    if not mask.any():
        raise EmptyMask("reconstructions share no valid pixel")
    return float(np.abs(recon_direct.data - recon_chain.data)[mask].mean())


def total_loss(
    sample: SnippetSample,
    w: LossWeights,
    window: int = 3,
    smoothness_literal: bool = False,
):
    """Weighted total loss; returns ``(value, per-term breakdown dict)``."""
    terms = {
        "view_reconstruction": view_reconstruction_loss(sample, w.delta1, window),
        "smoothness": smoothness_loss(sample.depths[1], sample.frames[1], smoothness_literal),
        "depth_alignment": depth_alignment_loss(sample, 0) + depth_alignment_loss(sample, 2),
        "pose_to_trajectory": pose_to_trajectory_loss(sample),
    }
    value = (
        terms["view_reconstruction"]
        + w.alpha * terms["smoothness"]
        + w.beta * terms["depth_alignment"]
        + w.gamma_w * terms["pose_to_trajectory"]
    )
    return value, terms


_POSE_FIELDS = ("pose_1_2", "pose_2_3", "pose_1_3")


def _replace_pose(sample: SnippetSample, name: str, pose: Pose) -> SnippetSample:
    kwargs = {
        "frames": sample.frames,
        "depths": sample.depths,
        "pose_1_2": sample.pose_1_2,
        "pose_2_3": sample.pose_2_3,
        "pose_1_3": sample.pose_1_3,
        "cam": sample.cam,
    }
    kwargs[name] = pose
    return SnippetSample(**kwargs)


def loss_gradient_fd(
    sample: SnippetSample, w: LossWeights, wrt: str, h: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of the total loss with respect to a
    left-composed twist perturbation of the selected pose.

    ``wrt`` is one of ``pose_1_2``, ``pose_2_3``, ``pose_1_3``. Twist
    coordinate order is (omega, v).
    """
    if wrt not in _POSE_FIELDS:
        raise ValueError(f"wrt must be one of {_POSE_FIELDS}")
    base = getattr(sample, wrt)
    grad = np.empty(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        plus = compose(se3_exp(Twist.from_vector(e)), base)
        minus = compose(se3_exp(Twist.from_vector(-e)), base)
        lp, _ = total_loss(_replace_pose(sample, wrt, plus), w)
        lm, _ = total_loss(_replace_pose(sample, wrt, minus), w)
        grad[i] = (lp - lm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Depth raster I/O


def save_depth_raster(depth: DepthMap, path) -> None:
    """Binary float32 raster: magic, u32 width, u32 height, row-major data.

    Invalid pixels are written as 0 (little-endian throughout).
    """
    header = DEPTH_MAGIC + struct.pack("<II", depth.width, depth.height)
    Path(path).write_bytes(header + depth.data.astype("<f4").tobytes())


def load_depth_raster(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if raw[:8] != DEPTH_MAGIC:
        raise ValueError(f"bad depth raster magic in {path}")
    w, h = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw, dtype="<f4", count=w * h, offset=16).astype(np.float64)
    data = data.reshape(h, w)
    return DepthMap(data, np.isfinite(data) & (data > 0.0))


def save_depth_png16(depth: DepthMap, path) -> None:
    """16-bit grayscale PNG in millimeters; 0 marks invalid."""
    from PIL import Image

    mm = np.where(depth.valid, np.clip(np.rint(depth.data * 1000.0), 1, 65535), 0)
    Image.fromarray(mm.astype(np.uint16)).save(Path(path))


def load_depth_png16(path) -> DepthMap:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float64)
    return DepthMap(arr / 1000.0, arr > 0)


def load_depth(path) -> DepthMap:
    """Dispatch on extension: .f32 raster or 16-bit .png."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_depth_png16(path)
    return load_depth_raster(path)
