"""Intensity images: bilinear sampling, pyramids, gradients, SSIM, and file I/O.

Images are row-major float64 rasters with normalized intensities in [0, 1].
Sampling validity follows the cell-center convention from :mod:`ddvo.geometry`:
a pixel (u, v) is samplable iff 0 <= u <= width-1 and 0 <= v <= height-1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Luma weights for RGB ingestion.
_LUMA = np.array([0.299, 0.587, 0.114])

# Minimum side length of the coarsest pyramid level.
MIN_LEVEL_DIM = 8


class DimensionMismatch(ValueError):
    pass


class TooSmall(ValueError):
    """Pyramid would shrink a level below the minimum size."""


@dataclass(frozen=True)
class GrayImage:
    """Intensity raster, shape (height, width), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D intensity array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "data", arr)
        arr.flags.writeable = False

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class GradientImage:
    """Central-difference intensity gradients (one-sided at the borders)."""

    gx: np.ndarray
    gy: np.ndarray

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


@dataclass(frozen=True)
class Pyramid:
    """Image pyramid, level 0 full resolution, each level a 2x2 box downsample."""

    levels: tuple

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> GrayImage:
        return self.levels[i]


def sample_values(data: np.ndarray, u, v):
    """Bilinear interpolation of ``data`` at continuous (u, v).

    Returns ``(values, valid)``; values at invalid coordinates are computed
    from clamped indices and must not be used.
    """
    h, w = data.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = np.clip(u - x0, 0.0, 1.0)
    fv = np.clip(v - y0, 0.0, 1.0)
    i00 = data[y0, x0]
    i01 = data[y0, x0 + 1]
    i10 = data[y0 + 1, x0]
    i11 = data[y0 + 1, x0 + 1]
    # endpoint-exact weighting: sampling at integer coords reproduces the
    # stored value bitwise, including at the clamped right/bottom border
    top = (1.0 - fu) * i00 + fu * i01
    bot = (1.0 - fu) * i10 + fu * i11
    return (1.0 - fv) * top + fv * bot, valid


def sample_with_gradient(data: np.ndarray, u, v):
    """Bilinear sample plus the exact in-cell gradient of the interpolant.

    The returned (gx, gy) differentiate the piecewise-bilinear surface itself,
    so finite differences of :func:`sample_values` match them to rounding
    error away from cell boundaries.
    """
    h, w = data.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = np.clip(u - x0, 0.0, 1.0)
    fv = np.clip(v - y0, 0.0, 1.0)
    i00 = data[y0, x0]
    i01 = data[y0, x0 + 1]
    i10 = data[y0 + 1, x0]
    i11 = data[y0 + 1, x0 + 1]
    top = (1.0 - fu) * i00 + fu * i01
    bot = (1.0 - fu) * i10 + fu * i11
    value = (1.0 - fv) * top + fv * bot
    gx = (1.0 - fv) * (i01 - i00) + fv * (i11 - i10)
    gy = (1.0 - fu) * (i10 - i00) + fu * (i11 - i01)
    return value, gx, gy, valid


def bilinear_sample(img: GrayImage, p) -> tuple:
    """Sample one pixel; returns ``(intensity, valid flag)``."""
    value, valid = sample_values(img.data, p[0], p[1])
    return float(value), bool(valid)


def compute_gradients(img: GrayImage) -> GradientImage:
    d = img.data
    gx = np.empty_like(d)
    gy = np.empty_like(d)
    gx[:, 1:-1] = (d[:, 2:] - d[:, :-2]) / 2.0
    gx[:, 0] = d[:, 1] - d[:, 0]
    gx[:, -1] = d[:, -1] - d[:, -2]
    gy[1:-1, :] = (d[2:, :] - d[:-2, :]) / 2.0
    gy[0, :] = d[1, :] - d[0, :]
    gy[-1, :] = d[-1, :] - d[-2, :]
    return GradientImage(gx, gy)


def box_downsample(data: np.ndarray) -> np.ndarray:
    """2x2 box-filter downsample; odd trailing rows/columns are dropped."""
    h2, w2 = data.shape[0] // 2, data.shape[1] // 2
    c = data[: 2 * h2, : 2 * w2]
    return (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2]) / 4.0


def build_pyramid(img: GrayImage, n_levels: int) -> Pyramid:
    """Box-filter pyramid; raises :class:`TooSmall` if any level would fall
    under MIN_LEVEL_DIM on either side."""
    if n_levels < 1:
        raise ValueError("need at least one level")
    w, h = img.width, img.height
    for _ in range(n_levels - 1):
        w, h = w // 2, h // 2
    if min(w, h) < MIN_LEVEL_DIM:
        raise TooSmall(
            f"coarsest level would be {w}x{h}; minimum side is {MIN_LEVEL_DIM}"
        )
    levels = [img]
    for _ in range(n_levels - 1):
        levels.append(GrayImage(box_downsample(levels[-1].data)))
    return Pyramid(tuple(levels))


def window_sums(arr: np.ndarray, window: int):
    """Per-pixel sum of ``arr`` over a centered window clipped to the image.

    Returns ``(sums, counts)`` where counts is the number of in-image pixels
    in each clipped window.
    """
    h, w = arr.shape
    r = window // 2
    # Row-wise then column-wise running sums via padded cumulative sums.
    cs = np.zeros((h + 1, w), dtype=np.float64)
    np.cumsum(arr, axis=0, out=cs[1:])
    lo = np.clip(np.arange(h) - r, 0, h)
    hi = np.clip(np.arange(h) + r + 1, 0, h)
    rowsum = cs[hi, :] - cs[lo, :]
    cs2 = np.zeros((h, w + 1), dtype=np.float64)
    np.cumsum(rowsum, axis=1, out=cs2[:, 1:])
    lo2 = np.clip(np.arange(w) - r, 0, w)
    hi2 = np.clip(np.arange(w) + r + 1, 0, w)
    sums = cs2[:, hi2] - cs2[:, lo2]
    ch = (hi - lo).astype(np.float64)
    cw = (hi2 - lo2).astype(np.float64)
    counts = ch[:, None] * cw[None, :]
    return sums, counts


def ssim_map(a: GrayImage, b: GrayImage, window: int = 3) -> np.ndarray:
    """Per-pixel SSIM with local box-window statistics.

    Windows are clipped at the image border and normalized by their actual
    pixel count. Stabilization constants C1 = (0.01 L)^2, C2 = (0.03 L)^2
    with dynamic range L = 1.
    """
    if a.data.shape != b.data.shape:
        raise DimensionMismatch(f"{a.data.shape} vs {b.data.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    sa, n = window_sums(a.data, window)
    sb, _ = window_sums(b.data, window)
    mu_a = sa / n
    mu_b = sb / n
    e_aa = window_sums(a.data * a.data, window)[0] / n
    e_bb = window_sums(b.data * b.data, window)[0] / n
    e_ab = window_sums(a.data * b.data, window)[0] / n
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    value = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return np.clip(value, -1.0, 1.0)


def erode_mask(mask: np.ndarray, window: int) -> np.ndarray:
    """True where every in-image pixel of the centered window is True."""
    inv = (~mask).astype(np.float64)
    bad, _ = window_sums(inv, window)
    return bad == 0.0


# ---------------------------------------------------------------------------
# File ingestion / output


def to_gray(arr: np.ndarray) -> GrayImage:
    """Normalize an 8-bit grayscale or RGB array to a GrayImage."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(np.float64) @ _LUMA
    else:
        arr = arr.astype(np.float64)
    return GrayImage(np.clip(arr / 255.0, 0.0, 1.0))


def load_image(path) -> GrayImage:
    """Read a PNG / PGM / PPM image; RGB inputs are converted via luma weights."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm"):
        return to_gray(_read_pnm(path))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def _read_pnm(path: Path) -> np.ndarray:
    """Binary PGM (P5) / PPM (P6) reader."""
    raw = path.read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        # token scanner that skips whitespace and '#' comments
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ValueError(f"unsupported PNM magic {magic!r} in {path}")
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval} in {path}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    if channels == 1:
        return data.reshape(h, w)
    return data.reshape(h, w, 3)


def save_pgm(img: GrayImage, path) -> None:
    """Write an 8-bit binary PGM (P5)."""
    data = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())
