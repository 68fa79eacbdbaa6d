"""Trajectory I/O, similarity alignment, and odometry error metrics.

File poses are interpreted camera-to-world (the translation column is the
camera position in world coordinates), matching how KITTI pose files and TUM
trajectory files are used by the community tooling. Association is by frame
index for KITTI-style data and by nearest timestamp for TUM-style data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, compose, inverse, nearest_rotation, rotation_angle, rotation_defect

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonOrthonormal(ValueError):
    """Rotation block deviates from orthonormality beyond repair tolerance."""


class Degenerate(ValueError):
    """Alignment input is coincident or collinear."""


class NoOverlap(ValueError):
    """Trajectories share too few associated frames."""


class TooShort(ValueError):
    """Ground-truth path is shorter than the smallest evaluation length."""


@dataclass(frozen=True)
class Trajectory:
    timestamps: tuple
    poses: tuple
    frame_ids: tuple = None

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timestamps)
        poses = tuple(self.poses)
        ids = self.frame_ids
        ids = tuple(range(len(poses))) if ids is None else tuple(int(i) for i in ids)
        if not len(ts) == len(poses) == len(ids):
            raise ValueError("timestamps, poses, frame_ids must have equal length")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame indices must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "frame_ids", ids)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])


@dataclass(frozen=True)
class ErrorStats:
    max: float
    mean: float
    min: float
    rmse: float
    std: float

    @staticmethod
    def from_series(errors: np.ndarray) -> "ErrorStats":
        e = np.asarray(errors, dtype=np.float64)
        mean = float(e.mean())
        rmse = float(np.sqrt((e * e).mean()))
        # std from the exact identity so std^2 + mean^2 == rmse^2 holds
        std = float(np.sqrt(max(rmse * rmse - mean * mean, 0.0)))
        return ErrorStats(float(e.max()), mean, float(e.min()), rmse, std)


@dataclass(frozen=True)
class KittiErrors:
    t_err: float  # percent
    r_err: float  # degrees per 100 m

    def __post_init__(self):
        if self.t_err < 0.0 or self.r_err < 0.0:
            raise ValueError("errors must be nonnegative")


# ---------------------------------------------------------------------------
# File formats


def _fix_rotation(r: np.ndarray, line: int) -> np.ndarray:
    if rotation_defect(r) > 1e-3:
        raise NonOrthonormal(f"line {line}: rotation deviates from orthonormal by > 1e-3")
    return nearest_rotation(r)


def load_trajectory_kitti(path) -> Trajectory:
    poses = []
    n_parsed = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 12:
            raise ParseError(f"expected 12 values, got {len(parts)}", lineno)
        try:
            vals = np.array([float(x) for x in parts])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        mat = vals.reshape(3, 4)
        poses.append(Pose(_fix_rotation(mat[:, :3], lineno), mat[:, 3]))
        n_parsed += 1
    return Trajectory(tuple(float(i) for i in range(n_parsed)), tuple(poses))


def save_trajectory_kitti(traj: Trajectory, path) -> None:
    lines = []
    for pose in traj.poses:
        lines.append(" ".join(f"{v:.12e}" for v in pose.matrix34().reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def _quat_from_rotation(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw), qw >= 0."""
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, s / 4.0]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[i] = s / 4.0
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def load_trajectory_tum(path) -> Trajectory:
    stamps, poses = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 values, got {len(parts)}", lineno)
        try:
            vals = np.array([float(x) for x in parts])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        q = vals[4:8]
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise NonOrthonormal(f"line {lineno}: quaternion norm off by > 1e-3")
        poses.append(Pose(_rotation_from_quat(q / norm), vals[1:4]))
        stamps.append(vals[0])
    return Trajectory(tuple(stamps), tuple(poses))


def save_trajectory_tum(traj: Trajectory, path) -> None:
    lines = []
    for ts, pose in zip(traj.timestamps, traj.poses):
        q = _quat_from_rotation(pose.R)
        fields = [f"{ts:.9f}"] + [f"{v:.12e}" for v in (*pose.t, *q)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path, format: str = "kitti") -> Trajectory:
    if format == "kitti":
        return load_trajectory_kitti(path)
    if format == "tum":
        return load_trajectory_tum(path)
    raise ValueError(f"unknown trajectory format {format!r}")


def save_trajectory(traj: Trajectory, path, format: str = "kitti") -> None:
    if format == "kitti":
        save_trajectory_kitti(traj, path)
    elif format == "tum":
        save_trajectory_tum(traj, path)
    else:
        raise ValueError(f"unknown trajectory format {format!r}")


# ---------------------------------------------------------------------------
# Association


def associate(est: Trajectory, gt: Trajectory, by: str = "index", max_dt: float = 0.02):
    """Pair up frames; returns (est_indices, gt_indices) into the pose lists."""
    if by == "index":
        gt_lookup = {fid: k for k, fid in enumerate(gt.frame_ids)}
        pairs = [(k, gt_lookup[fid]) for k, fid in enumerate(est.frame_ids) if fid in gt_lookup]
    elif by == "time":
        gt_ts = np.asarray(gt.timestamps)
        pairs = []
        last_j = -1
        for k, ts in enumerate(est.timestamps):
            j = int(np.argmin(np.abs(gt_ts - ts)))
            if abs(gt_ts[j] - ts) <= max_dt and j > last_j:
                pairs.append((k, j))
                last_j = j
    else:
        raise ValueError(f"unknown association mode {by!r}")
    ei = np.array([p[0] for p in pairs], dtype=int)
    gi = np.array([p[1] for p in pairs], dtype=int)
    return ei, gi


# ---------------------------------------------------------------------------
# Alignment


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale: bool = False, by: str = "index"):
    """Least-squares similarity (rigid when with_scale is off) mapping est
    positions onto gt positions: minimizes sum ||gt - (s R est + t)||^2.

    Returns (scale, Pose(R, t)).
    """
    ei, gi = associate(est, gt, by)
    x = est.positions()[ei]
    y = gt.positions()[gi]
    return umeyama_points(x, y, with_scale)


def umeyama_points(x: np.ndarray, y: np.ndarray, with_scale: bool = False):
    """Umeyama 1991 on raw point sets (rows are points; x maps onto y)."""
    if len(x) < 3:
        raise Degenerate("need at least 3 associated position pairs")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / len(x)
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 1e-15 or s[1] <= 1e-9 * s[0]:
        raise Degenerate("positions are coincident or collinear")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    if with_scale:
        var_x = (xc * xc).sum() / len(x)
        scale = float((s * d).sum() / var_x)
    else:
        scale = 1.0
    t = mu_y - scale * rot @ mu_x
    return scale, Pose(rot, t)


def _apply_similarity(scale: float, pose: Pose, points: np.ndarray) -> np.ndarray:
    return scale * (points @ pose.R.T) + pose.t


# ---------------------------------------------------------------------------
# Metrics


_ALIGN_MODES = {"none": None, "rigid": False, "sim": True, "similarity": True}


def ape(est: Trajectory, gt: Trajectory, align: str = "none", by: str = "index"):
    """Absolute pose error: per-frame translational gap after optional
    alignment. Returns (ErrorStats, series of (frame_id, error))."""
    if align not in _ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {align!r}")
    ei, gi = associate(est, gt, by)
    if len(ei) < 2:
        raise NoOverlap("fewer than 2 associated frames")
    p_est = est.positions()[ei]
    p_gt = gt.positions()[gi]
    with_scale = _ALIGN_MODES[align]
    if with_scale is not None:
        scale, pose = umeyama_points(p_est, p_gt, with_scale)
        p_est = _apply_similarity(scale, pose, p_est)
    errors = np.linalg.norm(p_gt - p_est, axis=1)
    ids = [est.frame_ids[k] for k in ei]
    return ErrorStats.from_series(errors), list(zip(ids, errors.tolist()))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1, by: str = "index"):
    """Relative pose error over delta-frame intervals.

    Error transform E = inverse(gt_rel) . est_rel; reports translation norm
    and rotation angle statistics plus the per-pair series.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    ei, gi = associate(est, gt, by)
    if len(ei) < delta + 1:
        raise NoOverlap("need at least delta+1 associated frames")
    t_errs, r_errs, series = [], [], []
    for k in range(len(ei) - delta):
        est_rel = compose(inverse(est.poses[ei[k]]), est.poses[ei[k + delta]])
        gt_rel = compose(inverse(gt.poses[gi[k]]), gt.poses[gi[k + delta]])
        err = compose(inverse(gt_rel), est_rel)
        te = float(np.linalg.norm(err.t))
        re = rotation_angle(err.R)
        t_errs.append(te)
        r_errs.append(re)
        series.append((est.frame_ids[ei[k]], te, re))
    return ErrorStats.from_series(t_errs), ErrorStats.from_series(r_errs), series


def _cumulative_distances(positions: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_errors(est: Trajectory, gt: Trajectory, lengths=KITTI_LENGTHS, by: str = "index"):
    """Odometry-benchmark style averages over all (start, length) subsequences.

    For each start frame and each length L reached along the cumulative gt
    path, the error transform is inverse(est_rel) . gt_rel; translation error
    is ||trans||/L (reported as percent), rotation error angle/L (reported as
    degrees per 100 m). Returns (KittiErrors, per-length rows
    (L, t_err_percent, r_err_deg_per_100m, count)).
    """
    ei, gi = associate(est, gt, by)
    if len(ei) < 2:
        raise NoOverlap("fewer than 2 associated frames")
    dist = _cumulative_distances(gt.positions()[gi])
    if dist[-1] < min(lengths):
        raise TooShort(f"gt path {dist[-1]:.1f} shorter than {min(lengths)}")
    per_length = {length: [] for length in lengths}
    for start in range(len(ei)):
        for length in lengths:
            target = dist[start] + length
            stop = int(np.searchsorted(dist, target))
            if stop >= len(ei):
                continue
            est_rel = compose(inverse(est.poses[ei[start]]), est.poses[ei[stop]])
            gt_rel = compose(inverse(gt.poses[gi[start]]), gt.poses[gi[stop]])
            err = compose(inverse(est_rel), gt_rel)
            per_length[length].append(
                (float(np.linalg.norm(err.t)) / length, rotation_angle(err.R) / length)
            )
    rows = []
    all_t, all_r = [], []
    for length in lengths:
        pairs = per_length[length]
        if not pairs:
            continue
        t_vals = [p[0] for p in pairs]
        r_vals = [p[1] for p in pairs]
        all_t.extend(t_vals)
        all_r.extend(r_vals)
        rows.append(
            (
                length,
                100.0 * float(np.mean(t_vals)),
                float(np.rad2deg(np.mean(r_vals)) * 100.0),
                len(pairs),
            )
        )
    if not all_t:
        raise TooShort("no subsequence reaches the smallest evaluation length")
    result = KittiErrors(
        t_err=100.0 * float(np.mean(all_t)),
        r_err=float(np.rad2deg(np.mean(all_r)) * 100.0),
    )
    return result, rows
