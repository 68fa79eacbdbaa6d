"""Command-line entry points: run / eval / synth / checks.

Exit codes: 0 success, 1 configuration or I/O error, 2 tracking lost,
3 self-check failure. Logging level comes from the DDVO_LOG environment
variable (error | info | debug).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    NoOverlap,
    ParseError,
    TooShort,
    ape,
    kitti_errors,
    load_trajectory,
    rpe,
    save_trajectory_kitti,
    save_trajectory_tum,
)
from .geometry import CameraModel, Pose, compose, inverse
from .imaging import GrayImage, load_image
from .losses import (
    DepthMap,
    LossWeights,
    SnippetSample,
    pose_to_trajectory_loss,
    smoothness_loss,
    total_loss,
)
from .priors import PriorSource
from .synth import PRESETS, generate_sequence, make_scene_and_path, render_frame
from .tracker import TrackerConfig, TrackingLost, VisualOdometry, save_map_ply, save_tracking_log

log = logging.getLogger("ddvo")

_TRACKER_KEYS = {
    "levels": int,
    "target_points": int,
    "gradient_threshold": float,
    "huber_k": float,
    "max_iterations": int,
    "convergence_threshold": float,
    "kf_flow_threshold": float,
    "kf_residual_factor": float,
    "min_valid_residuals": int,
    "min_inlier_fraction": float,
    "min_usable_points": int,
    "recovery_delta": float,
}

_RUN_KEYS = (
    "out",
    "intrinsics",
    "prior",
    "prior_chain",
    "prior_endpoint",
    "prior_timeout_ms",
    "prior_cmd",
    "oracle_gt",
    "oracle_noise_rot",
    "oracle_noise_trans",
    "seed",
)


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DDVO_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _read_config_file(path: Path) -> dict:
    """`key = value` lines, '#' comments."""
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = text.partition("=")
        values[key.strip()] = val.strip()
    return values


def _load_intrinsics(path: Path) -> CameraModel:
    parts = path.read_text().split()
    if len(parts) != 6:
        raise ValueError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(x) for x in parts[:4])
    return CameraModel(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def _build_chain(cfg: dict):
    """Prior chain from the resolved run config; always ends with identity."""
    spec = cfg.get("prior_chain") or cfg.get("prior") or "constmotion"
    endpoint = cfg.get("prior_endpoint")
    if cfg.get("prior_cmd"):
        endpoint = "cmd:" + cfg["prior_cmd"]
    timeout = float(cfg.get("prior_timeout_ms") or 100.0)
    oracle_gt = None
    if any(k.strip() == "oracle" for k in spec.split(",")):
        gt_path = cfg.get("oracle_gt")
        if not gt_path:
            raise ValueError("oracle prior needs --oracle-gt")
        oracle_gt = load_trajectory(gt_path, "kitti")
    chain = []
    for kind in (k.strip() for k in spec.split(",")):
        if not kind:
            continue
        if kind == "external" and not endpoint:
            raise ValueError("external prior needs --prior-endpoint or --prior-cmd")
        chain.append(
            PriorSource(
                kind,
                endpoint=endpoint,
                timeout_ms=timeout,
                gt=oracle_gt,
                noise_rot_deg=float(cfg.get("oracle_noise_rot") or 0.0),
                noise_trans_frac=float(cfg.get("oracle_noise_trans") or 0.0),
                seed=int(cfg.get("seed") or 0),
            )
        )
    if not chain or chain[-1].kind != "identity":
        chain.append(PriorSource("identity"))
    return chain


def _resolve_run_config(args) -> dict:
    """defaults < config file < command-line flags."""
    resolved = {}
    if args.config:
        file_cfg = _read_config_file(Path(args.config))
        for key, val in file_cfg.items():
            if key not in _TRACKER_KEYS and key not in _RUN_KEYS and key != "no_recovery":
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = val
    for key in _RUN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = str(val)
    if args.no_recovery:
        resolved["no_recovery"] = "true"
    return resolved


def _tracker_config(resolved: dict) -> TrackerConfig:
    overrides = {}
    for key, cast in _TRACKER_KEYS.items():
        if key in resolved:
            overrides[key] = cast(resolved[key])
    return TrackerConfig(**overrides)


def _input_hash(paths) -> str:
    digest = hashlib.sha256()
    for p in paths:
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def cmd_run(args) -> int:
    try:
        resolved = _resolve_run_config(args)
        input_dir = Path(args.input_dir)
        frame_dir = input_dir / "frames" if (input_dir / "frames").is_dir() else input_dir
        frame_files = sorted(
            p for p in frame_dir.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".png")
        )
        if not frame_files:
            print(f"error: no frames found under {frame_dir}", file=sys.stderr)
            return 1
        intr_path = Path(resolved.get("intrinsics") or input_dir / "intrinsics.txt")
        if not intr_path.is_file():
            print(f"error: intrinsics file not found: {intr_path}", file=sys.stderr)
            return 1
        cam = _load_intrinsics(intr_path)
        tracker_cfg = _tracker_config(resolved)
        chain = _build_chain(resolved)
        out_dir = Path(resolved.get("out") or input_dir / "ddvo_out")
        out_dir.mkdir(parents=True, exist_ok=True)
    except (OSError, ValueError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    vo = VisualOdometry(
        cam, tracker_cfg, chain, enable_recovery=resolved.get("no_recovery") != "true"
    )
    code = 0
    try:
        for k, path in enumerate(frame_files):
            rec = vo.process_frame(load_image(path), 0.1 * k)
            log.info("frame %d: %s rmse=%.4g prior=%s", rec.index, rec.status, rec.rmse,
                     rec.prior_source)
    except TrackingLost as exc:
        print(f"tracking lost: {exc}", file=sys.stderr)
        code = 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    traj = vo.trajectory()
    save_trajectory_kitti(traj, out_dir / "trajectory_kitti.txt")
    save_trajectory_tum(traj, out_dir / "trajectory_tum.txt")
    save_tracking_log(vo.records, out_dir / "tracking_log.csv")
    save_map_ply(vo.keyframes, out_dir / "map.ply")
    manifest = [f"version = {__version__}"]
    for key in sorted(set(resolved) | {"input_dir"}):
        manifest.append(f"{key} = {resolved.get(key, str(input_dir))}")
    manifest.append(f"n_frames = {len(frame_files)}")
    manifest.append(f"input_sha256 = {_input_hash(frame_files + [intr_path])}")
    (out_dir / "run_manifest.txt").write_text("\n".join(manifest) + "\n")
    return code


def cmd_eval(args) -> int:
    try:
        est = load_trajectory(args.est, args.format)
        gt = load_trajectory(args.gt, args.format)
        by = "time" if args.format == "tum" else "index"
        ape_stats, ape_series = ape(est, gt, align=args.align, by=by)
        rpe_t, rpe_r, rpe_series = rpe(est, gt, delta=args.rpe_delta, by=by)
    except (OSError, ValueError, ParseError, NoOverlap) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("metric,stat,value")
    for name, stats in (("ape", ape_stats), ("rpe_trans", rpe_t), ("rpe_rot", rpe_r)):
        for stat in ("max", "mean", "min", "rmse", "std"):
            print(f"{name},{stat},{getattr(stats, stat):.9e}")
    try:
        kit, _ = kitti_errors(est, gt, by=by)
        print(f"kitti,t_err_percent,{kit.t_err:.9e}")
        print(f"kitti,r_err_deg_per_100m,{kit.r_err:.9e}")
    except (TooShort, NoOverlap) as exc:
        print(f"note: kitti errors skipped: {exc}", file=sys.stderr)
    if args.plot_csv:
        out = Path(args.plot_csv)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ape_series.csv", "w") as f:
            f.write("frame,ape\n")
            for fid, err in ape_series:
                f.write(f"{fid},{err:.9e}\n")
        with open(out / "rpe_series.csv", "w") as f:
            f.write("frame,rpe_trans,rpe_rot\n")
            for fid, te, re in rpe_series:
                f.write(f"{fid},{te:.9e},{re:.9e}\n")
    return 0


def cmd_synth(args) -> int:
    try:
        generate_sequence(
            args.preset, args.seed, args.outdir, n_frames=args.frames,
            width=args.width, height=args.height,
        )
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Self checks


def _exact_camera(width: int = 64, height: int = 48) -> CameraModel:
    # power-of-two focal length: the identity warp round-trips bitwise
    return CameraModel(64.0, 64.0, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def _gt_snippet(seed: int = 5, width: int = 96, height: int = 72) -> SnippetSample:
    scene, path = make_scene_and_path("straight-line", seed, 3, width, height)
    frames, depths = [], []
    for pose in path.poses:
        img, depth = render_frame(scene, path.cam, pose)
        frames.append(img)
        depths.append(depth)
    rel = lambda a, b: compose(path.poses[b], inverse(path.poses[a]))
    return SnippetSample(
        frames=tuple(frames),
        depths=tuple(depths),
        pose_1_2=rel(0, 1),
        pose_2_3=rel(1, 2),
        pose_1_3=rel(0, 2),
        cam=path.cam,
    )


def _degenerate_snippet() -> SnippetSample:
    cam = _exact_camera()
    rng = np.random.default_rng(3)
    img = GrayImage(rng.uniform(0.1, 0.9, (cam.height, cam.width)))
    depth = DepthMap.from_array(np.full((cam.height, cam.width), 2.0))
    eye = Pose.identity()
    return SnippetSample((img, img, img), (depth, depth, depth), eye, eye, eye, cam)


def _random_pose(rng, rot_scale: float, trans_scale: float) -> Pose:
    from .geometry import Twist, se3_exp

    omega = rng.normal(0.0, rot_scale, 3)
    v = rng.normal(0.0, trans_scale, 3)
    return se3_exp(Twist(omega, v))


def _perturbed(sample: SnippetSample, rng, rot: float, trans: float) -> SnippetSample:
    return SnippetSample(
        sample.frames,
        sample.depths,
        compose(_random_pose(rng, rot, trans), sample.pose_1_2),
        compose(_random_pose(rng, rot, trans), sample.pose_2_3),
        compose(_random_pose(rng, rot, trans), sample.pose_1_3),
        sample.cam,
    )


def run_checks(perturb: float = 0.0, smoothness_literal: bool = False):
    """Loss terms on a ground-truth sample plus the module invariants.

    Returns (rows, ok): rows are (name, value) pairs; an invariant passes
    when its reported value is within the stated bound.
    """
    rows = []
    failures = []

    def check(name, value, bound):
        rows.append((name, value))
        if not value <= bound:
            failures.append(name)

    sample = _gt_snippet()
    weights = LossWeights()
    total, terms = total_loss(sample, weights, smoothness_literal=smoothness_literal)
    for name in ("view_reconstruction", "smoothness", "depth_alignment", "pose_to_trajectory"):
        rows.append((name, terms[name]))
    rows.append(("total", total))

    # all losses vanish on identical frames + identity poses + constant depth
    degen_total, _ = total_loss(_degenerate_snippet(), weights)
    check("degenerate_identity_zero", degen_total + perturb, 1e-12)

    # exact composition makes the trajectory-consistency term exactly zero
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        t12 = _random_pose(rng, 0.05, 0.1)
        t23 = _random_pose(rng, 0.05, 0.1)
        probe = SnippetSample(
            sample.frames, sample.depths, t12, t23, compose(t23, t12), sample.cam
        )
        worst = max(worst, abs(pose_to_trajectory_loss(probe)))
    check("pose_to_trajectory_exact_composition", worst, 0.0)

    # mean normalization cancels any uniform depth scaling
    d2 = sample.depths[1]
    scaled = DepthMap(d2.data * 3.7, d2.valid)
    drift = abs(
        smoothness_loss(d2, sample.frames[1]) - smoothness_loss(scaled, sample.frames[1])
    )
    check("smoothness_scale_invariance", drift, 1e-12)

    # ground truth is a local minimum of the total loss
    worst_margin = float("inf")
    for _ in range(20):
        cand, _ = total_loss(_perturbed(sample, rng, np.deg2rad(2.0), 0.05), weights)
        worst_margin = min(worst_margin, cand - total)
    check("local_minimum_margin_negated", -worst_margin, 0.0)

    # masked reductions never read values stored at invalid pixels
    mask = sample.depths[1].valid.copy()
    mask[10:20, 30:50] = False
    base_depth = np.where(mask, sample.depths[1].data, 0.0)
    fuzz_depth = np.where(mask, sample.depths[1].data, 1e6)
    v_base = total_loss(_with_middle_depth(sample, DepthMap(base_depth, mask)), weights)[0]
    v_fuzz = total_loss(_with_middle_depth(sample, DepthMap(fuzz_depth, mask)), weights)[0]
    check("masked_fuzz_bitwise", abs(v_base - v_fuzz), 0.0)

    return rows, not failures


def _with_middle_depth(sample: SnippetSample, depth: DepthMap) -> SnippetSample:
    return SnippetSample(
        sample.frames,
        (sample.depths[0], depth, sample.depths[2]),
        sample.pose_1_2,
        sample.pose_2_3,
        sample.pose_1_3,
        sample.cam,
    )


def cmd_checks(args) -> int:
    rows, ok = run_checks(
        perturb=args.perturb_losses, smoothness_literal=args.smoothness_sign == "literal"
    )
    print("term,value")
    for name, value in rows:
        print(f"{name},{value:.12e}")
    print(f"status,{'pass' if ok else 'fail'}")
    return 0 if ok else 3


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddvo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ddvo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="track a frame directory")
    p_run.add_argument("input_dir")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--intrinsics", default=None)
    p_run.add_argument("--prior", default=None,
                       choices=["identity", "constmotion", "external", "oracle"])
    p_run.add_argument("--prior-chain", dest="prior_chain", default=None)
    p_run.add_argument("--prior-endpoint", dest="prior_endpoint", default=None)
    p_run.add_argument("--prior-timeout-ms", dest="prior_timeout_ms", type=float, default=None)
    p_run.add_argument("--prior-cmd", dest="prior_cmd", default=None)
    p_run.add_argument("--oracle-gt", dest="oracle_gt", default=None)
    p_run.add_argument("--oracle-noise-rot", dest="oracle_noise_rot", type=float, default=None)
    p_run.add_argument("--oracle-noise-trans", dest="oracle_noise_trans", type=float, default=None)
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--no-recovery", dest="no_recovery", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="trajectory metrics")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--format", default="kitti", choices=["kitti", "tum"])
    p_eval.add_argument("--align", default="none", choices=["none", "rigid", "sim"])
    p_eval.add_argument("--rpe-delta", dest="rpe_delta", type=int, default=1)
    p_eval.add_argument("--plot-csv", dest="plot_csv", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic sequence")
    p_synth.add_argument("preset", choices=list(PRESETS))
    p_synth.add_argument("seed", type=int)
    p_synth.add_argument("outdir")
    p_synth.add_argument("--frames", type=int, default=None)
    p_synth.add_argument("--width", type=int, default=160)
    p_synth.add_argument("--height", type=int, default=120)
    p_synth.set_defaults(func=cmd_synth)

    p_checks = sub.add_parser("checks", help="loss and invariant self-checks")
    p_checks.add_argument("--perturb-losses", dest="perturb_losses", type=float, default=0.0)
    p_checks.add_argument("--smoothness-sign", dest="smoothness_sign", default="edge-aware",
                          choices=["edge-aware", "literal"])
    p_checks.set_defaults(func=cmd_checks)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
