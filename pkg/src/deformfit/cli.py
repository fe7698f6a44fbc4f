"""Command line: synth, fit, eval, render, gradcheck.

Exit codes: 0 success, 1 a check failed (gradcheck breach), 2 bad input,
I/O failure or a diverged fit.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import formats
from .config import ConfigError, load_config
from .datagen import SceneSpec, generate, load_dataset, load_ground_truth, write_dataset
from .evaluation import compare_shapes, mask_forward_iou, pose_distribution, write_csv
from .fitter import FitConfig, FitDivergedError, fit_sequence, load_fit, save_fit
from .posing import Pose, azimuth_elevation, azimuth_error, load_poses
from .renderer import Camera, mask_iou, rasterize_hard

log = logging.getLogger("deformfit")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _configs(args):
    if args.config is None:
        return {"fit": FitConfig(), "scene": SceneSpec()}
    return load_config(args.config)


def _ensure_writable(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write-test"
    probe.write_bytes(b"")
    probe.unlink()


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    scene = _configs(args)["scene"]
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.resolution is not None:
        changes["width"] = changes["height"] = args.resolution
    scene = dataclasses.replace(scene, **changes)
    out = Path(args.out)
    _ensure_writable(out)
    seq, gt = generate(scene)
    write_dataset(out, seq, gt)
    print(f"wrote {len(seq)} frames to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _configs(args)["fit"]
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    needs_flow = cfg.use_flow and cfg.weights.flow > 0 and cfg.phase3_epochs > 0
    seq = load_dataset(args.dataset, require_flow=needs_flow)
    out = Path(args.out)
    _ensure_writable(out)

    def progress(row):
        if row["iteration"] == 0:
            log.info("epoch %d phase %d loss %.5f", row["epoch"], row["phase"], row["total"])

    try:
        result = fit_sequence(seq, cfg, callback=progress, checkpoint_dir=out)
    except FitDivergedError as exc:
        if exc.result is not None:
            save_fit(exc.result, out / "diverged")
        print(f"fit diverged: {exc}", file=sys.stderr)
        return EXIT_ERROR
    save_fit(result, out / "final")
    lines = [f"frames {len(result)}", f"phase {result.phase}"]
    render = result.render_mask(seq.camera)
    ious = [mask_iou(render(k, k, k), seq.masks[k]) for k in range(len(result))]
    lines.append(f"mask_iou_mean {np.mean(ious):.6f}")
    lines.append(f"mask_iou_min {np.min(ious):.6f}")
    lines += [f"mask_iou_frame_{k:05d} {v:.6f}" for k, v in enumerate(ious)]
    gt = load_ground_truth(args.dataset)
    if gt is not None:
        score = compare_shapes(result.mean_shape(), result.mesh.faces, gt.rest_vertices, gt.mesh.faces)
        lines.append(f"chamfer_cm {score.chamfer_cm:.6f}")
    formats.atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def heading_gauge(fit_template, faces, gt_rest) -> bool:
    """True when the fitted template matches the ground truth better after a half-turn about y.

    The half-turn maps x-symmetric shapes to x-symmetric shapes, so a
    template and all poses can flip together without changing any render.
    """
    from .evaluation import chamfer_units, sample_surface, volume_match

    s = volume_match(fit_template, faces, gt_rest, faces)
    a = sample_surface(fit_template * s, faces, 3000, 0)
    g = sample_surface(gt_rest, faces, 3000, 1)
    turned = a * np.array([-1.0, 1.0, -1.0])
    return chamfer_units(turned, g) < chamfer_units(a, g)


def cmd_eval(args) -> int:
    result = load_fit(args.fit)
    seq = load_dataset(args.dataset)
    if len(seq) != len(result):
        raise UsageError(f"fit has {len(result)} frames, dataset has {len(seq)}")
    out = Path(args.out) if args.out else Path(args.fit)
    _ensure_writable(out)
    render = result.render_mask(seq.camera)
    rows = [[k, mask_iou(render(k, k, k), seq.masks[k])] for k in range(len(result))]
    write_csv(out / "frame_iou.csv", ["frame", "iou"], rows)
    summary = {"mask_iou_mean": float(np.mean([r[1] for r in rows]))}
    for dt in args.iou:
        if dt >= len(seq):
            log.warning("skipping dt=%d: sequence has %d frames", dt, len(seq))
            continue
        summary[f"forward_iou_dt{dt}_fixed"] = mask_forward_iou(render, seq.masks, dt)
        if result.bone_euler is not None:
            summary[f"forward_iou_dt{dt}_transferred"] = mask_forward_iou(render, seq.masks, dt, True)
    if args.pose_hist:
        hist = pose_distribution(result.forwards)
        rows = []
        for i in range(hist.counts.shape[0]):
            for j in range(hist.counts.shape[1]):
                rows.append([hist.azimuth_edges[i], hist.azimuth_edges[i + 1],
                             hist.elevation_edges[j], hist.elevation_edges[j + 1], int(hist.counts[i, j])])
        write_csv(out / "pose_hist.csv", ["azimuth_lo", "azimuth_hi", "elevation_lo", "elevation_hi", "count"], rows)
    gt = load_ground_truth(args.dataset)
    if args.chamfer and gt is None:
        raise UsageError("--chamfer needs a dataset with ground truth")
    if args.chamfer:
        score = compare_shapes(result.mean_shape(), result.mesh.faces, gt.rest_vertices, gt.mesh.faces)
        summary["chamfer_cm"] = score.chamfer_cm
        summary["chamfer_units"] = score.chamfer_units
        summary["chamfer_ratio_x_extent"] = score.chamfer_units / float(np.ptp(gt.rest_vertices[:, 0]))
        faz, _ = azimuth_elevation(result.forwards)
        if heading_gauge(result.template(), result.mesh.faces, gt.rest_vertices):
            faz = faz + 180.0
        gaz, _ = azimuth_elevation(np.stack([p.forward.numpy() for p in gt.poses]))
        err = azimuth_error(faz, gaz)
        write_csv(out / "azimuth_error.csv", ["frame", "error_deg"], [[k, e] for k, e in enumerate(err)])
        summary["azimuth_within_30"] = float(np.mean(err <= 30.0))
    formats.atomic_write_text(out / "eval.json", json.dumps(summary, indent=1, sort_keys=True))
    for k, v in summary.items():
        print(f"{k} {v:.6f}")
    return EXIT_OK


def cmd_render(args) -> int:
    result = load_fit(args.fit)
    size = args.resolution or 128
    cam = Camera(width=size, height=size)
    if args.poses:
        poses = load_poses(args.poses)
    else:
        n = args.turntable
        be = None if result.bone_euler is None else np.zeros_like(result.bone_euler[0])
        poses = [Pose((math.sin(2 * math.pi * k / n), 0.0, math.cos(2 * math.pi * k / n)), (0, 0, 0), be) for k in range(n)]
    out = Path(args.out)
    _ensure_writable(out)
    rest = result.mean_shape()
    from .posing import pose_vertices

    for k, pose in enumerate(poses):
        with torch.no_grad():
            posed = pose_vertices(rest, pose, result.skeleton)
        img = rasterize_hard(result.mesh, posed, result.texture(), cam)
        formats.write_png_rgb(out / f"{k:04d}.png", img.image)
        formats.write_png_gray(out / f"mask_{k:04d}.png", img.mask)
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(resolution=args.resolution or 32, seed=args.seed or 0)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI file with [scene], [fit] and [weights] sections")
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--resolution", type=int)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s)
    s.set_defaults(func=cmd_synth)
    s = sub.add_parser("fit", help="fit a model to a dataset")
    s.add_argument("dataset")
    common(s)
    s.set_defaults(func=cmd_fit)
    s = sub.add_parser("eval", help="score a fit against its dataset")
    s.add_argument("fit")
    s.add_argument("dataset")
    s.add_argument("--iou", type=int, nargs="*", default=[0], metavar="DT", help="mask forward-projection IoU offsets")
    s.add_argument("--chamfer", action="store_true", help="Chamfer distance to the ground-truth shape")
    s.add_argument("--pose-hist", action="store_true", help="write an azimuth/elevation histogram CSV")
    common(s, out_required=False)
    s.set_defaults(func=cmd_eval)
    s = sub.add_parser("render", help="render a fitted model")
    s.add_argument("fit")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--poses")
    g.add_argument("--turntable", type=int)
    common(s)
    s.set_defaults(func=cmd_render)
    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(s, out_required=False)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_ERROR
    if args.resolution is not None and args.resolution < 8:
        print("error: --resolution must be at least 8", file=sys.stderr)
        return EXIT_ERROR
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ValueError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
