"""Command-line entry points and the end-to-end experiment driver.

Subcommands: gen-data, map, baseline, eval, render. Exit codes: 0 success,
1 usage/config error, 2 runtime data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys

import numpy as np

from . import dataio
from .classes import CLASS_COLORS
from .config import AppConfig, load_config
from .errors import (
    DataError,
    DegenerateFitError,
    EmptyDomainError,
    InvalidConfigError,
    InvalidInputError,
)
from .evaluation import (
    crop_to_observed,
    extract_point_cloud,
    sample_scene_surface,
    surface_report,
)
from .heightgrid import HeightGrid
from .mapping import DemPrior, run_mapping
from .rasterizer import RasterConfig, render
from .rng import substream
from .scene_core import Camera, Pose
from .synthsim import (
    corrupt_depth,
    corrupt_labels,
    generate_scene,
    generate_trajectory,
    render_ground_truth,
)

LOSS_COLUMNS = ("iteration", "gaussians", "recon", "scale", "depth", "empty",
                "dense", "semantic", "total")
METRIC_COLUMNS = ("label", "accuracy_cm", "completeness_cm", "precision_pct",
                  "recall_pct", "f1_pct", "height_error_cm")
METRIC_ROW_ORDER = ("rock", "regolith", "lander", "all")


def derive_seed(root: int, *names: str) -> int:
    return int(substream(root, *names).integers(0, 2 ** 63))


def _apply_overrides(cfg: AppConfig, args) -> AppConfig:
    run = cfg.run
    if getattr(args, "seed", None) is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        run = dataclasses.replace(run, mode=args.mode)
    cfg.run = run
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    seed = cfg.run.seed

    scene = generate_scene(cfg.scene, seed)
    poses = generate_trajectory(cfg.trajectory, scene)
    t = cfg.trajectory
    f_px = t.focal_px()

    frames = []
    for i, (tstamp, pose) in enumerate(poses):
        cam = Camera(f_px, f_px, t.width / 2.0, t.height / 2.0, t.width, t.height,
                     pose, t.near, t.far)
        truth = render_ground_truth(scene, cam)
        stem = f"frame_{i:05d}"
        planes = {
            "rgb": f"{stem}_rgb.ppm",
            "depth": f"{stem}_depth.raw",
            "labels": f"{stem}_labels.pgm",
            "valid": f"{stem}_valid.pgm",
        }
        validity = np.isfinite(truth.depth)
        dataio.write_ppm(os.path.join(out, planes["rgb"]), truth.rgb)
        dataio.write_depth_raw(os.path.join(out, planes["depth"]),
                               np.where(validity, truth.depth, 0.0))
        dataio.write_pgm(os.path.join(out, planes["labels"]), truth.labels)
        dataio.write_pgm(os.path.join(out, planes["valid"]), validity)

        if cfg.corruption is not None:
            corr = dataclasses.replace(
                cfg.corruption,
                seed=derive_seed(seed, "corruption", str(cfg.corruption.seed), f"frame{i}"))
            est_depth, est_valid = corrupt_depth(truth, corr)
            est_labels = corrupt_labels(truth, corr)
            planes.update(est_depth=f"{stem}_estdepth.raw",
                          est_valid=f"{stem}_estvalid.pgm",
                          est_labels=f"{stem}_estlabels.pgm")
            dataio.write_depth_raw(os.path.join(out, planes["est_depth"]),
                                   np.where(est_valid, est_depth, 0.0))
            dataio.write_pgm(os.path.join(out, planes["est_valid"]), est_valid)
            dataio.write_pgm(os.path.join(out, planes["est_labels"]), est_labels)
        frames.append(dataio.FrameRecord(i, tstamp, pose, planes))

    meta = dataio.DatasetMeta(seed=seed, width=t.width, height=t.height,
                              fx=f_px, fy=f_px, cx=t.width / 2.0, cy=t.height / 2.0,
                              near=t.near, far=t.far, frames=frames)
    dataio.write_manifest(os.path.join(out, dataio.MANIFEST_NAME), meta)
    shutil.copyfile(args.config, os.path.join(out, dataio.CONFIG_COPY_NAME))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _dataset_scene(dataset_dir: str):
    """Regenerate the SceneModel a dataset was built from (config copy + seed)."""
    cfg = load_config(os.path.join(dataset_dir, dataio.CONFIG_COPY_NAME))
    meta = dataio.read_manifest(os.path.join(dataset_dir, dataio.MANIFEST_NAME))
    return generate_scene(cfg.scene, meta.seed), cfg


def cmd_map(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    dataset = dataio.FrameDataset(args.dataset, cfg.run.mode)
    dem_prior = None
    if cfg.mapping.dem_prior:
        scene, _ = _dataset_scene(args.dataset)
        dem_prior = DemPrior(scene.dem, cfg.mapping.dem_low_margin,
                             cfg.mapping.dem_high_margin)
    mapping_cfg = cfg.mapping_config(dem_prior)
    gmap, log = run_mapping(dataset, mapping_cfg, cfg.weights())

    os.makedirs(args.out, exist_ok=True)
    dataio.write_gaussian_ply(os.path.join(args.out, "checkpoint.ply"), gmap.arrays)
    with open(os.path.join(args.out, "losses.csv"), "w") as f:
        f.write(",".join(LOSS_COLUMNS) + "\n")
        for row in log:
            f.write(",".join(repr(row[c]) if c not in ("iteration", "gaussians")
                             else str(row[c]) for c in LOSS_COLUMNS) + "\n")
    print(f"mapped {len(dataset)} frames -> {len(gmap)} gaussians "
          f"({len(log)} optimization iterations)")
    return 0


def cmd_baseline(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    from .evaluation import build_baseline_cloud
    dataset = dataio.FrameDataset(args.dataset, cfg.run.mode)
    cloud = build_baseline_cloud(dataset, cfg.mapping_config(), cfg.weights())
    os.makedirs(args.out, exist_ok=True)
    dataio.write_cloud_ply(os.path.join(args.out, "baseline.ply"), cloud)
    print(f"baseline cloud: {len(cloud)} points")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    ev = cfg.eval
    scene, _ = _dataset_scene(args.dataset)
    dataset = dataio.FrameDataset(args.dataset, "gtgt")

    if dataio.is_gaussian_ply(args.checkpoint):
        arrays = dataio.read_gaussian_ply(args.checkpoint)
        recon = extract_point_cloud(arrays, ev.opacity_min)
    else:
        recon = dataio.read_cloud_ply(args.checkpoint)

    gt_cloud = sample_scene_surface(scene, ev.gt_resolution)
    frames = [dataset.load_truth(i)
              for i in range(0, len(dataset), max(1, ev.crop_frame_stride))]
    gt_cloud = crop_to_observed(gt_cloud, frames, cfg.weights().depth_range,
                                ev.crop_tol)
    rows = surface_report(recon, gt_cloud, ev.surface_threshold, ev.height_cell)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    with open(csv_path, "w") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        for label in METRIC_ROW_ORDER:
            if label not in rows:
                continue
            r = rows[label]
            f.write(",".join([label] + [f"{v:.6f}" for v in
                                        (r.accuracy_cm, r.completeness_cm,
                                         r.precision_pct, r.recall_pct,
                                         r.f1_pct, r.height_error_cm)]) + "\n")
    summary = {
        "checkpoint": os.path.basename(args.checkpoint),
        "recon_points": len(recon),
        "gt_points": len(gt_cloud),
        "surface_threshold_m": ev.surface_threshold,
        "rows": {label: dataclasses.asdict(row) for label, row in rows.items()},
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"evaluated {len(recon)} points against {len(gt_cloud)} ground-truth "
          f"samples -> {csv_path}")
    return 0


def _depth_colormap(depth: np.ndarray, alpha: np.ndarray, depth_max: float):
    stops = np.array([[0.267, 0.005, 0.329],
                      [0.128, 0.567, 0.551],
                      [0.993, 0.906, 0.144]])
    t = np.clip(depth / depth_max, 0.0, 1.0)
    lo = (t < 0.5)
    u = np.where(lo, t * 2.0, (t - 0.5) * 2.0)[..., None]
    rgb = np.where(lo[..., None], stops[0] * (1 - u) + stops[1] * u,
                   stops[1] * (1 - u) + stops[2] * u)
    rgb[alpha < 1e-3] = 0.0
    return rgb


def _parse_pose_file(path):
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read pose file: {exc}") from exc
    intr = None
    poses = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "intrinsics":
                if len(parts) != 9:
                    raise ValueError("intrinsics needs fx fy cx cy width height near far")
                vals = [float(v) for v in parts[1:]]
                intr = dict(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                            width=int(vals[4]), height=int(vals[5]),
                            near=vals[6], far=vals[7])
            elif parts[0] == "pose":
                if len(parts) != 13:
                    raise ValueError("pose needs 9 rotation + 3 translation values")
                vals = [float(v) for v in parts[1:]]
                poses.append(Pose(np.array(vals[:9]).reshape(3, 3),
                                  np.array(vals[9:12])))
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, InvalidInputError) as exc:
            raise InvalidConfigError(f"{path}:{lineno}: {exc}") from exc
    if intr is None:
        raise InvalidConfigError(f"{path}: missing intrinsics line")
    if not poses:
        raise InvalidConfigError(f"{path}: no poses listed")
    return intr, poses


def cmd_render(args) -> int:
    arrays = dataio.read_gaussian_ply(args.checkpoint)
    intr, poses = _parse_pose_file(args.poses)
    os.makedirs(args.out, exist_ok=True)
    raster = RasterConfig()
    for k, pose in enumerate(poses):
        cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                     intr["width"], intr["height"], pose, intr["near"], intr["far"])
        out = render(arrays, cam, raster)
        stem = os.path.join(args.out, f"view_{k:03d}")
        dataio.write_ppm(stem + "_rgb.ppm", out.rgb)
        dataio.write_ppm(stem + "_depth.ppm",
                         _depth_colormap(out.depth, out.alpha, args.depth_max))
        dataio.write_ppm(stem + "_alpha.ppm", np.repeat(out.alpha[..., None], 3, axis=2))
        sem = np.argmax(out.semantics, axis=2)
        palette = np.asarray(CLASS_COLORS)
        sem_rgb = palette[sem]
        sem_rgb[out.alpha < 1e-3] = 0.0
        dataio.write_ppm(stem + "_sem.ppm", sem_rgb)
    print(f"rendered {len(poses)} views to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lunarsplat",
                                description="Semantic Gaussian-splat terrain mapping")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    m = sub.add_parser("map", help="run incremental mapping over a dataset")
    m.add_argument("--config", required=True)
    m.add_argument("--dataset", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--mode", choices=("gtgt", "estgt", "gtest", "estest"))
    m.set_defaults(fn=cmd_map)

    b = sub.add_parser("baseline", help="accumulate the unoptimized point cloud")
    b.add_argument("--config", required=True)
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--mode", choices=("gtgt", "estgt", "gtest", "estest"))
    b.set_defaults(fn=cmd_baseline)

    e = sub.add_parser("eval", help="surface metrics against the true scene")
    e.add_argument("--config", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="render a checkpoint from listed poses")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--depth-max", type=float, default=20.0)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, EmptyDomainError, DegenerateFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
