"""Reconstruction metrics: depth, segmentation, and surface quality.

Surface comparison follows the Chamfer family (accuracy / completeness /
precision / recall / F1 at a distance threshold) between labeled point
clouds, plus a grid-based height error. Nearest-neighbor queries run on a
KD-tree whose results are exact, and the per-class variants never match
points across classes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .classes import CLASS_COUNT, CLASS_NAMES, LANDER, REGOLITH, ROCK, SKY
from .errors import EmptyDomainError, InvalidInputError
from .heightgrid import HeightGrid
from .losses import LossWeights
from .mapping import GaussianMap, MappingConfig, VoxelIndex, fuse_frame
from .scene_core import GaussianArrays, sigmoid
from .synthsim import SceneModel


@dataclass
class DepthReport:
    mae: float       # meters
    absrel: float
    delta25: float   # fraction in [0, 1]
    fps: Optional[float] = None


@dataclass
class SegReport:
    iou: dict        # class name -> IoU in [0, 1]
    acc: dict        # class name -> accuracy in [0, 1]
    mean_iou: float
    mean_acc: float


@dataclass
class SurfaceRow:
    accuracy_cm: float
    completeness_cm: float
    precision_pct: float
    recall_pct: float
    f1_pct: float
    height_error_cm: float


@dataclass
class MetricsReport:
    surface: dict    # row label ("all" or class name) -> SurfaceRow
    depth: Optional[DepthReport] = None
    segmentation: Optional[SegReport] = None


@dataclass
class LabeledCloud:
    points: np.ndarray            # (N, 3) meters
    labels: np.ndarray            # (N,) class indices
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.labels.shape[0] != self.points.shape[0]:
            raise InvalidInputError("points and labels lengths differ")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.points.shape[0]:
                raise InvalidInputError("points and colors lengths differ")

    def __len__(self):
        return self.points.shape[0]

    def filter_label(self, label: int) -> "LabeledCloud":
        m = self.labels == label
        return LabeledCloud(self.points[m], self.labels[m],
                            None if self.colors is None else self.colors[m])


def depth_metrics(pred: np.ndarray, gt: np.ndarray, validity: np.ndarray,
                  max_depth: float = 20.0) -> DepthReport:
    """MAE / AbsRel / delta-25% over jointly valid pixels up to max_depth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(validity, dtype=bool) & (gt <= max_depth)
    if not np.any(mask):
        raise EmptyDomainError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    mae = float(np.mean(np.abs(p - g)))
    absrel = float(np.mean(np.abs(p - g) / g))
    ok = p > 0
    ratio = np.full(p.shape, np.inf)
    ratio[ok] = np.maximum(p[ok] / g[ok], g[ok] / p[ok])
    delta25 = float(np.mean(ratio < 1.25))
    return DepthReport(mae=mae, absrel=absrel, delta25=delta25)


def seg_metrics(pred: np.ndarray, gt: np.ndarray,
                class_count: int = CLASS_COUNT) -> SegReport:
    """Per-class IoU and accuracy; classes absent from both sides are skipped."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise InvalidInputError("prediction and ground truth shapes differ")
    total = pred.size
    confusion = np.bincount(gt * class_count + pred,
                            minlength=class_count * class_count
                            ).reshape(class_count, class_count)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    tn = total - tp - fp - fn
    present = (confusion.sum(axis=0) + confusion.sum(axis=1)) > 0
    iou = {}
    acc = {}
    for c in range(class_count):
        if not present[c]:
            continue
        denom = tp[c] + fp[c] + fn[c]
        iou[CLASS_NAMES[c]] = float(tp[c] / denom) if denom > 0 else 0.0
        acc[CLASS_NAMES[c]] = float((tp[c] + tn[c]) / total)
    return SegReport(iou=iou, acc=acc,
                     mean_iou=float(np.mean(list(iou.values()))),
                     mean_acc=float(np.mean(list(acc.values()))))


def extract_point_cloud(source, opacity_min: float = 0.0) -> LabeledCloud:
    """Means and labels of Gaussians whose opacity reaches the threshold."""
    arrays = source.arrays if isinstance(source, GaussianMap) else source
    keep = sigmoid(arrays.opacity_logits) >= opacity_min
    return LabeledCloud(arrays.means[keep], arrays.labels[keep], arrays.colors[keep])


def _nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst)
    d, _ = tree.query(src, k=1)
    return d


def surface_metrics(recon: LabeledCloud, gt: LabeledCloud, d: float = 0.05,
                    height_cell: float = 0.05,
                    with_height: bool = True) -> SurfaceRow:
    """Chamfer accuracy/completeness (cm), precision/recall/F1 (%) at d."""
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyDomainError("surface metrics need nonempty clouds")
    fwd = _nn_distances(recon.points, gt.points)   # recon -> gt
    bwd = _nn_distances(gt.points, recon.points)   # gt -> recon
    precision = float(np.mean(fwd < d) * 100.0)
    recall = float(np.mean(bwd < d) * 100.0)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    herr = height_error(recon, gt, height_cell) if with_height else float("nan")
    return SurfaceRow(
        accuracy_cm=float(fwd.mean() * 100.0),
        completeness_cm=float(bwd.mean() * 100.0),
        precision_pct=precision,
        recall_pct=recall,
        f1_pct=f1,
        height_error_cm=herr,
    )


def _cell_top_decile(points: np.ndarray, cell: float):
    """Per-XY-cell mean of the top decile of z; returns (keys, means)."""
    ix = np.floor(points[:, 0] / cell).astype(np.int64)
    iy = np.floor(points[:, 1] / cell).astype(np.int64)
    key = (ix + (1 << 30)) * (1 << 31) + (iy + (1 << 30))
    order = np.lexsort((-points[:, 2], key))
    k_sorted = key[order]
    z_sorted = points[order, 2]
    boundary = np.empty(k_sorted.shape[0], dtype=bool)
    boundary[0] = True
    np.not_equal(k_sorted[1:], k_sorted[:-1], out=boundary[1:])
    seg_id = np.cumsum(boundary) - 1
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, k_sorted.shape[0]))
    rank = np.arange(k_sorted.shape[0]) - starts[seg_id]
    top_k = np.maximum(1, -(-counts // 10))  # ceil(n / 10), at least one point
    selected = rank < top_k[seg_id]
    sums = np.bincount(seg_id[selected], weights=z_sorted[selected],
                       minlength=starts.shape[0])
    return k_sorted[starts], sums / top_k


def height_error(recon: LabeledCloud, gt: LabeledCloud, cell: float = 0.05) -> float:
    """Mean |height difference| in cm over XY cells populated by both clouds.

    A cell's height is the mean z of its top decile of points, which keeps
    below-surface strays from dragging the estimate down.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyDomainError("height error needs nonempty clouds")
    rk, rh = _cell_top_decile(recon.points, cell)
    gk, gh = _cell_top_decile(gt.points, cell)
    common, ri, gi = np.intersect1d(rk, gk, return_indices=True)
    if common.size == 0:
        raise EmptyDomainError("clouds share no height cells")
    return float(np.mean(np.abs(rh[ri] - gh[gi])) * 100.0)


SURFACE_CLASSES = (ROCK, REGOLITH, LANDER)


def surface_report(recon: LabeledCloud, gt: LabeledCloud, d: float = 0.05,
                   height_cell: float = 0.05) -> dict:
    """Per-class rows plus an "all" row; a class appears only when both
    clouds contain it. Per-class queries never cross class boundaries."""
    rows = {}
    for cls in SURFACE_CLASSES:
        rsub = recon.filter_label(cls)
        gsub = gt.filter_label(cls)
        if len(rsub) == 0 or len(gsub) == 0:
            continue
        try:
            rows[CLASS_NAMES[cls]] = surface_metrics(rsub, gsub, d, height_cell)
        except EmptyDomainError:
            continue
    rows["all"] = surface_metrics(recon, gt, d, height_cell)
    return rows


def build_baseline_cloud(dataset, cfg: MappingConfig, weights: LossWeights) -> LabeledCloud:
    """Voxel-filtered accumulation of fused points with no optimization."""
    index = VoxelIndex(cfg.voxel_size)
    pts, cols, labs = [], [], []
    for i in range(len(dataset)):
        try:
            frame = dataset.load(i)
        except Exception as exc:
            from .errors import DataError
            raise DataError(f"frame {i}: {exc}") from exc
        p, c, l = fuse_frame(frame, weights.depth_range)
        if len(p) == 0:
            continue
        novel = index.claim(p)
        pts.append(p[novel])
        cols.append(c[novel])
        labs.append(l[novel])
    if not pts:
        return LabeledCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
    return LabeledCloud(np.concatenate(pts), np.concatenate(labs),
                        np.concatenate(cols))


def timing(fn: Callable[[], object], repeats: int = 10) -> float:
    """Median wall-clock FPS over warm repetitions (indicative only)."""
    if repeats < 1:
        raise InvalidInputError("timing needs at least one repetition")
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(1.0 / np.median(times))


# --- ground-truth surface sampling -------------------------------------------

def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def _inside_any_rock(scene: SceneModel, pts: np.ndarray) -> np.ndarray:
    from .scene_core import quat_to_rotation
    inside = np.zeros(pts.shape[0], dtype=bool)
    for rock in scene.rocks:
        R = quat_to_rotation(rock.rotation)
        local = ((pts - rock.center) @ R) / rock.radii
        inside |= np.sum(local * local, axis=1) < 1.0
    return inside


def sample_scene_surface(scene: SceneModel, resolution: float = 0.02) -> LabeledCloud:
    """Dense labeled samples of the true scene surface at the given spacing."""
    if resolution <= 0:
        raise InvalidInputError("resolution must be positive")
    dem = scene.dem
    xs = np.arange(dem.origin[0], dem.x_max + resolution / 2, resolution)
    ys = np.arange(dem.origin[1], dem.y_max + resolution / 2, resolution)
    gx, gy = np.meshgrid(xs, ys)
    gx = gx.ravel()
    gy = gy.ravel()
    gz, _ = dem.sample(gx, gy)
    ground = np.stack([gx, gy, gz], axis=1)
    keep = ~_inside_any_rock(scene, ground)
    if scene.lander is not None:
        b = scene.lander
        inside_box = np.all(np.abs(ground - b.center) <= b.half_extents, axis=1)
        keep &= ~inside_box
    points = [ground[keep]]
    labels = [np.full(int(keep.sum()), REGOLITH, dtype=np.uint8)]

    from .scene_core import quat_to_rotation
    p = 1.6075  # Thomsen approximation for ellipsoid surface area
    for rock in scene.rocks:
        a, b_, c = rock.radii
        area = 4 * math.pi * (((a * b_) ** p + (a * c) ** p + (b_ * c) ** p) / 3) ** (1 / p)
        n = max(64, int(area / resolution ** 2))
        unit = _fibonacci_sphere(n)
        R = quat_to_rotation(rock.rotation)
        pts = (unit * rock.radii) @ R.T + rock.center
        surf, _ = dem.sample(pts[:, 0], pts[:, 1])
        above = pts[:, 2] >= np.where(np.isnan(surf), -np.inf, surf)
        points.append(pts[above])
        labels.append(np.full(int(above.sum()), ROCK, dtype=np.uint8))

    if scene.lander is not None:
        b = scene.lander
        pts = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                u_axis, v_axis = [a for a in range(3) if a != axis]
                us = np.arange(-b.half_extents[u_axis], b.half_extents[u_axis]
                               + resolution / 2, resolution)
                vs = np.arange(-b.half_extents[v_axis], b.half_extents[v_axis]
                               + resolution / 2, resolution)
                uu, vv = np.meshgrid(us, vs)
                face = np.zeros((uu.size, 3))
                face[:, axis] = sign * b.half_extents[axis]
                face[:, u_axis] = uu.ravel()
                face[:, v_axis] = vv.ravel()
                pts.append(face + b.center)
        pts = np.concatenate(pts)
        surf, _ = dem.sample(pts[:, 0], pts[:, 1])
        above = pts[:, 2] >= np.where(np.isnan(surf), -np.inf, surf)
        points.append(pts[above])
        labels.append(np.full(int(above.sum()), LANDER, dtype=np.uint8))

    return LabeledCloud(np.concatenate(points), np.concatenate(labels))


def crop_to_observed(cloud: LabeledCloud, frames, depth_range,
                     tol: float = 0.1) -> LabeledCloud:
    """Keep points visible (depth-consistent) in at least one frame.

    A point counts as observed when it projects into a frame, lies inside the
    fusion depth range, and agrees with that frame's valid depth within tol.
    Evaluating completeness on unobservable ground truth would penalize every
    mapper equally and meaninglessly.
    """
    lo, hi = depth_range
    seen = np.zeros(len(cloud), dtype=bool)
    for frame in frames:
        todo = np.flatnonzero(~seen)
        if todo.size == 0:
            break
        cam = frame.camera
        pc = cloud.points[todo] @ cam.pose.rotation.T + cam.pose.translation
        z = pc[:, 2]
        ok = (z >= max(lo, cam.near)) & (z <= hi)
        u = np.full(todo.shape, -1.0)
        v = np.full(todo.shape, -1.0)
        u[ok] = cam.fx * pc[ok, 0] / z[ok] + cam.cx
        v[ok] = cam.fy * pc[ok, 1] / z[ok] + cam.cy
        cols = np.floor(u).astype(np.int64)
        rows = np.floor(v).astype(np.int64)
        ok &= (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
        if not np.any(ok):
            continue
        rows_ok = rows[ok]
        cols_ok = cols[ok]
        valid = np.asarray(frame.validity, dtype=bool)[rows_ok, cols_ok]
        dmap = frame.depth[rows_ok, cols_ok]
        consistent = valid & (np.abs(dmap - z[ok]) <= tol)
        seen[todo[np.flatnonzero(ok)[consistent]]] = True
    return LabeledCloud(cloud.points[seen], cloud.labels[seen],
                        None if cloud.colors is None else cloud.colors[seen])
