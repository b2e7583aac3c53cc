"""Parameterized sensor corruptions standing in for learned perception.

Depth gets multiplicative noise, optional stereo disparity quantization, and
gradient-biased dropout; labels flip only inside a band around class
boundaries; sparse "triangulated" depths are sampled from the ground truth
with noise and a controlled outlier fraction. Fixed seeds give bit-identical
outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import InvalidInputError
from ..rng import substream
from .raycast import FrameTruth

log = logging.getLogger(__name__)

STEREO_BASELINE_M = 0.2  # synthetic rig baseline used for disparity quantization


@dataclass(frozen=True)
class CorruptionConfig:
    depth_sigma_rel: float = 0.0
    depth_dropout_frac: float = 0.0
    disparity_quant: float = 0.0     # pixels; 0 disables
    label_flip_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("depth_dropout_frac", "label_flip_frac"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1]")


def corrupt_depth(truth: FrameTruth, cfg: CorruptionConfig):
    """(depth, validity): noisy, optionally quantized, dropout-thinned depth."""
    depth = np.array(truth.depth, dtype=np.float64)
    validity = np.isfinite(depth)
    depth[~validity] = 0.0

    rng = substream(cfg.seed, "corrupt", "depth")
    idx = np.flatnonzero(validity.ravel())
    flat = depth.ravel()

    if cfg.depth_sigma_rel > 0.0 and idx.size:
        noise = rng.normal(size=idx.size)
        flat[idx] *= 1.0 + cfg.depth_sigma_rel * noise
        nonpos = flat[idx] <= 0.0
        if np.any(nonpos):
            validity.ravel()[idx[nonpos]] = False
            flat[idx[nonpos]] = 0.0
            idx = idx[~nonpos]

    if cfg.disparity_quant > 0.0 and idx.size:
        fb = truth.camera.fx * STEREO_BASELINE_M
        disp = fb / flat[idx]
        disp_q = np.round(disp / cfg.disparity_quant) * cfg.disparity_quant
        resolvable = disp_q > 0.0
        flat[idx[resolvable]] = fb / disp_q[resolvable]
        validity.ravel()[idx[~resolvable]] = False
        flat[idx[~resolvable]] = 0.0
        idx = idx[resolvable]

    if cfg.depth_dropout_frac > 0.0 and idx.size:
        n_drop = int(round(cfg.depth_dropout_frac * idx.size))
        if n_drop > 0:
            # bias dropout toward high-gradient pixels (depth discontinuities)
            gy, gx = np.gradient(np.where(validity, depth, 0.0))
            g = np.hypot(gx, gy).ravel()[idx]
            mean_g = g.mean() if g.mean() > 0 else 1.0
            w = 1.0 + 4.0 * g / mean_g
            w /= w.sum()
            drop = rng.choice(idx, size=n_drop, replace=False, p=w)
            validity.ravel()[drop] = False
            flat[drop] = 0.0

    depth[~validity] = 0.0
    return depth, validity


def corrupt_labels(truth: FrameTruth, cfg: CorruptionConfig) -> np.ndarray:
    """Flip a fraction of pixels within 2 px of a class boundary to a
    differing 4-neighbor class."""
    labels = np.array(truth.labels, dtype=np.uint8)
    if cfg.label_flip_frac <= 0.0:
        return labels
    lo = ndimage.minimum_filter(labels, size=5, mode="nearest")
    hi = ndimage.maximum_filter(labels, size=5, mode="nearest")
    band = np.flatnonzero((lo != hi).ravel())
    if band.size == 0:
        return labels

    rng = substream(cfg.seed, "corrupt", "labels")
    n_flip = int(round(cfg.label_flip_frac * band.size))
    if n_flip == 0:
        return labels
    chosen = rng.choice(band, size=n_flip, replace=False)

    h, w = labels.shape
    rows, cols = np.divmod(chosen, w)
    neighbors = np.stack([
        labels[np.maximum(rows - 1, 0), cols],
        labels[np.minimum(rows + 1, h - 1), cols],
        labels[rows, np.maximum(cols - 1, 0)],
        labels[rows, np.minimum(cols + 1, w - 1)],
    ], axis=1)
    differs = neighbors != labels[rows, cols][:, None]
    counts = differs.sum(axis=1)
    pick = rng.integers(0, np.maximum(counts, 1))
    # index of the pick-th differing neighbor
    order = np.cumsum(differs, axis=1) - 1
    out = labels.copy()
    for k in range(4):
        take = differs[:, k] & (order[:, k] == pick) & (counts > 0)
        out[rows[take], cols[take]] = neighbors[take, k]
    return out


@dataclass(frozen=True)
class SparseDepthSet:
    """Simulated triangulated feature depths at sparse pixels."""

    pixels: np.ndarray  # (n, 2) integer (row, col)
    depths: np.ndarray  # (n,) meters, > 0

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float64).reshape(-1))
        if self.pixels.shape[0] != self.depths.shape[0]:
            raise InvalidInputError("pixels and depths lengths differ")

    def __len__(self):
        return self.depths.shape[0]


def simulate_sparse_matches(truth: FrameTruth, count: int, noise_rel: float,
                            outlier_frac: float, seed: int) -> SparseDepthSet:
    """Sample non-sky pixels with noisy metric depths plus uniform outliers."""
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    if not (0.0 <= outlier_frac <= 1.0):
        raise InvalidInputError("outlier_frac must lie in [0, 1]")
    valid = np.flatnonzero(np.isfinite(truth.depth).ravel())
    rng = substream(seed, "sparse")
    n = min(count, valid.size)
    if n < count:
        log.warning("sparse match shortfall: requested %d, only %d non-sky pixels",
                    count, valid.size)
    if n == 0:
        return SparseDepthSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    chosen = rng.choice(valid, size=n, replace=False)
    w = truth.depth.shape[1]
    rows, cols = np.divmod(chosen, w)
    depths = truth.depth.ravel()[chosen].copy()
    if noise_rel > 0.0:
        depths *= 1.0 + noise_rel * rng.normal(size=n)
    n_out = int(round(outlier_frac * n))
    if n_out > 0:
        pick = rng.choice(n, size=n_out, replace=False)
        depths[pick] = rng.uniform(truth.camera.near, truth.camera.far, size=n_out)
    keep = depths > 0.0
    if not np.all(keep):
        log.warning("dropping %d non-positive sparse depths", int((~keep).sum()))
    return SparseDepthSet(np.stack([rows, cols], axis=1)[keep], depths[keep])
