"""Metric alignment of relative depth: fit scale and offset against sparse
triangulated depths, with RANSAC outlier rejection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, InvalidInputError
from .rng import substream
from .synthsim import SparseDepthSet


@dataclass(frozen=True)
class ScaleFit:
    theta: float          # multiplicative scale
    gamma: float          # additive offset, meters
    inlier_count: int
    residual_rms: float   # over all samples, meters


def _as_depths(sparse) -> np.ndarray:
    if isinstance(sparse, SparseDepthSet):
        return sparse.depths
    return np.asarray(sparse, dtype=np.float64).reshape(-1)


def gather_sparse(depth_map: np.ndarray, validity: np.ndarray,
                  sparse: SparseDepthSet):
    """Dense depths at the sparse pixels, discarding samples whose dense
    pixel is invalid (the depth-masking step)."""
    rows, cols = sparse.pixels[:, 0], sparse.pixels[:, 1]
    ok = np.asarray(validity, dtype=bool)[rows, cols]
    return np.asarray(depth_map, dtype=np.float64)[rows, cols][ok], sparse.depths[ok]


def _rms(dense, sparse, theta, gamma) -> float:
    r = theta * dense + gamma - sparse
    return float(np.sqrt(np.mean(r * r)))


def fit_scale_offset(dense, sparse) -> ScaleFit:
    """Closed-form least squares for theta * dense + gamma ~= sparse."""
    d = np.asarray(dense, dtype=np.float64).reshape(-1)
    s = _as_depths(sparse)
    if d.shape != s.shape:
        raise InvalidInputError("dense and sparse sample counts differ")
    if d.size < 2:
        raise DegenerateFitError("need at least two samples")
    var = float(np.var(d))
    if var == 0.0:
        raise DegenerateFitError("all dense depths identical; scale unobservable")
    dm, sm = d.mean(), s.mean()
    theta = float(np.mean((d - dm) * (s - sm)) / var)
    gamma = float(sm - theta * dm)
    return ScaleFit(theta, gamma, int(d.size), _rms(d, s, theta, gamma))


def fit_scale_offset_ransac(dense, sparse, iterations: int = 200,
                            inlier_tol: float = 0.05, seed: int = 0) -> ScaleFit:
    """Two-point minimal fits scored by inlier count, then OLS on the winners."""
    d = np.asarray(dense, dtype=np.float64).reshape(-1)
    s = _as_depths(sparse)
    if d.shape != s.shape:
        raise InvalidInputError("dense and sparse sample counts differ")
    if d.size < 2:
        raise DegenerateFitError("need at least two samples")
    if iterations < 1:
        raise InvalidInputError("iterations must be positive")

    rng = substream(seed, "align", "ransac")
    best_count = 0
    best_mask = None
    for _ in range(iterations):
        i, j = rng.choice(d.size, size=2, replace=False)
        dd = d[j] - d[i]
        if abs(dd) < 1e-12:
            continue
        theta = (s[j] - s[i]) / dd
        gamma = s[i] - theta * d[i]
        residual = np.abs(theta * d + gamma - s)
        mask = residual <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 2:
        raise DegenerateFitError("RANSAC found no 2-point consensus")
    try:
        refit = fit_scale_offset(d[best_mask], s[best_mask])
    except DegenerateFitError:
        raise DegenerateFitError("best inlier set is degenerate")
    return ScaleFit(refit.theta, refit.gamma, best_count,
                    _rms(d, s, refit.theta, refit.gamma))


def apply_scale(depth_map: np.ndarray, validity: np.ndarray, fit: ScaleFit):
    """theta * depth + gamma per valid pixel; non-positive results invalidated."""
    depth = np.asarray(depth_map, dtype=np.float64).copy()
    valid = np.asarray(validity, dtype=bool).copy()
    scaled = fit.theta * depth[valid] + fit.gamma
    keep = scaled > 0.0
    idx = np.flatnonzero(valid.ravel())
    depth.ravel()[idx] = np.where(keep, scaled, 0.0)
    valid.ravel()[idx[~keep]] = False
    return depth, valid
