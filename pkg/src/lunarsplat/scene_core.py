"""Core geometric types and camera math shared by every other module.

Conventions used throughout the package:

* world frame: x/y horizontal, z up, meters
* camera frame: x right, y down, z forward (pinhole)
* a pose stores the world->camera transform ``x_c = R x_w + t``
* pixel (row r, col c) has continuous image coordinates (c + 0.5, r + 0.5)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

ORTHO_TOL = 1e-9


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3x3, det +1) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8):
            raise InvalidInputError("pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise InvalidInputError("pose rotation determinant is not +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def transform(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation

    def transform_many(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def center(self) -> np.ndarray:
        """Origin of the destination frame expressed in the source frame."""
        return -self.rotation.T @ self.translation


def transform_point(pose: Pose, point: np.ndarray) -> np.ndarray:
    """Apply ``rotation @ point + translation``."""
    return pose.transform(point)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world->camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidInputError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")

    def pixel_centers(self):
        """(u, v) arrays of shape (height, width) at pixel centers."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(u, v)

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      pose, self.near, self.far)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s) (w, x, y, z); normalizes internally.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm == 0.0):
        raise InvalidInputError("zero quaternion has no rotation")
    q = q / norm[:, None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_rotation_jacobian(q_unit: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternion(s): shape (..., 4, 3, 3).

    Derivative of the unit-quaternion rotation formula with respect to each
    component, *before* the normalization chain.
    """
    q = np.atleast_2d(np.asarray(q_unit, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    J = np.zeros((n, 4, 3, 3), dtype=np.float64)
    zero = np.zeros(n)
    # dR/dw
    J[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=1)
    # dR/dx
    J[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1),
    ], axis=1)
    # dR/dy
    J[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1),
    ], axis=1)
    # dR/dz
    J[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1),
    ], axis=1)
    if np.asarray(q_unit).ndim == 1:
        return J[0]
    return J


@dataclass(frozen=True)
class Covariance3:
    """Symmetric positive semi-definite 3x3 covariance (meters^2)."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "matrix", M)
        if not np.allclose(M, M.T, atol=1e-12):
            raise InvalidInputError("covariance is not symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-12:
            raise InvalidInputError("covariance is not positive semi-definite")


def covariance_from_scale_rotation(scale: np.ndarray, rotation: np.ndarray) -> Covariance3:
    """Build R S S^T R^T from a positive scale vector and a quaternion."""
    s = np.asarray(scale, dtype=np.float64).reshape(3)
    if np.any(s <= 0):
        raise InvalidInputError("scale components must be positive")
    R = quat_to_rotation(rotation)
    M = (R * (s * s)) @ R.T
    M = 0.5 * (M + M.T)
    return Covariance3(M)


@dataclass(frozen=True)
class Gaussian:
    """One splat primitive.

    Scale is stored as log, opacity as an unconstrained logit; the activated
    values are exposed through :attr:`scale` and :attr:`opacity`. The label is
    immutable after creation.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    color: np.ndarray
    label: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n == 0.0:
            raise InvalidInputError("zero quaternion")
        if abs(n - 1.0) > 1e-12:  # keep already-unit quaternions bit-stable
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "label", int(self.label))

    @classmethod
    def create(cls, mean, scale, rotation, opacity, color, label) -> "Gaussian":
        scale = np.asarray(scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0):
            raise InvalidInputError("scale components must be positive")
        opacity = float(opacity)
        if not (0.0 <= opacity <= 1.0):
            raise InvalidInputError("opacity must lie in [0, 1]")
        return cls(mean, np.log(scale), rotation, float(logit(opacity)), color, label)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.asarray(self.opacity_logit)))

    def covariance(self) -> Covariance3:
        return covariance_from_scale_rotation(self.scale, self.rotation)


class GaussianArrays:
    """Structure-of-arrays view of a Gaussian collection (mutable)."""

    __slots__ = ("means", "log_scales", "rotations", "opacity_logits", "colors", "labels")

    def __init__(self, means, log_scales, rotations, opacity_logits, colors, labels):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.labels = np.asarray(labels, dtype=np.uint8).reshape(n)

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls) -> "GaussianArrays":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianArrays":
        if len(gaussians) == 0:
            return cls.empty()
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.array([g.label for g in gaussians], dtype=np.uint8),
        )

    def to_gaussians(self) -> list:
        return [Gaussian(self.means[i], self.log_scales[i], self.rotations[i],
                         float(self.opacity_logits[i]), self.colors[i], int(self.labels[i]))
                for i in range(len(self))]

    def copy(self) -> "GaussianArrays":
        return GaussianArrays(self.means.copy(), self.log_scales.copy(),
                              self.rotations.copy(), self.opacity_logits.copy(),
                              self.colors.copy(), self.labels.copy())


def as_arrays(gaussians) -> GaussianArrays:
    if isinstance(gaussians, GaussianArrays):
        return gaussians
    return GaussianArrays.from_gaussians(list(gaussians))


@dataclass(frozen=True)
class Frame:
    """One posed observation: image, metric depth with validity, labels, camera."""

    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) meters; meaningful only where validity
    validity: np.ndarray   # (H, W) bool
    labels: np.ndarray     # (H, W) class indices
    camera: Camera


# --- Projection -------------------------------------------------------------

COV2D_FLOOR = 0.3          # px^2 added to both cov2d diagonal entries
DEFAULT_SUPPORT_SIGMA = 3.0


@dataclass(frozen=True)
class Projected:
    mean2d: np.ndarray     # (2,) pixels
    cov2d: np.ndarray      # (2, 2) px^2, symmetric, floored
    depth: float           # camera-frame z of the mean, meters


def project_gaussians(arrays: GaussianArrays, cam: Camera,
                      support_sigma: float = DEFAULT_SUPPORT_SIGMA,
                      cov2d_floor: float = COV2D_FLOOR):
    """Vectorized EWA-style projection of all Gaussians into a camera.

    Returns ``(visible_idx, mean2d, cov2d_packed, depth, radius_px)`` where
    ``cov2d_packed`` holds (a, b, c) of [[a, b], [b, c]] after the isotropic
    floor, and ``radius_px = support_sigma * sqrt(max eigenvalue)`` bounds the
    splat footprint. Culled Gaussians (outside [near, far] or farther than the
    support radius outside the image) are dropped.
    """
    n = len(arrays)
    if n == 0:
        z = np.zeros(0)
        return (np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 3)), z, z)
    R_wc = cam.pose.rotation
    xc = arrays.means @ R_wc.T + cam.pose.translation
    z = xc[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)

    idx = np.flatnonzero(in_depth)
    xc = xc[idx]
    z = z[idx]
    x, y = xc[:, 0], xc[:, 1]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy

    # cov2d = (J W R S)(J W R S)^T computed as one thin 2x3 chain
    Rq = quat_to_rotation(arrays.rotations[idx])
    s = np.exp(arrays.log_scales[idx])
    invz = 1.0 / z
    invz2 = invz * invz
    J = np.zeros((len(idx), 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx * invz
    J[:, 0, 2] = -cam.fx * x * invz2
    J[:, 1, 1] = cam.fy * invz
    J[:, 1, 2] = -cam.fy * y * invz2
    JW = np.einsum("nij,jk->nik", J, R_wc)
    M2 = np.einsum("nij,njk->nik", JW, Rq) * s[:, None, :]
    a = np.einsum("nk,nk->n", M2[:, 0, :], M2[:, 0, :]) + cov2d_floor
    b = np.einsum("nk,nk->n", M2[:, 0, :], M2[:, 1, :])
    c = np.einsum("nk,nk->n", M2[:, 1, :], M2[:, 1, :]) + cov2d_floor

    # culling margin: support radius from the larger eigenvalue
    half = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = half + disc
    radius = support_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    inside = ((u >= -radius) & (u <= cam.width + radius)
              & (v >= -radius) & (v <= cam.height + radius))

    keep = np.flatnonzero(inside)
    return (idx[keep], np.stack([u[keep], v[keep]], axis=1),
            np.stack([a[keep], b[keep], c[keep]], axis=1), z[keep], radius[keep])


def project_gaussian(g: Gaussian, cam: Camera,
                     support_sigma: float = DEFAULT_SUPPORT_SIGMA,
                     cov2d_floor: float = COV2D_FLOOR) -> Optional[Projected]:
    """Project a single Gaussian; returns None when culled."""
    arrays = GaussianArrays.from_gaussians([g])
    idx, mean2d, cov, z, _ = project_gaussians(arrays, cam, support_sigma, cov2d_floor)
    if len(idx) == 0:
        return None
    a, b, c = cov[0]
    return Projected(mean2d[0], np.array([[a, b], [b, c]]), float(z[0]))
