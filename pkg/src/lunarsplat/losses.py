"""Training losses, their masks, and the weighted total objective.

The photometric term blends mean absolute error with (1 - SSIM); geometric
and semantic supervision act through masks separating valid surface pixels
from known-empty space. ``total_loss_adjoints`` additionally returns the
per-pixel derivative images the rasterizer backward pass consumes, plus the
direct gradient of the scale regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classes import SKY
from .errors import InvalidInputError
from .rasterizer import RenderAdjoints, RenderOutput
from .scene_core import Frame, as_arrays

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_scale: float = 0.1
    lambda_depth: float = 0.5
    lambda_empty: float = 0.1
    lambda_dense: float = 0.1
    lambda_semantic: float = 0.1
    tau_ratio: float = 10.0
    alpha_accum: float = 2.0
    depth_range: tuple = (0.3, 20.0)
    semantic_clamp: float = 1e-6

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda_scale", "lambda_depth", "lambda_empty",
                     "lambda_dense", "lambda_semantic"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if self.tau_ratio <= 1:
            raise InvalidInputError("tau_ratio must exceed 1")
        if self.alpha_accum < 1:
            raise InvalidInputError("alpha_accum must be >= 1")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise InvalidInputError("need 0 < depth_range.min < depth_range.max")


@dataclass
class MaskPair:
    dense: np.ndarray  # valid geometry within the depth range
    empty: np.ndarray  # known-empty space: sky or beyond the range


def build_masks(labels: np.ndarray, depth: np.ndarray, validity: np.ndarray,
                w: LossWeights) -> MaskPair:
    """Dense = valid, non-sky, in range; empty = sky or valid-beyond-range."""
    labels = np.asarray(labels)
    depth = np.asarray(depth, dtype=np.float64)
    validity = np.asarray(validity, dtype=bool)
    if labels.shape != depth.shape or labels.shape != validity.shape:
        raise InvalidInputError("labels, depth, and validity shapes differ")
    lo, hi = w.depth_range
    sky = labels == SKY
    dense = validity & ~sky & (depth >= lo) & (depth <= hi)
    empty = sky | (validity & (depth > hi))
    return MaskPair(dense=dense, empty=empty)


# --- SSIM -------------------------------------------------------------------

def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()

_KERNEL_1D = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
_PAD = SSIM_WINDOW // 2


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    j = np.arange(-pad, n + pad)
    j = np.where(j < 0, -j, j)
    j = np.where(j >= n, 2 * n - 2 - j, j)
    return j


def _filter_axis(img: np.ndarray, axis: int) -> np.ndarray:
    idx = _reflect_indices(img.shape[axis], _PAD)
    padded = np.take(img, idx, axis=axis)
    out = np.zeros_like(img)
    n = img.shape[axis]
    sl = [slice(None)] * img.ndim
    for k, wk in enumerate(_KERNEL_1D):
        sl[axis] = slice(k, k + n)
        out += wk * padded[tuple(sl)]
    return out


def _filter_axis_adjoint(grad: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(grad, axis, 0)
    n = g.shape[0]
    gpad = np.zeros((n + 2 * _PAD,) + g.shape[1:], dtype=np.float64)
    for k, wk in enumerate(_KERNEL_1D):
        gpad[k:k + n] += wk * g
    idx = _reflect_indices(n, _PAD)
    out = np.zeros_like(g)
    np.add.at(out, idx, gpad)
    return np.moveaxis(out, 0, axis)


def _blur(img: np.ndarray) -> np.ndarray:
    return _filter_axis(_filter_axis(img, 0), 1)


def _blur_adjoint(grad: np.ndarray) -> np.ndarray:
    return _filter_axis_adjoint(_filter_axis_adjoint(grad, 1), 0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    return img


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * cov + SSIM_C2
    den1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    smap = (num1 * num2) / (den1 * den2)
    return smap, (mu_a, mu_b, num1, num2, den1, den2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, reflective borders)."""
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape != b.shape:
        raise InvalidInputError("ssim inputs must share a shape")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError("image smaller than the SSIM window")
    smap = np.empty_like(a)
    for ch in range(a.shape[2]):
        smap[:, :, ch], _ = _ssim_terms(a[:, :, ch], b[:, :, ch])
    return float(smap.mean())


def ssim_with_gradient(a: np.ndarray, b: np.ndarray):
    """SSIM value plus d(mean SSIM)/d(b)."""
    a = _as_channels(a)
    b = _as_channels(b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError("image smaller than the SSIM window")
    n_total = a.size
    grad = np.zeros_like(b)
    total = 0.0
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        smap, (mu_a, mu_b, num1, num2, den1, den2) = _ssim_terms(x, y)
        total += smap.sum()
        d_mu_b = 2 * mu_a * num2 / (den1 * den2) - smap * 2 * mu_b / den1
        d_var_b = -smap / den2
        d_cov = 2 * num1 / (den1 * den2)
        # chain through mu_b = W*y, var_b = W*(y^2) - mu_b^2, cov = W*(xy) - mu_a mu_b
        grad_ch = _blur_adjoint(d_mu_b - 2 * mu_b * d_var_b - mu_a * d_cov)
        grad_ch += 2 * y * _blur_adjoint(d_var_b)
        grad_ch += x * _blur_adjoint(d_cov)
        grad[:, :, ch] = grad_ch / n_total
    return total / n_total, grad


# --- individual loss terms ---------------------------------------------------

def loss_recon(image: np.ndarray, rendered: np.ndarray, w: LossWeights) -> float:
    """(1 - lambda_ssim) * mean |I - I_hat| + lambda_ssim * (1 - SSIM)."""
    image = np.asarray(image, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    l1 = float(np.mean(np.abs(image - rendered)))
    if w.lambda_ssim == 0.0:
        return (1.0 - w.lambda_ssim) * l1
    return (1.0 - w.lambda_ssim) * l1 + w.lambda_ssim * (1.0 - ssim(image, rendered))


def loss_scale(gaussians, w: LossWeights) -> float:
    """Mean hinge on the max/min scale ratio above tau_ratio."""
    arrays = as_arrays(gaussians)
    if len(arrays) == 0:
        return 0.0
    s = np.exp(arrays.log_scales)
    ratio = s.max(axis=1) / s.min(axis=1)
    return float(np.mean(np.maximum(0.0, ratio - w.tau_ratio)))


def loss_scale_gradient(gaussians, w: LossWeights):
    """(value, d/d log_scales) of the scale ratio hinge."""
    arrays = as_arrays(gaussians)
    n = len(arrays)
    grad = np.zeros((n, 3))
    if n == 0:
        return 0.0, grad
    s = np.exp(arrays.log_scales)
    imax = np.argmax(s, axis=1)
    imin = np.argmin(s, axis=1)
    smax = s[np.arange(n), imax]
    smin = s[np.arange(n), imin]
    ratio = smax / smin
    active = ratio > w.tau_ratio
    rows = np.flatnonzero(active)
    # d ratio / d log smax = ratio ; d ratio / d log smin = -ratio
    grad[rows, imax[rows]] += ratio[rows] / n
    grad[rows, imin[rows]] -= ratio[rows] / n
    return float(np.mean(np.maximum(0.0, ratio - w.tau_ratio))), grad


def loss_depth(depth: np.ndarray, rendered_depth: np.ndarray, masks: MaskPair,
               w: LossWeights) -> float:
    """Mean normalized L1 depth error over the dense mask (0 when empty)."""
    m = masks.dense
    if not np.any(m):
        return 0.0
    norm = float(np.max(depth[m]))
    return float(np.mean(np.abs(depth[m] - rendered_depth[m])) / norm)


def loss_empty(alpha: np.ndarray, masks: MaskPair, w: LossWeights) -> float:
    m = masks.empty
    if not np.any(m):
        return 0.0
    return float(np.mean(alpha[m] ** w.alpha_accum))


def loss_dense(alpha: np.ndarray, masks: MaskPair, w: LossWeights) -> float:
    m = masks.dense
    if not np.any(m):
        return 0.0
    return float(np.mean((1.0 - alpha[m]) ** w.alpha_accum))


def loss_semantic(semantics: np.ndarray, labels: np.ndarray, masks: MaskPair,
                  w: LossWeights) -> float:
    """Mean negative log of the clamped correct-class accumulation."""
    m = masks.dense
    if not np.any(m):
        return 0.0
    idx = np.flatnonzero(m.ravel())
    flat = semantics.reshape(-1, semantics.shape[-1])
    correct = flat[idx, np.asarray(labels).ravel()[idx].astype(np.int64)]
    clamped = np.clip(correct, w.semantic_clamp, 1.0)
    return float(np.mean(-np.log(clamped)))


def total_loss(frame: Frame, out: RenderOutput, gaussians, w: LossWeights,
               masks: Optional[MaskPair] = None):
    """Weighted sum of all terms; returns (total, per-term weighted breakdown)."""
    if masks is None:
        masks = build_masks(frame.labels, frame.depth, frame.validity, w)
    # zero-weight terms are skipped outright so the total cannot depend on
    # their inputs
    breakdown = {
        "recon": loss_recon(frame.rgb, out.rgb, w),
        "scale": 0.0 if w.lambda_scale == 0 else w.lambda_scale * loss_scale(gaussians, w),
        "depth": 0.0 if w.lambda_depth == 0 else
                 w.lambda_depth * loss_depth(frame.depth, out.depth, masks, w),
        "empty": 0.0 if w.lambda_empty == 0 else
                 w.lambda_empty * loss_empty(out.alpha, masks, w),
        "dense": 0.0 if w.lambda_dense == 0 else
                 w.lambda_dense * loss_dense(out.alpha, masks, w),
        "semantic": 0.0 if w.lambda_semantic == 0 else
                    w.lambda_semantic * loss_semantic(out.semantics, frame.labels, masks, w),
    }
    total = float(sum(breakdown.values()))
    breakdown["total"] = total
    return total, breakdown


def total_loss_adjoints(frame: Frame, out: RenderOutput, gaussians, w: LossWeights,
                        masks: Optional[MaskPair] = None):
    """Loss, breakdown, per-pixel render adjoints, and scale-term gradient.

    The adjoints are d(total)/d(render outputs); the scale regularizer does
    not pass through the renderer, so its d/d(log_scales) comes back directly.
    """
    if masks is None:
        masks = build_masks(frame.labels, frame.depth, frame.validity, w)
    h, wd = out.alpha.shape
    c = out.semantics.shape[-1]

    # recon
    image = np.asarray(frame.rgb, dtype=np.float64)
    n_rgb = image.size
    adj_rgb = (1.0 - w.lambda_ssim) * np.sign(out.rgb - image) / n_rgb
    if w.lambda_ssim > 0.0:
        ssim_val, ssim_grad = ssim_with_gradient(image, out.rgb)
        adj_rgb -= w.lambda_ssim * ssim_grad
        recon = (1.0 - w.lambda_ssim) * float(np.mean(np.abs(image - out.rgb))) \
            + w.lambda_ssim * (1.0 - ssim_val)
    else:
        recon = float(np.mean(np.abs(image - out.rgb)))

    # scale
    scale_val, scale_grad = loss_scale_gradient(gaussians, w)
    scale_grad = w.lambda_scale * scale_grad

    # depth
    adj_depth = np.zeros((h, wd))
    depth_val = 0.0
    m = masks.dense
    if np.any(m) and w.lambda_depth > 0.0:
        norm = float(np.max(frame.depth[m]))
        count = int(m.sum())
        depth_val = float(np.mean(np.abs(frame.depth[m] - out.depth[m])) / norm)
        adj_depth[m] = w.lambda_depth * np.sign(out.depth[m] - frame.depth[m]) / (count * norm)
    elif np.any(m):
        depth_val = loss_depth(frame.depth, out.depth, masks, w)

    # empty + dense on alpha
    adj_alpha = np.zeros((h, wd))
    k = w.alpha_accum
    empty_val = loss_empty(out.alpha, masks, w)
    if np.any(masks.empty) and w.lambda_empty > 0.0:
        me = masks.empty
        adj_alpha[me] += w.lambda_empty * k * out.alpha[me] ** (k - 1.0) / me.sum()
    dense_val = loss_dense(out.alpha, masks, w)
    if np.any(m) and w.lambda_dense > 0.0:
        adj_alpha[m] -= w.lambda_dense * k * (1.0 - out.alpha[m]) ** (k - 1.0) / m.sum()

    # semantics
    adj_sem = np.zeros((h, wd, c))
    sem_val = loss_semantic(out.semantics, frame.labels, masks, w)
    if np.any(m) and w.lambda_semantic > 0.0:
        idx = np.flatnonzero(m.ravel())
        lab = np.asarray(frame.labels).ravel()[idx].astype(np.int64)
        flat = out.semantics.reshape(-1, c)
        raw = flat[idx, lab]
        inside = (raw > w.semantic_clamp) & (raw < 1.0)
        adj_flat = adj_sem.reshape(-1, c)
        vals = np.where(inside, -1.0 / np.maximum(raw, w.semantic_clamp), 0.0)
        adj_flat[idx, lab] = w.lambda_semantic * vals / idx.size

    breakdown = {
        "recon": recon,
        "scale": w.lambda_scale * scale_val,
        "depth": w.lambda_depth * depth_val,
        "empty": w.lambda_empty * empty_val,
        "dense": w.lambda_dense * dense_val,
        "semantic": w.lambda_semantic * sem_val,
    }
    total = float(sum(breakdown.values()))
    breakdown["total"] = total
    adjoints = RenderAdjoints(rgb=adj_rgb, depth=adj_depth, alpha=adj_alpha,
                              semantics=adj_sem)
    return total, breakdown, adjoints, scale_grad
