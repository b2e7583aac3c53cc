"""Shared oracles and scene samplers for gradient and rendering tests.

Finite differencing only verifies a derivative where the objective is smooth,
so the random-scene sampler rejects configurations that sit on one of the
renderer's documented non-smooth boundaries (depth ties, the early-termination
threshold, the alpha-normalization cutoff, the semantic probability clamp, and
the scale-ratio hinge). The gradient-check configs also widen the splat
support so the truncation step, an approximation knob, falls below finite
difference resolution.
"""

import numpy as np

from lunarsplat.classes import CLASS_COUNT, SKY
from lunarsplat.losses import LossWeights, build_masks
from lunarsplat.rasterizer import RasterConfig, RenderAdjoints, render
from lunarsplat.scene_core import Camera, Frame, GaussianArrays, Pose, sigmoid

GRADCHECK_RASTER = RasterConfig(support_sigma=7.0)
FD_STEP = 1e-4


def gradcheck_camera(size=32, f=40.0):
    return Camera(f, f, size / 2, size / 2, size, size, Pose.identity(), 0.1, 100.0)


def random_gaussian_arrays(rng, n, cam, z_range=(2.0, 6.0), min_z_gap=2e-2):
    """Splats inside the frustum with well-separated depths and mild ratios."""
    while True:
        z = rng.uniform(*z_range, size=n)
        if n < 2 or np.min(np.diff(np.sort(z))) > min_z_gap:
            break
    lateral = min(cam.cx / cam.fx, cam.cy / cam.fy) * 0.8
    x = rng.uniform(-lateral, lateral, size=n) * z
    y = rng.uniform(-lateral, lateral, size=n) * z
    means = np.stack([x, y, z], axis=1)
    while True:
        log_scales = rng.uniform(np.log(0.05), np.log(0.45), size=(n, 3))
        ratio = np.exp(log_scales.max(axis=1) - log_scales.min(axis=1))
        gaps = np.abs(log_scales[:, :, None] - log_scales[:, None, :])
        gaps += np.eye(3) * 1.0
        # stay away from the scale-ratio hinge and from component ties
        if np.all(np.abs(ratio - 10.0) > 0.3) and gaps.min() > 1e-2:
            break
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    logits = rng.uniform(-2.0, 2.0, size=n)
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    labels = rng.integers(0, CLASS_COUNT, size=n).astype(np.uint8)
    return GaussianArrays(means, log_scales, rotations, logits, colors, labels)


def random_frame(rng, cam, weights: LossWeights):
    """Random supervision data for loss gradients; depths inside the range."""
    h, w = cam.height, cam.width
    rgb = rng.uniform(0.0, 1.0, size=(h, w, 3))
    depth = rng.uniform(1.0, 8.0, size=(h, w))
    validity = rng.uniform(size=(h, w)) > 0.05
    labels = rng.integers(0, CLASS_COUNT, size=(h, w)).astype(np.uint8)
    sky = rng.uniform(size=(h, w)) < 0.1
    labels[sky] = SKY
    return Frame(rgb=rgb, depth=depth, validity=validity, labels=labels, camera=cam)


def scene_is_fd_safe(arrays, cam, frame, weights, raster_cfg):
    """Reject scenes near the renderer's non-smooth boundaries."""
    out = render(arrays, cam, raster_cfg)
    eps = raster_cfg.alpha_min_depth
    if np.any((out.alpha > 0.5 * eps) & (out.alpha < 2.0 * eps)):
        return False
    # early termination margin: transmittance never close to the threshold
    final_t = 1.0 - out.alpha
    if np.any((final_t > 0) & (final_t < 10.0 * raster_cfg.transmittance_min)):
        return False
    if frame is not None:
        masks = build_masks(frame.labels, frame.depth, frame.validity, weights)
        dense = masks.dense
        if np.any(dense):
            idx = np.flatnonzero(dense.ravel())
            sem = out.semantics.reshape(-1, raster_cfg.class_count)
            correct = sem[idx, frame.labels.ravel()[idx].astype(np.int64)]
            clamp = weights.semantic_clamp
            if np.any((correct > 0.2 * clamp) & (correct < 5.0 * clamp)):
                return False
    return True


def sample_fd_safe_scene(seed, max_gaussians=10, with_frame=True,
                         weights=None, raster_cfg=GRADCHECK_RASTER, cam=None):
    """Draw (arrays, cam, frame) resampling until the scene is FD-safe."""
    if weights is None:
        weights = LossWeights()
    cam = cam if cam is not None else gradcheck_camera()
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, attempt])
        n = int(rng.integers(3, max_gaussians + 1))
        arrays = random_gaussian_arrays(rng, n, cam)
        frame = random_frame(rng, cam, weights) if with_frame else None
        if scene_is_fd_safe(arrays, cam, frame, weights, raster_cfg):
            return arrays, cam, frame
        attempt += 1


PARAM_FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "colors")


def numeric_gradients(objective, arrays, step=FD_STEP):
    """Central finite differences of a scalar objective over all parameters."""
    grads = {}
    for field in PARAM_FIELDS:
        base = getattr(arrays, field)
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = base[ix]
            base[ix] = orig + step
            hi = objective(arrays)
            base[ix] = orig - step
            lo = objective(arrays)
            base[ix] = orig
            g[ix] = (hi - lo) / (2.0 * step)
            it.iternext()
        grads[field] = g
    return grads


def assert_gradients_close(analytic, numeric, rel=1e-3, abs_tol=1e-6):
    """Pass where |a - n| <= max(abs_tol, rel * max(|a|, |n|)), the looser bound."""
    for field in PARAM_FIELDS:
        a = getattr(analytic, field)
        n = numeric[field]
        diff = np.abs(a - n)
        allowed = np.maximum(abs_tol, rel * np.maximum(np.abs(a), np.abs(n)))
        bad = diff > allowed
        assert not np.any(bad), (
            f"{field}: {bad.sum()} gradient entries off; worst "
            f"analytic={a[bad][np.argmax(diff[bad])]:.3e} "
            f"numeric={n[bad][np.argmax(diff[bad])]:.3e}")


def reference_render(arrays, cam, cfg: RasterConfig):
    """Independent per-pixel Python-loop compositor (the oracle for render).

    Walks splats front to back at every pixel exactly as the compositing
    definition reads: w_i = a_i * T_i while T >= transmittance_min, with the
    Mahalanobis support cutoff. Only usable for tiny scenes.
    """
    from lunarsplat.scene_core import project_gaussians

    idx, mean2d, covp, z, _ = project_gaussians(arrays, cam, cfg.support_sigma,
                                                cfg.cov2d_floor)
    order = np.argsort(z, kind="stable")
    idx, mean2d, covp, z = idx[order], mean2d[order], covp[order], z[order]
    alpha_act = sigmoid(arrays.opacity_logits[idx])
    colors = arrays.colors[idx]
    labels = arrays.labels[idx].astype(int)

    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth_sum = np.zeros((h, w))
    sem = np.zeros((h, w, cfg.class_count))
    for r in range(h):
        for c in range(w):
            t = 1.0
            for k in range(len(idx)):
                if t < cfg.transmittance_min:
                    break
                dx = c + 0.5 - mean2d[k, 0]
                dy = r + 0.5 - mean2d[k, 1]
                a_, b_, c_ = covp[k]
                det = a_ * c_ - b_ * b_
                m = (c_ * dx * dx - 2 * b_ * dx * dy + a_ * dy * dy) / det
                if m > cfg.support_sigma ** 2:
                    continue
                eff = alpha_act[k] * np.exp(-0.5 * m)
                wgt = eff * t
                rgb[r, c] += wgt * colors[k]
                alpha[r, c] += wgt
                depth_sum[r, c] += wgt * z[k]
                sem[r, c, labels[k]] += wgt
                t *= 1.0 - eff
    alpha = np.clip(alpha, 0.0, 1.0)
    depth = np.full((h, w), cfg.depth_sentinel)
    ok = alpha >= cfg.alpha_min_depth
    depth[ok] = depth_sum[ok] / alpha[ok]
    return rgb, depth, alpha, sem


def adjoint_objective(cam, adjoints: RenderAdjoints, cfg: RasterConfig):
    """Scalar <adjoints, outputs> used to FD-check the raw render backward."""

    def objective(arrays):
        out = render(arrays, cam, cfg)
        total = 0.0
        if adjoints.rgb is not None:
            total += float(np.sum(adjoints.rgb * out.rgb))
        if adjoints.depth is not None:
            total += float(np.sum(adjoints.depth * out.depth))
        if adjoints.alpha is not None:
            total += float(np.sum(adjoints.alpha * out.alpha))
        if adjoints.semantics is not None:
            total += float(np.sum(adjoints.semantics * out.semantics))
        return total

    return objective
