"""Differentiable forward rendering of Gaussian splats with semantic channels.

The renderer composites depth-sorted elliptical splats front to back per
pixel. Internally it builds one flat (pixel, splat) pair list ordered by
(pixel id, depth rank) and evaluates transmittance with a segmented doubling
scan whose combination tree depends only on a pair's position *within its own
pixel*. Per-pixel results are therefore a pure function of that pixel's splat
sequence: rendering any partition of the image and stitching the pieces is
bit-identical to a full-frame render, and shuffling the input list is
invisible as long as depths are distinct (ties keep input order via the
stable depth sort).

``render_with_gradients`` contracts caller-supplied per-pixel loss adjoints
against the analytic derivative of the compositing equations and chains them
back to every Gaussian parameter (mean, log-scale, rotation quaternion,
opacity logit, color). The discrete label receives no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .classes import CLASS_COUNT
from .scene_core import Camera, GaussianArrays, as_arrays, project_gaussians, sigmoid


@dataclass(frozen=True)
class RasterConfig:
    support_sigma: float = 3.0        # splat support truncated at this Mahalanobis radius
    transmittance_min: float = 1e-4   # early termination threshold
    alpha_min_depth: float = 1e-3     # alpha-normalization cutoff for the depth image
    cov2d_floor: float = 0.3          # px^2 isotropic floor added after projection
    depth_sentinel: float = 0.0       # depth value where accumulation < alpha_min_depth
    class_count: int = CLASS_COUNT


DEFAULT_CONFIG = RasterConfig()


@dataclass
class RenderOutput:
    rgb: np.ndarray        # (H, W, 3)
    depth: np.ndarray      # (H, W), alpha-normalized expected depth or sentinel
    alpha: np.ndarray      # (H, W) accumulation in [0, 1]
    semantics: np.ndarray  # (H, W, C) per-class accumulated weight


@dataclass
class RenderAdjoints:
    """Per-pixel d(loss)/d(output); any image may be None (treated as zero)."""

    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    semantics: Optional[np.ndarray] = None


@dataclass
class RenderGradients:
    """d(loss)/d(parameter), aligned with the input Gaussian order."""

    means: np.ndarray           # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4), w.r.t. the raw stored quaternion
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)


def _empty_output(cam: Camera, cfg: RasterConfig) -> RenderOutput:
    h, w = cam.height, cam.width
    return RenderOutput(
        rgb=np.zeros((h, w, 3)),
        depth=np.full((h, w), cfg.depth_sentinel, dtype=np.float64),
        alpha=np.zeros((h, w)),
        semantics=np.zeros((h, w, cfg.class_count)),
    )


def _zero_gradients(n: int) -> RenderGradients:
    return RenderGradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                           np.zeros(n), np.zeros((n, 3)))


def _local_indices(pid_sorted: np.ndarray) -> np.ndarray:
    """Position of each pair within its (contiguous) pixel segment."""
    p = pid_sorted.shape[0]
    boundary = np.empty(p, dtype=bool)
    boundary[0] = True
    np.not_equal(pid_sorted[1:], pid_sorted[:-1], out=boundary[1:])
    seg_id = np.cumsum(boundary) - 1
    starts = np.flatnonzero(boundary)
    return np.arange(p, dtype=np.int64) - starts[seg_id]


def _segmented_inclusive_scan(values: np.ndarray, local: np.ndarray, multiply: bool) -> np.ndarray:
    """Hillis-Steele scan gated by local index.

    The combination tree for element i depends only on i's position within
    its own segment, which keeps per-pixel results independent of whatever
    other pixels contain (exact tiling invariance).
    """
    out = values.copy()
    n = out.shape[0]
    if n == 0:
        return out
    identity = 1.0 if multiply else 0.0
    max_local = int(local.max())
    shift = 1
    while shift <= max_local:
        prev = np.where(local[shift:] >= shift, out[:-shift], identity)
        if multiply:
            out[shift:] *= prev
        else:
            out[shift:] += prev
        shift *= 2
    return out


class _PairState:
    """Everything the forward pass computed, kept for the backward pass."""

    __slots__ = ("gidx", "mean2d", "inv_cov", "z", "alpha_act", "colors", "labels",
                 "pid", "ps", "gauss_w", "eff_a", "trans", "weight", "local",
                 "xc", "sigma_c", "sigma_w", "rot_mats", "scales", "q_raw", "q_norm")


def _forward(arrays: GaussianArrays, cam: Camera, cfg: RasterConfig,
             window=None, keep_state: bool = False):
    """Project, pair, scan, and accumulate. Returns (RenderOutput, state)."""
    r0, r1, c0, c1 = window if window is not None else (0, cam.height, 0, cam.width)
    out_h, out_w = r1 - r0, c1 - c0
    out = RenderOutput(
        rgb=np.zeros((out_h, out_w, 3)),
        depth=np.full((out_h, out_w), cfg.depth_sentinel, dtype=np.float64),
        alpha=np.zeros((out_h, out_w)),
        semantics=np.zeros((out_h, out_w, cfg.class_count)),
    )
    if len(arrays) == 0:
        return out, None

    idx, mean2d, covp, z, radius = project_gaussians(
        arrays, cam, cfg.support_sigma, cfg.cov2d_floor)
    if len(idx) == 0:
        return out, None

    order = np.argsort(z, kind="stable")
    gidx = idx[order]
    mean2d = mean2d[order]
    covp = covp[order]
    z = z[order]


    a, b, c = covp[:, 0], covp[:, 1], covp[:, 2]
    det = a * c - b * b
    inv_cov = np.stack([c / det, -b / det, a / det], axis=1)
    alpha_act = sigmoid(arrays.opacity_logits[gidx])
    colors = arrays.colors[gidx]
    labels = arrays.labels[gidx].astype(np.int64)

    # integer bounding boxes over pixel columns/rows whose centers can pass
    # the Mahalanobis support test; marginal standard deviations bound the
    # ellipse tighter than the eigenvalue disc (m >= dx^2 / cov_xx)
    mx, my = mean2d[:, 0], mean2d[:, 1]
    rx = cfg.support_sigma * np.sqrt(a)
    ry = cfg.support_sigma * np.sqrt(c)
    x0 = np.clip(np.ceil(mx - rx - 0.5), c0, c1).astype(np.int32)
    x1 = np.clip(np.floor(mx + rx - 0.5) + 1, c0, c1).astype(np.int32)
    y0 = np.clip(np.ceil(my - ry - 0.5), r0, r1).astype(np.int32)
    y1 = np.clip(np.floor(my + ry - 0.5) + 1, r0, r1).astype(np.int32)
    bw = np.maximum(x1 - x0, 0)
    counts = bw * np.maximum(y1 - y0, 0)
    nonzero = np.flatnonzero(counts > 0).astype(np.int32)
    if nonzero.shape[0] == 0:
        return out, None
    counts_nz = counts[nonzero]
    ends = np.cumsum(counts_nz, dtype=np.int64)
    total = int(ends[-1])

    ps = np.repeat(np.arange(nonzero.shape[0], dtype=np.int32), counts_nz)
    within = (np.arange(total, dtype=np.int64)
              - (ends - counts_nz)[ps]).astype(np.int32)
    ps = nonzero[ps]  # back to depth-order splat indices
    oy, ox = np.divmod(within, bw[ps])
    px = x0[ps]
    px += ox
    py = y0[ps]
    py += oy

    dx = px + 0.5
    dx -= mx[ps]
    dy = py + 0.5
    dy -= my[ps]
    maha = inv_cov[ps, 0] * dx * dx
    maha += 2.0 * inv_cov[ps, 1] * dx * dy
    maha += inv_cov[ps, 2] * dy * dy
    keep = np.flatnonzero(maha <= cfg.support_sigma * cfg.support_sigma)
    if keep.shape[0] == 0:
        return out, None
    ps = ps[keep]
    maha = maha[keep]
    pid = (py[keep] - r0).astype(np.int32) * np.int32(out_w) + (px[keep] - c0)

    # canonical order: pixel-major, depth order within a pixel
    order2 = np.argsort(pid, kind="stable")
    pid = pid[order2]
    ps = ps[order2]
    maha = maha[order2]

    gauss_w = np.exp(-0.5 * maha)
    eff_a = alpha_act[ps] * gauss_w
    local = _local_indices(pid)
    incl = _segmented_inclusive_scan(1.0 - eff_a, local, multiply=True)
    trans = np.ones_like(incl)
    trans[1:] = np.where(local[1:] >= 1, incl[:-1], 1.0)
    live = trans >= cfg.transmittance_min
    weight = eff_a * trans
    weight *= live

    npix = out_h * out_w
    pid64 = pid.astype(np.int64)
    alpha_img = np.bincount(pid64, weights=weight, minlength=npix)
    depth_sum = np.bincount(pid64, weights=weight * z[ps], minlength=npix)
    rgb = np.stack([np.bincount(pid64, weights=weight * colors[ps, ch], minlength=npix)
                    for ch in range(3)], axis=1)
    sem = np.bincount(pid64 * cfg.class_count + labels[ps], weights=weight,
                      minlength=npix * cfg.class_count)

    alpha_img = np.clip(alpha_img, 0.0, 1.0)
    depth_ok = alpha_img >= cfg.alpha_min_depth
    depth_img = np.full(npix, cfg.depth_sentinel, dtype=np.float64)
    depth_img[depth_ok] = depth_sum[depth_ok] / alpha_img[depth_ok]

    out.rgb = rgb.reshape(out_h, out_w, 3)
    out.depth = depth_img.reshape(out_h, out_w)
    out.alpha = alpha_img.reshape(out_h, out_w)
    out.semantics = sem.reshape(out_h, out_w, cfg.class_count)

    state = None
    if keep_state:
        # terminated pairs carry no gradient (all later pairs in the pixel
        # are terminated too, so their suffix sums vanish); termination is a
        # per-segment prefix cut, which keeps the stored local indices valid
        alive = np.flatnonzero(live)
        state = _PairState()
        state.gidx = gidx
        state.mean2d = mean2d
        state.inv_cov = inv_cov
        state.z = z
        state.alpha_act = alpha_act
        state.colors = colors
        state.labels = labels
        state.pid = pid[alive]
        state.ps = ps[alive]
        state.gauss_w = gauss_w[alive]
        state.eff_a = eff_a[alive]
        state.trans = trans[alive]
        state.weight = weight[alive]
        state.local = local[alive]
    return out, state


def render(gaussians, cam: Camera, cfg: RasterConfig = DEFAULT_CONFIG,
           window=None) -> RenderOutput:
    """Composite the splats into RGB, expected depth, accumulation, semantics.

    ``window=(row0, row1, col0, col1)`` restricts output to an image crop;
    stitched crops equal the full render exactly.
    """
    arrays = as_arrays(gaussians)
    out, _ = _forward(arrays, cam, cfg, window=window)
    return out


def depth_sort_indices(gaussians, cam: Camera,
                       cfg: RasterConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Stable ascending camera-z order of the visible Gaussians (culled excluded)."""
    arrays = as_arrays(gaussians)
    idx, _, _, z, _ = project_gaussians(arrays, cam, cfg.support_sigma, cfg.cov2d_floor)
    return idx[np.argsort(z, kind="stable")]


def render_with_state(gaussians, cam: Camera, cfg: RasterConfig = DEFAULT_CONFIG):
    """Forward render keeping the pair pipeline for a later backward pass."""
    arrays = as_arrays(gaussians)
    return _forward(arrays, cam, cfg, keep_state=True)


def render_with_gradients(gaussians, cam: Camera, adjoints: RenderAdjoints,
                          cfg: RasterConfig = DEFAULT_CONFIG):
    """Forward render plus the chain-rule contraction of per-pixel adjoints.

    The forward outputs are bit-identical to :func:`render`. Per-Gaussian
    gradient accumulation always reduces pairs in the canonical
    (pixel, depth) order, so results are reproducible run to run.
    """
    arrays = as_arrays(gaussians)
    out, st = _forward(arrays, cam, cfg, keep_state=True)
    grads = backward_from_state(arrays, cam, out, st, adjoints, cfg)
    return out, grads


def backward_from_state(gaussians, cam: Camera, out: RenderOutput, st,
                        adjoints: RenderAdjoints,
                        cfg: RasterConfig = DEFAULT_CONFIG) -> RenderGradients:
    """Chain per-pixel adjoints back to Gaussian parameters using the pair
    state produced by :func:`render_with_state`."""
    arrays = as_arrays(gaussians)
    n = len(arrays)
    grads = _zero_gradients(n)
    if st is None:
        return grads

    h, w = cam.height, cam.width
    npix = h * w
    adj_rgb = (np.zeros((npix, 3)) if adjoints.rgb is None
               else np.asarray(adjoints.rgb, dtype=np.float64).reshape(npix, 3))
    adj_depth = (np.zeros(npix) if adjoints.depth is None
                 else np.asarray(adjoints.depth, dtype=np.float64).reshape(npix))
    adj_alpha = (np.zeros(npix) if adjoints.alpha is None
                 else np.asarray(adjoints.alpha, dtype=np.float64).reshape(npix))
    adj_sem = (np.zeros((npix, cfg.class_count)) if adjoints.semantics is None
               else np.asarray(adjoints.semantics, dtype=np.float64).reshape(npix, cfg.class_count))

    alpha_img = out.alpha.reshape(npix)
    depth_img = out.depth.reshape(npix)
    depth_ok = alpha_img >= cfg.alpha_min_depth
    # depth = S / alpha where defined: fold its adjoint into S and alpha terms
    adj_s = np.where(depth_ok, adj_depth / np.maximum(alpha_img, 1e-300), 0.0)
    adj_alpha_eff = adj_alpha - np.where(depth_ok, adj_depth * depth_img
                                         / np.maximum(alpha_img, 1e-300), 0.0)

    pid, ps = st.pid, st.ps
    weight, trans, eff_a = st.weight, st.trans, st.eff_a
    z, colors, labels = st.z, st.colors, st.labels

    adj_s_p = adj_s[pid]
    adjw = (adj_rgb[pid, 0] * colors[ps, 0]
            + adj_rgb[pid, 1] * colors[ps, 1]
            + adj_rgb[pid, 2] * colors[ps, 2]
            + adj_s_p * z[ps]
            + adj_alpha_eff[pid]
            + adj_sem[pid, labels[ps]])

    # d(loss)/d(eff_a_i) = adjw_i T_i [live] - (sum_{j>i} adjw_j w_j) / (1 - a_i)
    u = adjw * weight
    tot = np.bincount(pid, weights=u, minlength=npix)[pid]
    incl = _segmented_inclusive_scan(u.copy(), st.local, multiply=False)
    suffix = tot - incl
    one_minus = 1.0 - eff_a
    live = weight > 0.0
    safe = np.where(one_minus > 0.0, one_minus, 1.0)
    d_eff = adjw * trans * live - np.where(one_minus > 0.0, suffix / safe, 0.0)

    m = st.gidx.shape[0]  # visible splat count (depth order)
    d_alpha_act = np.bincount(ps, weights=st.gauss_w * d_eff, minlength=m)
    d_maha = -0.5 * d_eff * eff_a

    mx, my = st.mean2d[:, 0], st.mean2d[:, 1]
    px = pid % w
    py = pid // w
    dx = px + 0.5 - mx[ps]
    dy = py + 0.5 - my[ps]
    ia, ib, ic = st.inv_cov[ps, 0], st.inv_cov[ps, 1], st.inv_cov[ps, 2]
    qx = ia * dx + ib * dy
    qy = ib * dx + ic * dy
    # d maha / d mean2d = -2 q  (since dx = pixel - mean)
    g_mx = np.bincount(ps, weights=-2.0 * d_maha * qx, minlength=m)
    g_my = np.bincount(ps, weights=-2.0 * d_maha * qy, minlength=m)
    # d maha / d cov packed (a, b, c) = (-qx^2, -2 qx qy, -qy^2)
    g_cov_a = np.bincount(ps, weights=-d_maha * qx * qx, minlength=m)
    g_cov_b = np.bincount(ps, weights=-2.0 * d_maha * qx * qy, minlength=m)
    g_cov_c = np.bincount(ps, weights=-d_maha * qy * qy, minlength=m)
    g_z_direct = np.bincount(ps, weights=weight * adj_s_p, minlength=m)
    g_color = np.stack([np.bincount(ps, weights=weight * adj_rgb[pid, ch], minlength=m)
                        for ch in range(3)], axis=1)

    _chain_to_parameters(arrays, cam, cfg, st, grads,
                         g_mx, g_my, np.stack([g_cov_a, g_cov_b, g_cov_c], axis=1),
                         g_z_direct, d_alpha_act, g_color)
    return grads


def _chain_to_parameters(arrays, cam, cfg, st, grads,
                         g_mx, g_my, g_cov, g_z_direct, d_alpha_act, g_color):
    """Pull 2D gradients back through projection to the 3D parameters."""
    from .scene_core import quat_rotation_jacobian, quat_to_rotation

    gidx = st.gidx
    R_wc = cam.pose.rotation
    xc = arrays.means[gidx] @ R_wc.T + cam.pose.translation
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy = cam.fx, cam.fy
    invz = 1.0 / z
    invz2 = invz * invz

    q_raw = arrays.rotations[gidx]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_unit = q_raw / q_norm[:, None]
    Rq = quat_to_rotation(q_unit)
    s = np.exp(arrays.log_scales[gidx])
    M = Rq * s[:, None, :]
    Sigma = M @ np.transpose(M, (0, 2, 1))
    Sigma_c = np.einsum("ij,njk,lk->nil", R_wc, Sigma, R_wc)
    J = np.zeros((gidx.shape[0], 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx * invz
    J[:, 0, 2] = -fx * x * invz2
    J[:, 1, 1] = fy * invz
    J[:, 1, 2] = -fy * y * invz2

    Gc = np.empty((gidx.shape[0], 2, 2), dtype=np.float64)
    Gc[:, 0, 0] = g_cov[:, 0]
    Gc[:, 0, 1] = 0.5 * g_cov[:, 1]
    Gc[:, 1, 0] = 0.5 * g_cov[:, 1]
    Gc[:, 1, 1] = g_cov[:, 2]

    dSigma_c = np.einsum("nji,njk,nkl->nil", J, Gc, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", Gc, J, Sigma_c)

    g_x = g_mx * fx * invz + dJ[:, 0, 2] * (-fx * invz2)
    g_y = g_my * fy * invz + dJ[:, 1, 2] * (-fy * invz2)
    g_z = (-g_mx * fx * x * invz2 - g_my * fy * y * invz2
           + g_z_direct
           + dJ[:, 0, 0] * (-fx * invz2)
           + dJ[:, 0, 2] * (2.0 * fx * x * invz2 * invz)
           + dJ[:, 1, 1] * (-fy * invz2)
           + dJ[:, 1, 2] * (2.0 * fy * y * invz2 * invz))

    g_mean = np.stack([g_x, g_y, g_z], axis=1) @ R_wc
    dSigma = np.einsum("ji,njk,kl->nil", R_wc, dSigma_c, R_wc)
    dSigma = 0.5 * (dSigma + np.transpose(dSigma, (0, 2, 1)))
    dM = 2.0 * dSigma @ M
    RtdM = np.einsum("nji,njk->nik", Rq, dM)
    g_scale = np.stack([RtdM[:, 0, 0], RtdM[:, 1, 1], RtdM[:, 2, 2]], axis=1)
    g_log_scale = g_scale * s
    dRq = dM * s[:, None, :]
    Jq = quat_rotation_jacobian(q_unit)
    g_q_unit = np.einsum("nij,ncij->nc", dRq, Jq)
    dot = np.sum(g_q_unit * q_unit, axis=1)
    g_q_raw = (g_q_unit - dot[:, None] * q_unit) / q_norm[:, None]

    alpha_act = st.alpha_act
    g_logit = d_alpha_act * alpha_act * (1.0 - alpha_act)

    np.add.at(grads.means, gidx, g_mean)
    np.add.at(grads.log_scales, gidx, g_log_scale)
    np.add.at(grads.rotations, gidx, g_q_raw)
    np.add.at(grads.opacity_logits, gidx, g_logit)
    np.add.at(grads.colors, gidx, g_color)
