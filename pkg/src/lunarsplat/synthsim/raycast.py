"""Reference ray-cast renderer: ground-truth RGB, depth, and labels.

Terrain is traversed by fixed-step marching with bisection refinement; rocks
(ellipsoids) and the lander box intersect analytically. Shading is Lambertian
per-class albedo with a single hard shadow ray and no atmospheric term: a sun
at or below the horizon leaves every surface black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..classes import LANDER, REGOLITH, ROCK, SKY
from ..scene_core import Camera, quat_to_rotation
from .scene import SceneModel

_BISECT_ITERS = 25  # interval 0.05 m -> ~1e-9 m, well under the 1e-6 checks
_SHADOW_EPS = 1e-3


@dataclass
class FrameTruth:
    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) camera-z meters; +inf for sky
    labels: np.ndarray  # (H, W) uint8 class indices
    camera: Camera


def truth_to_frame(truth: "FrameTruth"):
    """Ground-truth observation as a mapping Frame (sky depth -> invalid)."""
    from ..scene_core import Frame

    validity = np.isfinite(truth.depth)
    depth = np.where(validity, truth.depth, 0.0)
    return Frame(rgb=truth.rgb, depth=depth, validity=validity,
                 labels=truth.labels, camera=truth.camera)


def _ray_bundle(cam: Camera):
    u, v = cam.pixel_centers()
    du = (u - cam.cx) / cam.fx
    dv = (v - cam.cy) / cam.fy
    dirs_c = np.stack([du, dv, np.ones_like(du)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(dirs_c, axis=1)
    dirs_c /= norms[:, None]
    dirs_w = dirs_c @ cam.pose.rotation  # R^T applied to each row
    origin = cam.pose.center()
    return origin, dirs_w, norms


def _dem_signed_height(dem, points):
    """Ray z minus terrain height; +inf where the terrain is undefined."""
    h, inside = dem.sample(points[:, 0], points[:, 1])
    f = np.where(inside, points[:, 2] - h, np.inf)
    return f


def _march_dem(dem, origin, dirs, t_start, t_stop, step):
    """First terrain crossing per ray between t_start and t_stop, else +inf."""
    n = dirs.shape[0]
    t_hit = np.full(n, np.inf)
    alive = np.arange(n)
    t_prev = t_start.copy()
    f_prev = _dem_signed_height(dem, origin + t_prev[:, None] * dirs)
    # a ray starting below the surface hits immediately
    below = f_prev <= 0.0
    t_hit[below] = t_prev[below]
    alive = alive[~below]

    zmax = dem.z_max + 0.5
    while alive.size:
        d = dirs[alive]
        tp = t_prev[alive]
        tn = tp + step
        pn = origin + tn[:, None] * d
        fn = _dem_signed_height(dem, pn)
        fp = f_prev[alive]

        crossed = fn <= 0.0
        if np.any(crossed):
            rows = alive[crossed]
            lo = tp[crossed].copy()
            hi = tn[crossed].copy()
            for _ in range(_BISECT_ITERS):
                mid = 0.5 * (lo + hi)
                fm = _dem_signed_height(dem, origin + mid[:, None] * dirs[rows])
                take_hi = fm <= 0.0
                hi = np.where(take_hi, mid, hi)
                lo = np.where(take_hi, lo, mid)
            t_hit[rows] = 0.5 * (lo + hi)

        # drop finished rays: crossed, out of range, escaped upward, or exiting
        x, y, z = pn[:, 0], pn[:, 1], pn[:, 2]
        escaped = (z > zmax) & (d[:, 2] >= 0.0)
        exiting = (((x > dem.x_max) & (d[:, 0] >= 0)) | ((x < dem.origin[0]) & (d[:, 0] <= 0))
                   | ((y > dem.y_max) & (d[:, 1] >= 0)) | ((y < dem.origin[1]) & (d[:, 1] <= 0)))
        done = crossed | (tn > t_stop[alive]) | escaped | exiting
        keep = ~done
        t_prev[alive] = tn
        f_prev[alive] = fn
        alive = alive[keep]
    return t_hit


def _intersect_rocks(rocks, origin, dirs, t_min):
    """Nearest ellipsoid hit per ray: (t, rock index) with +inf / -1 misses."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    for k, rock in enumerate(rocks):
        R = quat_to_rotation(rock.rotation)
        o = ((origin - rock.center) @ R) / rock.radii
        d = (dirs @ R) / rock.radii
        a = np.sum(d * d, axis=1)
        b = 2.0 * (d @ o)
        c = float(o @ o) - 1.0
        disc = b * b - 4.0 * a * c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
        t = np.where(t1 >= t_min, t1, np.where(t2 >= t_min, t2, np.inf))
        t = np.where(ok, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, k, best_id)
    return best_t, best_id


def _intersect_box(box, origin, dirs, t_min):
    """Axis-aligned slab test; +inf for misses. Origin may be one point or
    one per ray."""
    n = dirs.shape[0]
    if box is None:
        return np.full(n, np.inf)
    lo = box.center - box.half_extents
    hi = box.center + box.half_extents
    origin = np.atleast_2d(origin)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo[None, :] - origin) * inv
        t_hi = (hi[None, :] - origin) * inv
    near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    hit = (far >= near) & (far >= t_min)
    t = np.where(near >= t_min, near, far)
    return np.where(hit, t, np.inf)


def _box_normals(box, points):
    rel = (points - box.center) / box.half_extents
    axis = np.argmax(np.abs(rel), axis=1)
    normals = np.zeros_like(points)
    normals[np.arange(points.shape[0]), axis] = np.sign(
        rel[np.arange(points.shape[0]), axis])
    return normals


def _shadowed(scene: SceneModel, points: np.ndarray) -> np.ndarray:
    """True where a hard shadow ray toward the sun is blocked."""
    sun = scene.sun_direction
    n = points.shape[0]
    if sun[2] <= 0.0:
        return np.ones(n, dtype=bool)
    blocked = np.zeros(n, dtype=bool)

    # terrain occlusion: sample the segment until the ray clears max height
    step = scene.dem.cell / 2.0
    t_exit = (scene.dem.z_max + 0.1 - points[:, 2]) / sun[2]
    t = np.full(n, _SHADOW_EPS)
    alive = np.flatnonzero(t_exit > _SHADOW_EPS)
    while alive.size:
        p = points[alive] + t[alive, None] * sun[None, :]
        f = _dem_signed_height(scene.dem, p)
        hit = f < 0.0
        blocked[alive[hit]] = True
        t[alive] += step
        alive = alive[~hit & (t[alive] <= t_exit[alive])]

    # rocks and lander occlude analytically
    todo = np.flatnonzero(~blocked)
    if todo.size and scene.rocks:
        dirs = np.tile(sun, (todo.size, 1))
        for k, rock in enumerate(scene.rocks):
            R = quat_to_rotation(rock.rotation)
            o = ((points[todo] - rock.center) @ R) / rock.radii
            d = (dirs @ R) / rock.radii
            a = np.sum(d * d, axis=1)
            b = 2.0 * np.sum(d * o, axis=1)
            c = np.sum(o * o, axis=1) - 1.0
            disc = b * b - 4.0 * a * c
            ok = disc >= 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t2 = (-b + sq) / (2.0 * a)
            hit = ok & (t2 > _SHADOW_EPS)
            blocked[todo[hit]] = True
            todo = todo[~hit]
            if not todo.size:
                break
            dirs = dirs[:todo.size]
    if todo.size and scene.lander is not None:
        dirs = np.tile(sun, (todo.size, 1))
        t_box = _intersect_box(scene.lander, points[todo], dirs, _SHADOW_EPS)
        blocked[todo[np.isfinite(t_box)]] = True
    return blocked


def render_ground_truth(scene: SceneModel, cam: Camera) -> FrameTruth:
    """Cast one ray per pixel; first hit sets depth (camera z) and label."""
    origin, dirs, norms = _ray_bundle(cam)
    t_near = cam.near * norms
    t_far = cam.far * norms

    t_dem = _march_dem(scene.dem, origin, dirs, t_near, t_far, scene.dem.cell / 2.0)
    t_rock, rock_id = _intersect_rocks(scene.rocks, origin, dirs, 1e-9) \
        if scene.rocks else (np.full(dirs.shape[0], np.inf), np.full(dirs.shape[0], -1))
    t_box = _intersect_box(scene.lander, origin, dirs, 1e-9)

    t_all = np.stack([t_dem, t_rock, t_box], axis=1)
    t_all[t_all < t_near[:, None]] = np.inf
    t_all[t_all > t_far[:, None]] = np.inf
    source = np.argmin(t_all, axis=1)
    t_hit = t_all[np.arange(t_all.shape[0]), source]
    hit = np.isfinite(t_hit)

    labels = np.full(dirs.shape[0], SKY, dtype=np.uint8)
    labels[hit & (source == 0)] = REGOLITH
    labels[hit & (source == 1)] = ROCK
    labels[hit & (source == 2)] = LANDER

    depth = np.where(hit, t_hit / norms, np.inf)

    shade = np.zeros(dirs.shape[0])
    if np.any(hit):
        pts = origin + t_hit[hit, None] * dirs[hit]
        normals = np.zeros_like(pts)
        src = source[hit]
        if np.any(src == 0):
            rows = src == 0
            gx, gy = scene.dem.gradient(pts[rows, 0], pts[rows, 1])
            nrm = np.stack([-gx, -gy, np.ones_like(gx)], axis=1)
            normals[rows] = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        if np.any(src == 1):
            rows = np.flatnonzero(src == 1)
            rid = rock_id[hit][rows]
            for k in np.unique(rid):
                rock = scene.rocks[k]
                R = quat_to_rotation(rock.rotation)
                sub = rows[rid == k]
                local = ((pts[sub] - rock.center) @ R) / rock.radii
                nrm = (local / rock.radii) @ R.T
                normals[sub] = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        if np.any(src == 2):
            rows = src == 2
            normals[rows] = _box_normals(scene.lander, pts[rows])

        ndotl = np.maximum(0.0, normals @ scene.sun_direction)
        lit = ~_shadowed(scene, pts) if scene.sun_direction[2] > 0.0 \
            else np.zeros(pts.shape[0], dtype=bool)
        shade[hit] = scene.albedo[labels[hit]] * ndotl * lit

    h, w = cam.height, cam.width
    rgb = np.repeat(shade[:, None], 3, axis=1).reshape(h, w, 3)
    return FrameTruth(rgb=rgb, depth=depth.reshape(h, w),
                      labels=labels.reshape(h, w), camera=cam)
