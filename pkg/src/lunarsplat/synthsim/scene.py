"""Procedural desk-scale lunar scenes: terrain, craters, rocks, lander, sun."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..classes import CLASS_COUNT
from ..errors import InvalidConfigError
from ..heightgrid import HeightGrid
from ..rng import substream

DEFAULT_ALBEDO = (0.45, 0.30, 0.0, 0.50, 0.60, 0.55)


@dataclass(frozen=True)
class Rock:
    center: np.ndarray    # (3,) meters
    radii: np.ndarray     # (3,) meters, > 0
    rotation: np.ndarray  # unit quaternion (w, x, y, z)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray


@dataclass(frozen=True)
class SceneConfig:
    x_min: float = -2.0
    x_max: float = 26.0
    y_min: float = -5.0
    y_max: float = 5.0
    cell: float = 0.1
    base_amplitude: float = 0.15
    base_wavelength: float = 9.0
    noise_amplitude: float = 0.04
    noise_cell: float = 1.5
    crater_count: int = 3
    crater_radius_min: float = 0.6
    crater_radius_max: float = 1.5
    crater_depth_frac: float = 0.25
    rock_count: int = 40
    rock_radius_min: float = 0.05
    rock_radius_max: float = 0.22
    lander: bool = False
    lander_x: float = 12.0
    lander_y: float = -2.5
    lander_half_x: float = 0.5
    lander_half_y: float = 0.5
    lander_half_z: float = 0.4
    sun_azimuth_deg: float = 135.0
    sun_elevation_deg: float = 35.0
    albedo: tuple = DEFAULT_ALBEDO


@dataclass
class SceneModel:
    dem: HeightGrid
    rocks: list
    lander: Optional[Box]
    sun_direction: np.ndarray
    albedo: np.ndarray
    class_count: int = CLASS_COUNT

    def surface_height(self, x, y):
        z, _ = self.dem.sample(x, y)
        return z


def _value_noise(rng, x_nodes, y_nodes, coarse_cell, amplitude):
    """Seeded coarse Gaussian grid, bilinearly upsampled: smooth terrain noise."""
    x0, x1 = x_nodes[0], x_nodes[-1]
    y0, y1 = y_nodes[0], y_nodes[-1]
    ncx = max(2, int(np.ceil((x1 - x0) / coarse_cell)) + 1)
    ncy = max(2, int(np.ceil((y1 - y0) / coarse_cell)) + 1)
    coarse = rng.normal(size=(ncy, ncx)) * amplitude
    grid = HeightGrid(coarse, coarse_cell, (x0, y0))
    xs, ys = np.meshgrid(x_nodes, y_nodes)
    z, _ = grid.sample(np.clip(xs, x0, x0 + (ncx - 1) * coarse_cell),
                       np.clip(ys, y0, y0 + (ncy - 1) * coarse_cell))
    return z


def generate_scene(cfg: SceneConfig, seed: int) -> SceneModel:
    """Deterministic scene synthesis: identical (cfg, seed) gives identical output."""
    if cfg.x_max <= cfg.x_min or cfg.y_max <= cfg.y_min:
        raise InvalidConfigError("terrain extents have zero or negative area")
    if cfg.cell <= 0:
        raise InvalidConfigError("scene.cell must be positive")

    nx = int(round((cfg.x_max - cfg.x_min) / cfg.cell)) + 1
    ny = int(round((cfg.y_max - cfg.y_min) / cfg.cell)) + 1
    x_nodes = cfg.x_min + np.arange(nx) * cfg.cell
    y_nodes = cfg.y_min + np.arange(ny) * cfg.cell
    xs, ys = np.meshgrid(x_nodes, y_nodes)

    dem = np.zeros((ny, nx), dtype=np.float64)
    if cfg.base_amplitude != 0.0:
        k = 2.0 * np.pi / cfg.base_wavelength
        dem += cfg.base_amplitude * np.sin(k * xs) * np.cos(0.8 * k * ys)
    if cfg.noise_amplitude != 0.0:
        dem += _value_noise(substream(seed, "scene", "noise"), x_nodes, y_nodes,
                            cfg.noise_cell, cfg.noise_amplitude)

    if cfg.crater_count > 0:
        rng = substream(seed, "scene", "craters")
        for _ in range(cfg.crater_count):
            cx = rng.uniform(cfg.x_min, cfg.x_max)
            cy = rng.uniform(cfg.y_min, cfg.y_max)
            radius = rng.uniform(cfg.crater_radius_min, cfg.crater_radius_max)
            depth = radius * cfg.crater_depth_frac
            r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / (radius * radius)
            bowl = np.where(r2 < 1.0, -depth * (1.0 - r2) ** 2, 0.0)
            dem += bowl

    grid = HeightGrid(dem, cfg.cell, (cfg.x_min, cfg.y_min))

    lander = None
    if cfg.lander:
        z, inside = grid.sample(cfg.lander_x, cfg.lander_y)
        if not inside:
            raise InvalidConfigError("lander position outside the terrain")
        lander = Box(np.array([cfg.lander_x, cfg.lander_y, float(z) + cfg.lander_half_z]),
                     np.array([cfg.lander_half_x, cfg.lander_half_y, cfg.lander_half_z]))

    rocks = []
    if cfg.rock_count > 0:
        rng = substream(seed, "scene", "rocks")
        margin = cfg.rock_radius_max
        attempts = 0
        while len(rocks) < cfg.rock_count:
            attempts += 1
            if attempts > 200 * cfg.rock_count:
                raise InvalidConfigError("could not place all rocks without overlap")
            cx = rng.uniform(cfg.x_min + margin, cfg.x_max - margin)
            cy = rng.uniform(cfg.y_min + margin, cfg.y_max - margin)
            base = rng.uniform(cfg.rock_radius_min, cfg.rock_radius_max)
            radii = base * rng.uniform(0.6, 1.4, size=3)
            quat = rng.normal(size=4)
            quat /= np.linalg.norm(quat)
            # reject overlaps with rocks already placed and the lander footprint
            ok = True
            for other in rocks:
                if np.hypot(cx - other.center[0], cy - other.center[1]) < (
                        radii.max() + other.radii.max()):
                    ok = False
                    break
            if ok and lander is not None:
                pad = radii.max()
                if (abs(cx - lander.center[0]) < lander.half_extents[0] + pad
                        and abs(cy - lander.center[1]) < lander.half_extents[1] + pad):
                    ok = False
            if not ok:
                continue
            z, _ = grid.sample(cx, cy)
            center = np.array([cx, cy, float(z) + 0.4 * radii.max()])
            rocks.append(Rock(center, radii, quat))

    el = np.deg2rad(cfg.sun_elevation_deg)
    az = np.deg2rad(cfg.sun_azimuth_deg)
    sun = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])

    albedo = np.asarray(cfg.albedo, dtype=np.float64)
    if albedo.shape != (CLASS_COUNT,):
        raise InvalidConfigError(f"albedo must list {CLASS_COUNT} per-class values")
    return SceneModel(dem=grid, rocks=rocks, lander=lander, sun_direction=sun,
                      albedo=albedo)
