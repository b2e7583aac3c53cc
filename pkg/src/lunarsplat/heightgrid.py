"""Regular 2D height grid with bilinear sampling (terrain surface / DEM prior)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class HeightGrid:
    """Heights (ny, nx) on a regular grid; node [i, j] sits at
    (origin_x + j * cell, origin_y + i * cell)."""

    heights: np.ndarray
    cell: float
    origin: tuple

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        object.__setattr__(self, "heights", h)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise InvalidInputError("height grid needs at least 2x2 nodes")
        if self.cell <= 0:
            raise InvalidInputError("cell size must be positive")

    @property
    def x_max(self) -> float:
        return self.origin[0] + (self.heights.shape[1] - 1) * self.cell

    @property
    def y_max(self) -> float:
        return self.origin[1] + (self.heights.shape[0] - 1) * self.cell

    @property
    def z_max(self) -> float:
        return float(self.heights.max())

    def contains(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return ((x >= self.origin[0]) & (x <= self.x_max)
                & (y >= self.origin[1]) & (y <= self.y_max))

    def sample(self, x, y):
        """Bilinear heights plus an in-bounds mask; NaN outside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = self.contains(x, y)
        u = (x - self.origin[0]) / self.cell
        v = (y - self.origin[1]) / self.cell
        ny, nx = self.heights.shape
        j0 = np.clip(np.floor(u).astype(np.int64), 0, nx - 2)
        i0 = np.clip(np.floor(v).astype(np.int64), 0, ny - 2)
        fu = np.clip(u - j0, 0.0, 1.0)
        fv = np.clip(v - i0, 0.0, 1.0)
        h = self.heights
        z = ((1 - fu) * (1 - fv) * h[i0, j0] + fu * (1 - fv) * h[i0, j0 + 1]
             + (1 - fu) * fv * h[i0 + 1, j0] + fu * fv * h[i0 + 1, j0 + 1])
        z = np.where(inside, z, np.nan)
        return z, inside

    def gradient(self, x, y):
        """(dz/dx, dz/dy) of the bilinear patch at (x, y); zero outside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        inside = self.contains(x, y)
        u = (x - self.origin[0]) / self.cell
        v = (y - self.origin[1]) / self.cell
        ny, nx = self.heights.shape
        j0 = np.clip(np.floor(u).astype(np.int64), 0, nx - 2)
        i0 = np.clip(np.floor(v).astype(np.int64), 0, ny - 2)
        fu = np.clip(u - j0, 0.0, 1.0)
        fv = np.clip(v - i0, 0.0, 1.0)
        h = self.heights
        dzdx = ((1 - fv) * (h[i0, j0 + 1] - h[i0, j0])
                + fv * (h[i0 + 1, j0 + 1] - h[i0 + 1, j0])) / self.cell
        dzdy = ((1 - fu) * (h[i0 + 1, j0] - h[i0, j0])
                + fu * (h[i0 + 1, j0 + 1] - h[i0, j0 + 1])) / self.cell
        return np.where(inside, dzdx, 0.0), np.where(inside, dzdy, 0.0)
