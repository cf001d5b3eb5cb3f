"""Gaussian kernel estimates of first-order intensity with uniform edge correction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import GridSpec, PointPattern

_CHUNK = 2_000_000


@dataclass(frozen=True)
class IntensityField:
    """Per-cell intensity (events per km^2) on a grid.

    ``point_values`` optionally carries intensities at the data points, as used
    by the inhomogeneous K statistics.
    """

    grid: GridSpec
    values: np.ndarray
    point_values: Optional[np.ndarray] = None
    bandwidth: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v[self.grid.mask])) or np.any(v[self.grid.mask] < 0):
            raise ValueError("intensity must be finite and non-negative on masked cells")
        object.__setattr__(self, "values", v)

    def at(self, pts) -> np.ndarray:
        """Value of the cell holding each point."""
        iy, ix = self.grid.cell_index(pts)
        return self.values[iy, ix]

    def integral(self) -> float:
        return float(self.values[self.grid.mask].sum() * self.grid.cell_area)

    def scaled(self, c: float) -> "IntensityField":
        pv = None if self.point_values is None else self.point_values * c
        return IntensityField(self.grid, self.values * c, pv, self.bandwidth)


def gaussian_kernel(d2, h: float):
    """Isotropic 2-D Gaussian density at squared distance d2."""
    return np.exp(-0.5 * np.asarray(d2) / h ** 2) / (2 * math.pi * h ** 2)


def _kernel_sums(targets: np.ndarray, sources: np.ndarray, h: float, weights=None) -> np.ndarray:
    out = np.zeros(len(targets))
    if len(sources) == 0:
        return out
    step = max(1, _CHUNK // max(1, len(sources)))
    for i in range(0, len(targets), step):
        t = targets[i:i + step]
        d2 = ((t[:, None, :] - sources[None, :, :]) ** 2).sum(-1)
        k = gaussian_kernel(d2, h)
        out[i:i + step] = k.sum(1) if weights is None else k @ weights
    return out


def edge_mass(pts, grid: GridSpec, h: float) -> np.ndarray:
    """Kernel mass inside the window, E(u) = int_W k_h(u - v) dv, by a cell-centre sum."""
    cells = grid.centers()[grid.mask]
    return _kernel_sums(np.atleast_2d(pts), cells, h) * grid.cell_area


def leave_one_out(points: np.ndarray, h: float, grid: GridSpec) -> np.ndarray:
    """Edge-corrected leave-one-out intensity at each data point."""
    n = len(points)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    k = gaussian_kernel(d2, h)
    np.fill_diagonal(k, 0.0)
    return k.sum(1) / edge_mass(points, grid, h)


def kernel_intensity(pp: PointPattern, bandwidth: float, grid: GridSpec) -> IntensityField:
    """Lambda(u) = sum_i k_h(u - y_i) / E(u) on masked cells, plus leave-one-out point values."""
    pp.require_simple()
    if pp.n < 2:
        raise ValueError("kernel intensity needs at least 2 points")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    cells = grid.centers()[grid.mask]
    num = _kernel_sums(cells, pp.points, bandwidth)
    den = edge_mass(cells, grid, bandwidth)
    values = np.zeros(grid.shape)
    values[grid.mask] = num / den
    return IntensityField(grid, values, leave_one_out(pp.points, bandwidth, grid), bandwidth)


def default_bandwidth(pp: PointPattern) -> float:
    """Rule-of-thumb 0.9 min(sd, IQR/1.34) n^(-1/5) per axis, geometric mean of the axes."""
    if pp.n < 2:
        raise ValueError("bandwidth rule needs at least 2 points")
    hs = []
    for axis in (0, 1):
        x = pp.points[:, axis]
        sd = float(np.std(x, ddof=1))
        q75, q25 = np.percentile(x, [75, 25])
        iqr = float(q75 - q25)
        spread = min(sd, iqr / 1.34) if iqr > 0 else sd
        if not spread > 0:
            raise ValueError("degenerate pattern: zero spread along an axis")
        hs.append(0.9 * spread * pp.n ** -0.2)
    return math.sqrt(hs[0] * hs[1])
