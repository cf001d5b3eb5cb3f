"""Observation windows, regular grids and point patterns.

All coordinates are planar kilometres. Longitude/latitude input goes through
:class:`Projection` before it reaches anything in here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088


def _shoelace(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


@dataclass(frozen=True)
class Window:
    """Polygonal observation window.

    The first ring is the outer boundary, the remaining rings are holes.
    Self-intersections are not detected.
    """

    rings: tuple

    def __post_init__(self):
        rings = []
        for r in self.rings:
            r = np.asarray(r, dtype=float)
            if r.ndim != 2 or r.shape[1] != 2:
                raise ValueError("ring must be an (m, 2) array of vertices")
            if not np.array_equal(r[0], r[-1]):
                r = np.vstack([r, r[:1]])
            if len(r) < 4:
                raise ValueError("ring needs at least 3 distinct vertices")
            r.setflags(write=False)
            rings.append(r)
        if not rings:
            raise ValueError("window needs at least one ring")
        object.__setattr__(self, "rings", tuple(rings))
        if self.area <= 0:
            raise ValueError("window area must be positive")

    @classmethod
    def box(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "Window":
        return cls(([(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax), (xmin, ymin)],))

    @property
    def area(self) -> float:
        outer = abs(_shoelace(self.rings[0]))
        holes = sum(abs(_shoelace(r)) for r in self.rings[1:])
        return outer - holes

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end vertices of every boundary edge, each (E, 2)."""
        a = np.vstack([r[:-1] for r in self.rings])
        b = np.vstack([r[1:] for r in self.rings])
        return a, b

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        r = self.rings[0]
        return float(r[:, 0].min()), float(r[:, 1].min()), float(r[:, 0].max()), float(r[:, 1].max())

    @property
    def centroid(self) -> tuple[float, float]:
        r = self.rings[0]
        x, y = r[:, 0], r[:, 1]
        cross = x[:-1] * y[1:] - x[1:] * y[:-1]
        a = 0.5 * cross.sum()
        cx = ((x[:-1] + x[1:]) * cross).sum() / (6 * a)
        cy = ((y[:-1] + y[1:]) * cross).sum() / (6 * a)
        return float(cx), float(cy)

    def contains(self, pts) -> np.ndarray:
        """Even-odd membership for an (n, 2) array; boundary points count as inside."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        px = pts[:, 0][:, None]
        py = pts[:, 1][:, None]
        a, b = self.edges
        ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
        straddle = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside = np.count_nonzero(straddle & (px < xcross), axis=1) % 2 == 1
        return inside | self.on_boundary(pts)

    def on_boundary(self, pts, tol: float = 1e-12) -> np.ndarray:
        return self.boundary_distance(pts) <= tol * max(1.0, self._scale)

    @property
    def _scale(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return max(x1 - x0, y1 - y0)

    def boundary_distance(self, pts) -> np.ndarray:
        """Euclidean distance from each point to the nearest boundary edge."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        a, b = self.edges
        d = b - a
        len2 = np.einsum("ij,ij->i", d, d)
        rel = pts[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("nej,ej->ne", rel, d) / len2, 0.0, 1.0)
        proj = a[None] + t[..., None] * d[None]
        return np.sqrt(((pts[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)

    def to_geojson(self) -> dict:
        return {"type": "Polygon", "coordinates": [r.tolist() for r in self.rings]}


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection about a reference point (lon0, lat0).

    With ``planar=True`` the mapping is the identity, which is what simulated
    study domains such as [0, 10]^2 use.
    """

    lon0: float = 0.0
    lat0: float = 0.0
    planar: bool = False

    def forward(self, lon, lat) -> np.ndarray:
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        if self.planar:
            return np.column_stack([lon, lat])
        k = math.pi / 180 * EARTH_RADIUS_KM
        x = (lon - self.lon0) * k * math.cos(math.radians(self.lat0))
        y = (lat - self.lat0) * k
        return np.column_stack([x, y])

    def inverse(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        if self.planar:
            return xy[:, 0].copy(), xy[:, 1].copy()
        k = math.pi / 180 * EARTH_RADIUS_KM
        lon = self.lon0 + xy[:, 0] / (k * math.cos(math.radians(self.lat0)))
        lat = self.lat0 + xy[:, 1] / k
        return lon, lat

    def to_dict(self) -> dict:
        return {"lon0": self.lon0, "lat0": self.lat0, "planar": self.planar}


def _geojson_rings(obj: dict) -> list:
    if obj.get("type") == "FeatureCollection":
        obj = obj["features"][0]
    if obj.get("type") == "Feature":
        obj = obj["geometry"]
    kind = obj.get("type")
    if kind == "Polygon":
        return list(obj["coordinates"])
    if kind == "MultiPolygon":
        # every polygon's rings join the even-odd ring set
        return [ring for poly in obj["coordinates"] for ring in poly]
    raise ValueError(f"unsupported GeoJSON geometry type {kind!r}")


def load_window(path, planar: bool = False) -> tuple[Window, Projection]:
    """Read a GeoJSON Polygon/MultiPolygon window.

    Lon/lat rings are projected about the outer ring's centroid; with
    ``planar=True`` coordinates are taken as kilometres already.
    """
    obj = json.loads(Path(path).read_text())
    rings = [np.asarray(r, dtype=float) for r in _geojson_rings(obj)]
    if planar:
        proj = Projection(planar=True)
    else:
        lonlat = Window((rings[0],))
        lon0, lat0 = lonlat.centroid
        proj = Projection(lon0, lat0)
    return Window(tuple(proj.forward(r[:, 0], r[:, 1]) for r in rings)), proj


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of ``ny`` rows by ``nx`` columns anchored at ``origin``.

    Arrays on the grid have shape (ny, nx); flat cell index is ``iy * nx + ix``.
    ``mask`` marks cells whose centre lies in the window.
    """

    x0: float
    y0: float
    dx: float
    dy: float
    nx: int
    ny: int
    mask: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        mask = np.ones((self.ny, self.nx), bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (self.ny, self.nx):
            raise ValueError(f"mask shape {mask.shape} does not match grid ({self.ny}, {self.nx})")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def for_window(cls, window: Window, nx: int, ny: Optional[int] = None) -> "GridSpec":
        """Cover the window's bounding box with an nx-by-ny grid."""
        ny = nx if ny is None else ny
        x0, y0, x1, y1 = window.bounds
        g = cls(x0, y0, (x1 - x0) / nx, (y1 - y0) / ny, nx, ny)
        return g.with_mask(window.contains(g.centers().reshape(-1, 2)).reshape(ny, nx))

    @classmethod
    def with_cell_size(cls, window: Window, cell: float) -> "GridSpec":
        x0, y0, x1, y1 = window.bounds
        nx = max(1, math.ceil((x1 - x0) / cell - 1e-9))
        ny = max(1, math.ceil((y1 - y0) / cell - 1e-9))
        g = cls(x0, y0, cell, cell, nx, ny)
        return g.with_mask(window.contains(g.centers().reshape(-1, 2)).reshape(ny, nx))

    def with_mask(self, mask) -> "GridSpec":
        return replace(self, mask=np.asarray(mask, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.x0 + self.nx * self.dx, self.y0 + self.ny * self.dy

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def centers(self) -> np.ndarray:
        """Cell centres as an (ny, nx, 2) array."""
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.dy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def cell_index(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """(iy, ix) of the cell holding each point.

        Points on an interior cell edge go to the cell with the larger index;
        points on the outer right/top edge go to the last cell.
        Raises ValueError for points outside the grid extent.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float)).reshape(-1, 2)
        ix = _edge_index((pts[:, 0] - self.x0) / self.dx)
        iy = _edge_index((pts[:, 1] - self.y0) / self.dy)
        bad = (ix < 0) | (ix > self.nx) | (iy < 0) | (iy > self.ny)
        bad |= ((ix == self.nx) & ~_on_edge((pts[:, 0] - self.x0) / self.dx, self.nx))
        bad |= ((iy == self.ny) & ~_on_edge((pts[:, 1] - self.y0) / self.dy, self.ny))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"point {pts[i].tolist()} lies outside the grid extent {self.extent}")
        return np.minimum(iy, self.ny - 1), np.minimum(ix, self.nx - 1)

    def compatible(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return (
            self.shape == other.shape
            and all(abs(a - b) <= tol * max(1.0, abs(a)) for a, b in
                    [(self.x0, other.x0), (self.y0, other.y0), (self.dx, other.dx), (self.dy, other.dy)])
        )

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "dx": self.dx, "dy": self.dy, "nx": self.nx, "ny": self.ny}


def _edge_index(q: np.ndarray) -> np.ndarray:
    r = np.round(q)
    snapped = np.where(np.abs(q - r) < 1e-9, r, np.floor(q))
    return snapped.astype(np.int64)


def _on_edge(q: np.ndarray, n: int) -> np.ndarray:
    return np.abs(q - n) < 1e-9


@dataclass(frozen=True)
class PointPattern:
    """Event locations (km) in a window, with optional marks and specificity codes."""

    points: np.ndarray
    window: Window
    marks: Optional[np.ndarray] = None
    specificity: Optional[np.ndarray] = None
    simple: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name in ("marks", "specificity"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v).copy()
                if len(v) != len(pts):
                    raise ValueError(f"{name} length {len(v)} does not match {len(pts)} points")
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointPattern":
        idx = np.asarray(idx)
        return PointPattern(
            self.points[idx],
            self.window,
            None if self.marks is None else self.marks[idx],
            None if self.specificity is None else self.specificity[idx],
            self.simple,
        )

    def is_simple(self) -> bool:
        if self.n < 2:
            return True
        return len(np.unique(self.points, axis=0)) == self.n

    def as_simple(self) -> "PointPattern":
        """Flag as simple after verifying all locations are distinct."""
        if not self.is_simple():
            raise ValueError("pattern has duplicated locations; deduplicate or jitter first")
        return replace(self, simple=True)

    def require_simple(self):
        if not self.simple and not self.is_simple():
            raise ValueError("operation needs a simple pattern (distinct locations)")


def point_in_window(p: Sequence[float], w: Window) -> bool:
    return bool(w.contains(np.asarray(p, dtype=float)[None, :])[0])


def pairwise_distances(pp) -> np.ndarray:
    pts = pp.points if isinstance(pp, PointPattern) else np.asarray(pp, dtype=float)
    if len(pts) == 0:
        raise ValueError("pattern is empty")
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def count_in_region(pp: PointPattern, region: Window) -> int:
    if pp.n == 0:
        return 0
    return int(region.contains(pp.points).sum())


def bin_to_grid(pp, grid: GridSpec) -> np.ndarray:
    """Per-cell event counts, shape (ny, nx)."""
    pts = pp.points if isinstance(pp, PointPattern) else np.asarray(pp, dtype=float).reshape(-1, 2)
    counts = np.zeros(grid.shape, dtype=np.int64)
    if len(pts) == 0:
        return counts
    iy, ix = grid.cell_index(pts)
    np.add.at(counts, (iy, ix), 1)
    return counts
