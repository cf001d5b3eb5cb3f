"""Covariate rasters, standardization, resolution aggregation, design matrices,
and event-table preparation (filters, deduplication, jittering).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .geom import GridSpec, PointPattern, Projection, Window

ASCII_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class EventFormatError(ValueError):
    """Malformed row in an events CSV."""


# ---------------------------------------------------------------- rasters

@dataclass(frozen=True)
class AsciiGrid:
    """ESRI ASCII raster. ``values`` is stored bottom row first, NaN for NODATA."""

    xll: float
    yll: float
    dx: float
    dy: float
    values: np.ndarray
    nodata: float = -9999.0

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def sample(self, x, y) -> np.ndarray:
        """Nearest-cell lookup; NaN outside the raster or on NODATA."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ix = np.floor((x - self.xll) / self.dx).astype(np.int64)
        iy = np.floor((y - self.yll) / self.dy).astype(np.int64)
        ok = (ix >= 0) & (ix < self.ncols) & (iy >= 0) & (iy < self.nrows)
        out = np.full(x.shape, np.nan)
        out[ok] = self.values[iy[ok], ix[ok]]
        return out


def read_ascii_grid(path) -> AsciiGrid:
    header: dict = {}
    with open(path) as fh:
        lines = fh.read().split("\n")
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in ASCII_KEYS or key in ("dx", "dy", "xllcenter", "yllcenter"):
            header[key] = float(parts[1])
            i += 1
        else:
            break
    for k in ("ncols", "nrows"):
        if k not in header:
            raise ValueError(f"{path}: ASCII grid header missing {k}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    dx = header.get("dx", header.get("cellsize"))
    dy = header.get("dy", header.get("cellsize"))
    if dx is None or dy is None:
        raise ValueError(f"{path}: ASCII grid header missing cellsize")
    if "xllcorner" in header:
        xll = header["xllcorner"]
    elif "xllcenter" in header:
        xll = header["xllcenter"] - dx / 2
    else:
        raise ValueError(f"{path}: ASCII grid header missing xllcorner")
    if "yllcorner" in header:
        yll = header["yllcorner"]
    elif "yllcenter" in header:
        yll = header["yllcenter"] - dy / 2
    else:
        raise ValueError(f"{path}: ASCII grid header missing yllcorner")
    nodata = header.get("nodata_value", -9999.0)
    data = np.array(" ".join(lines[i:]).split(), dtype=float)
    if data.size != ncols * nrows:
        raise ValueError(f"{path}: expected {ncols * nrows} values, found {data.size}")
    vals = data.reshape(nrows, ncols)[::-1].copy()
    vals[vals == nodata] = np.nan
    return AsciiGrid(xll, yll, dx, dy, vals, nodata)


def write_ascii_grid(path, grid: GridSpec, values, nodata: float = -9999.0, masked: bool = True):
    """Write grid values (shape (ny, nx), bottom row first); unmasked cells become NODATA."""
    v = np.array(values, dtype=float)
    if v.shape != grid.shape:
        raise ValueError(f"values shape {v.shape} does not match grid {grid.shape}")
    if masked:
        v[~grid.mask] = np.nan
    v[~np.isfinite(v)] = nodata
    lines = [f"ncols {grid.nx}", f"nrows {grid.ny}",
             f"xllcorner {grid.x0!r}", f"yllcorner {grid.y0!r}"]
    if math.isclose(grid.dx, grid.dy, rel_tol=1e-12):
        lines.append(f"cellsize {grid.dx!r}")
    else:
        lines += [f"dx {grid.dx!r}", f"dy {grid.dy!r}"]
    lines.append(f"NODATA_value {nodata:g}")
    for row in v[::-1]:
        lines.append(" ".join(f"{x:.10g}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- covariates

@dataclass(frozen=True)
class CovariateStack:
    grid: GridSpec
    layers: Mapping[str, np.ndarray]
    standardization: Mapping[str, tuple] = field(default_factory=dict)
    log_layers: frozenset = frozenset()

    def __post_init__(self):
        layers = {}
        for name, v in self.layers.items():
            v = np.array(v, dtype=float)
            if v.shape != self.grid.shape:
                raise ValueError(f"layer {name!r} has shape {v.shape}, grid is {self.grid.shape}")
            v.setflags(write=False)
            layers[name] = v
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "standardization", dict(self.standardization))

    @property
    def names(self) -> list[str]:
        return list(self.layers)

    @property
    def p(self) -> int:
        return len(self.layers)

    def masked(self, name: str) -> np.ndarray:
        return self.layers[name][self.grid.mask]

    def with_layer(self, name: str, values, log: bool = False) -> "CovariateStack":
        layers = dict(self.layers)
        layers[name] = values
        logs = self.log_layers | {name} if log else self.log_layers - {name}
        return replace(self, layers=layers, log_layers=frozenset(logs))

    def select(self, names) -> "CovariateStack":
        return replace(self, layers={n: self.layers[n] for n in names},
                       standardization={n: s for n, s in self.standardization.items() if n in names},
                       log_layers=frozenset(n for n in self.log_layers if n in names))


def raster_layer(raster: AsciiGrid, grid: GridSpec, projection: Projection, log: bool = False):
    """Sample a lon/lat raster at every grid-cell centroid."""
    c = grid.centers().reshape(-1, 2)
    lon, lat = projection.inverse(c)
    v = raster.sample(lon, lat).reshape(grid.shape)
    if log:
        # log(x + 1) so zero-population cells stay finite
        v = np.log1p(np.clip(v, 0.0, None))
    return v


def coordinate_layers(grid: GridSpec) -> dict:
    c = grid.centers()
    return {"lon": c[..., 0].copy(), "lat": c[..., 1].copy()}


def load_cities(path, projection: Projection) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"name", "lon", "lat"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: city CSV missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((float(row["lon"]), float(row["lat"])))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line}: bad city coordinates") from None
    if not rows:
        raise ValueError(f"{path}: no cities")
    arr = np.array(rows)
    return projection.forward(arr[:, 0], arr[:, 1])


def distance_layer(grid: GridSpec, sites: np.ndarray) -> np.ndarray:
    """Distance (km) from each cell centroid to the nearest site."""
    c = grid.centers().reshape(-1, 2)
    d = np.sqrt(((c[:, None, :] - sites[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return d.reshape(grid.shape)


def restrict_mask(stack: CovariateStack) -> CovariateStack:
    """Drop cells where any layer is missing."""
    ok = stack.grid.mask.copy()
    for v in stack.layers.values():
        ok &= np.isfinite(v)
    return replace(stack, grid=stack.grid.with_mask(ok))


def standardize(stack: CovariateStack) -> CovariateStack:
    """x -> (x - mean) / (2 sd) over masked cells, per layer."""
    mask = stack.grid.mask
    layers, info = {}, dict(stack.standardization)
    for name, v in stack.layers.items():
        x = v[mask]
        mean = float(x.mean())
        sd = float(x.std())
        if not sd > 1e-12 * max(1.0, abs(mean)):
            raise ValueError(f"layer {name!r} is constant over the window; cannot standardize")
        layers[name] = (v - mean) / (2 * sd)
        if name in info:
            # compose with the earlier transform so raw values stay recoverable
            m0, s0 = info[name]
            info[name] = (m0 + 2 * s0 * mean, 2 * s0 * sd)
        else:
            info[name] = (mean, sd)
    return replace(stack, layers=layers, standardization=info)


def unstandardized(stack: CovariateStack, name: str) -> np.ndarray:
    v = stack.layers[name]
    if name in stack.standardization:
        mean, sd = stack.standardization[name]
        return v * 2 * sd + mean
    return v


def _nesting(fine: GridSpec, coarse: GridSpec) -> tuple[int, int, int, int]:
    def ratio(a, b):
        q = a / b
        r = round(q)
        if abs(q - r) > 1e-9 * max(1.0, abs(q)):
            raise ValueError("coarse grid does not nest the fine grid")
        return int(r)

    kx, ky = ratio(coarse.dx, fine.dx), ratio(coarse.dy, fine.dy)
    ox, oy = ratio(fine.x0 - coarse.x0, fine.dx), ratio(fine.y0 - coarse.y0, fine.dy)
    if kx < 1 or ky < 1 or ox < 0 or oy < 0 or ox + fine.nx > coarse.nx * kx or oy + fine.ny > coarse.ny * ky:
        raise ValueError("coarse grid does not nest the fine grid")
    return kx, ky, ox, oy


def _coarse_index(fine: GridSpec, coarse: GridSpec):
    kx, ky, ox, oy = _nesting(fine, coarse)
    cx = (np.arange(fine.nx) + ox) // kx
    cy = (np.arange(fine.ny) + oy) // ky
    return np.meshgrid(cx, cy)[::-1]


def aggregate(stack: CovariateStack, coarse: GridSpec) -> CovariateStack:
    """Area-weighted mean of masked fine cells within each coarse cell.

    Log-flagged layers are averaged on the raw scale and re-logged. The result's
    grid mask marks coarse cells covering at least one masked fine cell.
    """
    fine = stack.grid
    cy, cx = _coarse_index(fine, coarse)
    m = fine.mask
    count = np.zeros(coarse.shape)
    np.add.at(count, (cy[m], cx[m]), 1.0)
    cmask = count > 0
    layers = {}
    for name, v in stack.layers.items():
        raw = v
        if name in stack.log_layers:
            raw = np.expm1(unstandardized(stack, name))
        total = np.zeros(coarse.shape)
        np.add.at(total, (cy[m], cx[m]), raw[m])
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(cmask, total / np.where(cmask, count, 1), np.nan)
        if name in stack.log_layers:
            mean = np.log1p(mean)
            if name in stack.standardization:
                m0, s0 = stack.standardization[name]
                mean = (mean - m0) / (2 * s0)
        layers[name] = mean
    return CovariateStack(coarse.with_mask(cmask), layers, stack.standardization, stack.log_layers)


def disaggregate(stack: CovariateStack, fine: GridSpec) -> CovariateStack:
    """Broadcast coarse-cell values back onto a nested fine grid (piecewise constant)."""
    cy, cx = _coarse_index(fine, stack.grid)
    layers = {name: v[cy, cx] for name, v in stack.layers.items()}
    return CovariateStack(fine, layers, stack.standardization, stack.log_layers)


def interaction_layer(stack: CovariateStack, a: str, b: str, name: Optional[str] = None) -> CovariateStack:
    for n in (a, b):
        if n not in stack.layers:
            raise KeyError(f"no layer named {n!r}")
    return stack.with_layer(name or f"{a}*{b}", stack.layers[a] * stack.layers[b])


def design_matrix(stack: CovariateStack) -> np.ndarray:
    """Rows [1, V_1..V_p] for masked cells in flat cell order."""
    m = stack.grid.mask
    cols = [np.ones(int(m.sum()))] + [v[m] for v in stack.layers.values()]
    return np.column_stack(cols)


# ---------------------------------------------------------------- events

@dataclass(frozen=True)
class EventTable:
    ids: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    group: np.ndarray
    specificity: np.ndarray

    def __len__(self) -> int:
        return len(self.lon)

    def take(self, idx) -> "EventTable":
        return EventTable(self.ids[idx], self.lon[idx], self.lat[idx], self.group[idx], self.specificity[idx])

    def to_pattern(self, window: Window, projection: Projection) -> PointPattern:
        pts = projection.forward(self.lon, self.lat) if len(self) else np.empty((0, 2))
        return PointPattern(pts, window, marks=self.group, specificity=self.specificity)


def load_events(path, window: Window, projection: Projection) -> tuple[EventTable, int]:
    """Read an events CSV; returns the table of in-window rows and the dropped count."""
    ids, lon, lat, group, spec = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"lon", "lat", "group", "specificity"} - set(reader.fieldnames or ())
        if missing:
            raise EventFormatError(f"{path}: header missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                x, y = float(row["lon"]), float(row["lat"])
                s = int(row["specificity"])
            except (TypeError, ValueError):
                raise EventFormatError(f"{path}:{line}: malformed lon/lat/specificity") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise EventFormatError(f"{path}:{line}: non-finite coordinates")
            if s not in (1, 2, 3, 4, 5):
                raise EventFormatError(f"{path}:{line}: specificity {s} not in 1..5")
            ids.append(row.get("id") or str(line - 1))
            lon.append(x)
            lat.append(y)
            group.append(row["group"] or "")
            spec.append(s)
    t = EventTable(np.array(ids, dtype=object), np.array(lon, dtype=float), np.array(lat, dtype=float),
                   np.array(group, dtype=object), np.array(spec, dtype=np.int64))
    if len(t) == 0:
        return t, 0
    keep = window.contains(projection.forward(t.lon, t.lat))
    return t.take(np.flatnonzero(keep)), int((~keep).sum())


def write_events(path, table: EventTable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lon", "lat", "group", "specificity"])
        for row in zip(table.ids, table.lon, table.lat, table.group, table.specificity):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3], int(row[4])])


def pattern_table(pp: PointPattern, projection: Projection, group=None) -> EventTable:
    lon, lat = projection.inverse(pp.points) if pp.n else (np.empty(0), np.empty(0))
    n = pp.n
    g = np.array([group] * n, dtype=object) if group is not None else (
        pp.marks if pp.marks is not None else np.array([""] * n, dtype=object))
    s = pp.specificity if pp.specificity is not None else np.ones(n, dtype=np.int64)
    return EventTable(np.array([str(i + 1) for i in range(n)], dtype=object), lon, lat,
                      np.asarray(g, dtype=object), np.asarray(s, dtype=np.int64))


def filter_events(t: EventTable, group=None, specificity: Optional[Callable] = None) -> EventTable:
    """Order-preserving subset by group label and/or a predicate on specificity codes."""
    keep = np.ones(len(t), bool)
    if group is not None:
        groups = {group} if isinstance(group, str) else set(group)
        keep &= np.array([g in groups for g in t.group], dtype=bool)
    if specificity is not None:
        keep &= np.array([bool(specificity(int(s))) for s in t.specificity], dtype=bool)
    return t.take(np.flatnonzero(keep))


def specificity_predicate(op: str, value: int) -> Callable[[int], bool]:
    ops = {"eq": lambda s: s == value, "gt": lambda s: s > value, "ge": lambda s: s >= value,
           "lt": lambda s: s < value, "le": lambda s: s <= value, "ne": lambda s: s != value}
    if op not in ops:
        raise ValueError(f"unknown specificity operator {op!r}; use one of {sorted(ops)}")
    return ops[op]


def deduplicate(pp: PointPattern) -> tuple[PointPattern, int]:
    """Keep the first occurrence of each exact location."""
    if pp.n == 0:
        return replace(pp, simple=True), 0
    _, first = np.unique(pp.points, axis=0, return_index=True)
    keep = np.sort(first)
    out = pp.subset(keep)
    return replace(out, simple=True), pp.n - len(keep)


def jitter(pp: PointPattern, sd: float, seed, projection: Optional[Projection] = None) -> PointPattern:
    """Add N(0, sd^2) noise in degrees to lon and lat, then re-project.

    Redraws any point that still coincides with another one.
    """
    if not sd > 0:
        raise ValueError("jitter sd must be positive")
    projection = projection or Projection(planar=True)
    rng = np.random.default_rng(seed)
    if pp.n == 0:
        return replace(pp, simple=True)
    lon, lat = projection.inverse(pp.points)
    noise = rng.normal(0.0, sd, size=(pp.n, 2))
    pts = projection.forward(lon + noise[:, 0], lat + noise[:, 1])
    while len(np.unique(pts, axis=0)) < len(pts):
        _, first = np.unique(pts, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(len(pts)), first)
        noise[dup] = rng.normal(0.0, sd, size=(len(dup), 2))
        pts = projection.forward(lon + noise[:, 0], lat + noise[:, 1])
    return replace(pp, points=pts, simple=True)
