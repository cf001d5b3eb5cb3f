"""Inhomogeneous K and cross-K functions, Ripley's isotropic edge correction,
Monte-Carlo envelopes and the maximum-deviation CSR test.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._parallel import pmap
from .geom import PointPattern, Window
from .kernel import IntensityField, default_bandwidth, kernel_intensity, leave_one_out
from .sim import simulate_poisson

TWO_PI = 2 * math.pi
_CHUNK = 4_000_000


def circle_fraction(centers, radii, window: Window) -> np.ndarray:
    """Fraction of each circle's circumference lying inside ``window``.

    Exact: every crossing angle of the circle with the boundary edges is found,
    and in/out alternates between consecutive crossings around the circle.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),)).copy()
    out = np.ones(len(centers))
    # circles that cannot reach the boundary are fully inside
    need = radii > window.boundary_distance(centers) if len(centers) else np.zeros(0, bool)
    idx = np.flatnonzero(need)
    a, b = window.edges
    step = max(1, _CHUNK // (8 * len(a)))
    for i in range(0, len(idx), step):
        k = idx[i:i + step]
        out[k] = _fraction_exact(centers[k], radii[k], window, a, b)
    return out


def _fraction_exact(s, r, window, a, b):
    d = b - a                                        # (E, 2)
    f = a[None, :, :] - s[:, None, :]                # (P, E, 2)
    A = np.einsum("ej,ej->e", d, d)[None, :]
    B = 2 * np.einsum("pej,ej->pe", f, d)
    C = np.einsum("pej,pej->pe", f, f) - (r ** 2)[:, None]
    disc = B * B - 4 * A * C
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    angles = []
    for sgn in (-1.0, 1.0):
        t = (-B + sgn * sq) / (2 * A)
        valid = ok & (t >= 0) & (t < 1)
        px = f[..., 0] + t * d[None, :, 0]
        py = f[..., 1] + t * d[None, :, 1]
        th = np.mod(np.arctan2(py, px), TWO_PI)
        angles.append(np.where(valid, th, np.nan))
    th = np.sort(np.concatenate(angles, axis=1), axis=1)    # NaNs sort last
    th = np.where(np.isnan(th), TWO_PI, th)
    P = len(s)
    bounds = np.concatenate([np.zeros((P, 1)), th, np.full((P, 1), TWO_PI)], axis=1)
    seg = np.diff(bounds, axis=1)
    # probe the middle of the longest arc, away from any crossing
    j = np.argmax(seg, axis=1)
    rows = np.arange(P)
    mid = 0.5 * (bounds[rows, j] + bounds[rows, j + 1])
    probe = s + r[:, None] * np.column_stack([np.cos(mid), np.sin(mid)])
    probe_in = window.contains(probe)
    parity = (np.arange(seg.shape[1])[None, :] - j[:, None]) % 2 == 0
    state = np.where(probe_in[:, None], parity, ~parity)
    return (seg * state).sum(1) / TWO_PI


def isotropic_correction(s, u, w: Window) -> float:
    """Ripley's isotropic weight 1 / (|D| g), g the in-window share of the circle
    centred at ``s`` through ``u``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    r = float(np.hypot(*(u - s)))
    if r == 0:
        raise ValueError("isotropic correction undefined for coincident points")
    g = float(circle_fraction(s[None, :], np.array([r]), w)[0])
    return 1.0 / (w.area * g)


@dataclass
class KResult:
    radii: np.ndarray
    khat: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    n_sim: int = 0
    kind: str = "univariate"
    level: float = 0.95
    sims: Optional[np.ndarray] = field(default=None, repr=False)
    statistic: Optional[float] = None
    p_value: Optional[float] = None

    def to_csv(self, path):
        cols = {"r": self.radii, "khat": self.khat, "mean": self.mean, "lo": self.lo, "hi": self.hi}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for i in range(len(self.radii)):
                w.writerow(["" if v is None else f"{v[i]:.10g}" for v in cols.values()])

    @classmethod
    def from_csv(cls, path, kind: str = "univariate") -> "KResult":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))

        def col(name):
            vals = [r[name] for r in rows]
            return None if all(v == "" for v in vals) else np.array(vals, dtype=float)

        return cls(col("r"), col("khat"), col("mean"), col("lo"), col("hi"), kind=kind)

    def departure(self) -> np.ndarray:
        """-1 below envelope, +1 above, 0 inside, per radius."""
        out = np.zeros(len(self.radii), dtype=int)
        out[self.khat > self.hi] = 1
        out[self.khat < self.lo] = -1
        return out


def default_radii(window: Window, m: int = 64) -> np.ndarray:
    """m equally spaced radii from 0 to a quarter of the window's shorter side."""
    x0, y0, x1, y1 = window.bounds
    return np.linspace(0.0, 0.25 * min(x1 - x0, y1 - y0), m)


def _pair_curve(d, w, radii):
    """sum of w over pairs with d <= r, for each r."""
    if len(d) == 0:
        return np.zeros(len(radii))
    order = np.argsort(d, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    return cum[np.searchsorted(d[order], radii, side="right")]


def _weighted_pairs(p1, p2, lam1, lam2, window, rmax, exclude_self):
    diff = p1[:, None, :] - p2[None, :, :]
    d = np.sqrt((diff ** 2).sum(-1))
    keep = (d > 0) & (d <= rmax)
    if exclude_self and p1 is p2:
        np.fill_diagonal(keep, False)
    i, j = np.nonzero(keep)
    dij = d[i, j]
    g = circle_fraction(p1[i], dij, window)
    w = 1.0 / (window.area * g * lam1[i] * lam2[j])
    return dij, w


def _check_intensity(lam, n, what):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (n,):
        raise ValueError(f"{what}: need one intensity value per point ({n}), got shape {lam.shape}")
    if np.any(~(lam > 0)):
        raise ValueError(f"{what}: intensity values must be positive")
    return lam


def k_inhom(pp: PointPattern, intensity, radii, window: Optional[Window] = None) -> np.ndarray:
    """Inhomogeneous K estimate sum_{s != u} c(s,u) 1{0 < |s-u| <= r} / (lam(s) lam(u))."""
    radii = np.asarray(radii, dtype=float)
    window = window or pp.window
    if pp.n < 2:
        return np.zeros(len(radii))
    pp.require_simple()
    lam = _check_intensity(intensity, pp.n, "k_inhom")
    d, w = _weighted_pairs(pp.points, pp.points, lam, lam, window, radii.max(), True)
    return _pair_curve(d, w, radii)


def cross_k_inhom(pp1: PointPattern, pp2: PointPattern, lam1, lam2, radii,
                  window: Optional[Window] = None) -> np.ndarray:
    """Inhomogeneous cross-K over ordered pairs (s in pp1, u in pp2)."""
    radii = np.asarray(radii, dtype=float)
    window = window or pp1.window
    if pp1.n == 0 or pp2.n == 0:
        return np.zeros(len(radii))
    l1 = _check_intensity(lam1, pp1.n, "cross_k_inhom")
    l2 = _check_intensity(lam2, pp2.n, "cross_k_inhom")
    d, w = _weighted_pairs(pp1.points, pp2.points, l1, l2, window, radii.max(), False)
    return _pair_curve(d, w, radii)


# ---------------------------------------------------------------- envelopes

def point_intensity(pp: PointPattern, field: IntensityField, estimator: str = "kernel",
                    bandwidth: Optional[float] = None) -> np.ndarray:
    """Intensity at the data points used when computing K for ``pp``.

    ``kernel``: leave-one-out kernel re-estimate; ``homogeneous``: n / |D|;
    ``field``: the given field's cell values.
    """
    if estimator == "homogeneous":
        return np.full(pp.n, pp.n / pp.window.area)
    if estimator == "field":
        return field.at(pp.points)
    if estimator == "kernel":
        h = bandwidth or field.bandwidth or default_bandwidth(pp)
        return leave_one_out(pp.points, h, field.grid)
    raise ValueError(f"unknown intensity estimator {estimator!r}")


def _quantile_band(curves: np.ndarray, level: float):
    a = (1 - level) / 2
    lo = np.quantile(curves, a, axis=0, method="lower")
    hi = np.quantile(curves, 1 - a, axis=0, method="higher")
    return lo, hi


def _children(seed, n):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


def _check_envelope_args(n_sim, level):
    if n_sim < 2:
        raise ValueError("need at least 2 simulations for an envelope")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")


def poisson_envelope(intensity: IntensityField, n_sim: int, radii, level: float = 0.95, seed=0,
                     window: Optional[Window] = None, estimator: str = "kernel",
                     bandwidth: Optional[float] = None) -> KResult:
    """Pointwise envelope of K over inhomogeneous Poisson patterns drawn from ``intensity``.

    Each simulated pattern's K uses its own re-estimated intensity.
    """
    _check_envelope_args(n_sim, level)
    radii = np.asarray(radii, dtype=float)
    window = window or Window.box(*intensity.grid.extent)

    def one(child):
        pp = simulate_poisson(intensity, np.random.default_rng(child), window)
        if pp.n < 2:
            return np.zeros(len(radii))
        lam = point_intensity(pp, intensity, estimator, bandwidth)
        return k_inhom(pp, lam, radii, window)

    sims = np.array(pmap(one, _children(seed, n_sim)))
    lo, hi = _quantile_band(sims, level)
    return KResult(radii, None, sims.mean(0), lo, hi, n_sim, "univariate", level, sims)


def cross_envelope(field1: IntensityField, field2: IntensityField, n_sim: int, radii,
                   level: float = 0.95, seed=0, window: Optional[Window] = None,
                   estimator: str = "kernel", bandwidths=(None, None)) -> KResult:
    """Envelope of cross-K under independent inhomogeneous Poisson patterns."""
    _check_envelope_args(n_sim, level)
    radii = np.asarray(radii, dtype=float)
    window = window or Window.box(*field1.grid.extent)

    def one(child):
        c1, c2 = child.spawn(2)
        p1 = simulate_poisson(field1, np.random.default_rng(c1), window)
        p2 = simulate_poisson(field2, np.random.default_rng(c2), window)
        if p1.n < 2 or p2.n < 2:
            return np.zeros(len(radii))
        l1 = point_intensity(p1, field1, estimator, bandwidths[0])
        l2 = point_intensity(p2, field2, estimator, bandwidths[1])
        return cross_k_inhom(p1, p2, l1, l2, radii, window)

    sims = np.array(pmap(one, _children(seed, n_sim)))
    lo, hi = _quantile_band(sims, level)
    return KResult(radii, None, sims.mean(0), lo, hi, n_sim, "cross", level, sims)


def csr_test(khat, sims, radii=None) -> tuple[float, float]:
    """Maximum absolute deviation from the simulation mean, with Monte-Carlo p-value."""
    sims = np.asarray(sims, dtype=float)
    khat = np.asarray(khat, dtype=float)
    if sims.ndim != 2 or len(sims) < 19:
        raise ValueError("csr_test needs at least 19 simulated curves")
    mean = sims.mean(0)
    t = float(np.max(np.abs(khat - mean)))
    t_sim = np.max(np.abs(sims - mean), axis=1)
    p = (1 + int(np.count_nonzero(t_sim >= t))) / (len(sims) + 1)
    return t, p


def _null_field(pp: PointPattern, grid, h: float, estimator: str) -> IntensityField:
    """Envelope-generating intensity: the kernel estimate, or the constant n/|D|
    when K is computed under a homogeneous intensity."""
    if estimator == "homogeneous":
        return IntensityField(grid, np.full(grid.shape, pp.n / pp.window.area), bandwidth=h)
    return kernel_intensity(pp, h, grid)


def diagnose(pp: PointPattern, grid, radii=None, n_sim: int = 99, level: float = 0.95, seed=0,
             bandwidth: Optional[float] = None, estimator: str = "kernel") -> KResult:
    """Empirical K with its Poisson envelope and CSR test. The envelope is driven by
    the kernel intensity of the data (constant intensity for ``homogeneous``)."""
    radii = default_radii(pp.window) if radii is None else np.asarray(radii, dtype=float)
    h = bandwidth or default_bandwidth(pp)
    field_ = _null_field(pp, grid, h, estimator)
    lam = point_intensity(pp, field_, estimator, h)
    khat = k_inhom(pp, lam, radii)
    env = poisson_envelope(field_, n_sim, radii, level, seed, pp.window, estimator, h)
    env.khat = khat
    if n_sim >= 19:
        env.statistic, env.p_value = csr_test(khat, env.sims, radii)
    return env


def cross_diagnose(pp1: PointPattern, pp2: PointPattern, grid, radii=None, n_sim: int = 99,
                   level: float = 0.95, seed=0, bandwidths=(None, None),
                   estimator: str = "kernel") -> KResult:
    radii = default_radii(pp1.window) if radii is None else np.asarray(radii, dtype=float)
    h1 = bandwidths[0] or default_bandwidth(pp1)
    h2 = bandwidths[1] or default_bandwidth(pp2)
    f1 = _null_field(pp1, grid, h1, estimator)
    f2 = _null_field(pp2, grid, h2, estimator)
    l1 = point_intensity(pp1, f1, estimator, h1)
    l2 = point_intensity(pp2, f2, estimator, h2)
    khat = cross_k_inhom(pp1, pp2, l1, l2, radii)
    env = cross_envelope(f1, f2, n_sim, radii, level, seed, pp1.window, estimator, (h1, h2))
    env.khat = khat
    if n_sim >= 19:
        env.statistic, env.p_value = csr_test(khat, env.sims, radii)
    return env
