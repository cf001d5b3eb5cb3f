"""Poisson and log-Gaussian Cox process pattern generation on a cell grid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .covar import CovariateStack, design_matrix
from .geom import GridSpec, PointPattern, Window
from .grf import ExpCovParams, FieldSample, LmcParams, simulate_field, simulate_lmc_components
from .kernel import IntensityField

MAX_LOG_INTENSITY = 700.0


def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class LgcpModel:
    """log Lambda_j(s) = Z(s) beta_j + e_j(s) on the cells of ``grid``.

    ``beta`` has shape (p + 1,) for one process or (2, p + 1) for a bivariate model,
    where p is the number of covariate layers (0 when ``covariates`` is None).
    """

    beta: np.ndarray
    covariance: Union[ExpCovParams, LmcParams]
    grid: GridSpec
    covariates: Optional[CovariateStack] = None

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        p = 0 if self.covariates is None else self.covariates.p
        if beta.shape[-1] != p + 1:
            raise ValueError(f"need {p + 1} coefficients per process, got {beta.shape[-1]}")
        if self.bivariate:
            if beta.shape != (2, p + 1):
                raise ValueError("bivariate model needs beta of shape (2, p + 1)")
        elif beta.ndim != 1:
            raise ValueError("univariate model needs a 1-d beta")
        if self.covariates is not None and not self.covariates.grid.compatible(self.grid):
            raise ValueError("covariate grid does not match model grid")

    @property
    def bivariate(self) -> bool:
        return isinstance(self.covariance, LmcParams)

    def design(self) -> np.ndarray:
        if self.covariates is None:
            return np.ones((self.grid.n_masked, 1))
        return design_matrix(self.covariates)

    def log_mean(self) -> np.ndarray:
        """Z beta on masked cells; (n_cells,) or (2, n_cells)."""
        return self.beta @ self.design().T


def scatter(grid: GridSpec, masked_values, fill: float = 0.0) -> np.ndarray:
    out = np.full(grid.shape, fill, dtype=float)
    out[grid.mask] = masked_values
    return out


def _field(grid: GridSpec, log_values: np.ndarray) -> IntensityField:
    if np.any(log_values > MAX_LOG_INTENSITY):
        raise OverflowError("log-intensity overflows; coefficients are implausible for these covariates")
    return IntensityField(grid, scatter(grid, np.exp(log_values)))


def mean_intensity(m: LgcpModel):
    """First-order intensity exp(Z beta); a pair of fields for bivariate models."""
    eta = m.log_mean()
    if m.bivariate:
        return _field(m.grid, eta[0]), _field(m.grid, eta[1])
    return _field(m.grid, eta)


def simulate_poisson(field: IntensityField, seed, window: Optional[Window] = None) -> PointPattern:
    """Poisson(value * cell area) points per masked cell, placed uniformly in the cell.

    Points landing outside ``window`` (boundary cells of irregular windows) are
    redrawn within their cell.
    """
    rng = _rng(seed)
    g = field.grid
    if window is None:
        window = Window.box(*g.extent)
    lam = field.values[g.mask] * g.cell_area
    counts = rng.poisson(lam)
    iy, ix = np.nonzero(g.mask)
    rep = np.repeat(np.arange(len(counts)), counts)
    n = len(rep)
    if n == 0:
        return PointPattern(np.empty((0, 2)), window, simple=True)
    ox = g.x0 + ix[rep] * g.dx
    oy = g.y0 + iy[rep] * g.dy
    u = rng.random((n, 2))
    pts = np.column_stack([ox + u[:, 0] * g.dx, oy + u[:, 1] * g.dy])
    out = ~window.contains(pts)
    tries = 0
    while out.any() and tries < 100:
        k = np.flatnonzero(out)
        u = rng.random((len(k), 2))
        pts[k] = np.column_stack([ox[k] + u[:, 0] * g.dx, oy[k] + u[:, 1] * g.dy])
        out[k] = ~window.contains(pts[k])
        tries += 1
    if out.any():
        k = np.flatnonzero(out)
        pts[k] = np.column_stack([ox[k] + 0.5 * g.dx, oy[k] + 0.5 * g.dy])
    return PointPattern(pts, window, simple=True)


def simulate_lgcp(m: LgcpModel, seed, window: Optional[Window] = None) -> tuple[PointPattern, FieldSample]:
    if m.bivariate:
        raise ValueError("use simulate_bivariate_lgcp for LMC models")
    ss = _seq(seed)
    s_field, s_pts = ss.spawn(2)
    e = simulate_field(m.covariance, m.grid, np.random.default_rng(s_field))
    log_lam = m.log_mean() + e.values[m.grid.mask]
    pp = simulate_poisson(_field(m.grid, log_lam), np.random.default_rng(s_pts), window)
    return pp, FieldSample(m.grid, e.values, m.covariance, seed if isinstance(seed, int) else None)


def simulate_bivariate_lgcp(m: LgcpModel, seed, window: Optional[Window] = None):
    """Two conditionally independent patterns sharing the LMC common component.

    Returns ((pp1, pp2), (e1, e2, W)).
    """
    if not m.bivariate:
        raise ValueError("model is univariate")
    ss = _seq(seed)
    s_field, s1, s2 = ss.spawn(3)
    e1, e2, w = simulate_lmc_components(m.covariance, m.grid, s_field)
    eta = m.log_mean()
    mask = m.grid.mask
    pp1 = simulate_poisson(_field(m.grid, eta[0] + e1.values[mask]), np.random.default_rng(s1), window)
    pp2 = simulate_poisson(_field(m.grid, eta[1] + e2.values[mask]), np.random.default_rng(s2), window)
    return (pp1, pp2), (e1, e2, w)
