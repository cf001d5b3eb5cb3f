"""Latent Gaussian fields: exponential covariance, LGCP covariance identities,
the signed linear model of coregionalization, and circulant-embedding simulation.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import GridSpec

NEG_EIG_TOL = 1e-9
MAX_EXPANSION = 4


class EmbeddingError(RuntimeError):
    """Circulant embedding stayed indefinite after the maximum torus expansion."""


@dataclass(frozen=True)
class ExpCovParams:
    """Exponential covariance sigma^2 exp(-h / phi); field mean is -sigma^2 / 2."""

    sigma: float
    phi: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.phi > 0:
            raise ValueError(f"phi must be > 0, got {self.phi}")

    @property
    def variance(self) -> float:
        return self.sigma ** 2

    @property
    def mean(self) -> float:
        return -0.5 * self.sigma ** 2


@dataclass(frozen=True)
class LmcParams:
    """Signed LMC: e1 = W1 + W, e2 = W2 + sign * W with independent W1, W2, W."""

    w1: ExpCovParams
    w2: ExpCovParams
    w: ExpCovParams
    sign: int = -1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")

    def variance(self, j: int) -> float:
        wj = self._component(j)
        return wj.sigma ** 2 + self.w.sigma ** 2

    def _component(self, j: int) -> ExpCovParams:
        if j == 1:
            return self.w1
        if j == 2:
            return self.w2
        raise ValueError(f"process index must be 1 or 2, got {j}")

    def to_dict(self) -> dict:
        return {
            "sigma_w1": self.w1.sigma, "phi_w1": self.w1.phi,
            "sigma_w2": self.w2.sigma, "phi_w2": self.w2.phi,
            "sigma_w": self.w.sigma, "phi_w": self.w.phi, "sign": self.sign,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmcParams":
        return cls(
            ExpCovParams(d["sigma_w1"], d["phi_w1"]),
            ExpCovParams(d["sigma_w2"], d["phi_w2"]),
            ExpCovParams(d["sigma_w"], d["phi_w"]),
            int(d.get("sign", -1)),
        )


# ---------------------------------------------------------------- analytic

def exp_correlation(h, phi):
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("lag must be non-negative")
    return np.exp(-h / phi)


def cov_e(h, p: ExpCovParams):
    return p.sigma ** 2 * exp_correlation(h, p.phi)


def lambda_corr(h, p: ExpCovParams):
    """Correlation of exp(e(s)) and exp(e(u)) at lag h."""
    if p.sigma == 0:
        raise ValueError("intensity correlation is undefined for sigma = 0")
    return np.expm1(cov_e(h, p)) / math.expm1(p.sigma ** 2)


def lambda_cov(s_mean, u_mean, h, p: ExpCovParams):
    """Covariance of the random intensities at two sites with mean intensities s_mean, u_mean."""
    return np.asarray(s_mean) * np.asarray(u_mean) * np.expm1(cov_e(h, p))


def pair_correlation(h, p: ExpCovParams):
    """LGCP pair correlation exp{C(h)}."""
    return np.exp(cov_e(h, p))


def cross_cov_e(h, p: LmcParams):
    return p.sign * cov_e(h, p.w)


def _check_variances(p: LmcParams):
    if p.variance(1) <= 0 or p.variance(2) <= 0:
        raise ValueError("marginal variances must be positive")


def cross_corr_e(h, p: LmcParams):
    _check_variances(p)
    return cross_cov_e(h, p) / math.sqrt(p.variance(1) * p.variance(2))


def cross_corr_lambda(h, p: LmcParams):
    _check_variances(p)
    denom = math.sqrt(math.expm1(p.variance(1)) * math.expm1(p.variance(2)))
    return np.expm1(cross_cov_e(h, p)) / denom


def marginal_cov_e(h, p: LmcParams, j: int):
    return cov_e(h, p._component(j)) + cov_e(h, p.w)


def marginal_corr_e(h, p: LmcParams, j: int):
    """Within-process log-intensity correlation of e_j."""
    v = p.variance(j)
    if v <= 0:
        raise ValueError("marginal variance must be positive")
    return marginal_cov_e(h, p, j) / v


# ---------------------------------------------------------------- simulation

def _next_pow2(n: int) -> int:
    return 1 << max(1, (int(n) - 1).bit_length())


def _torus_eigenvalues(My: int, Mx: int, dx: float, dy: float, phi: float) -> np.ndarray:
    lx = np.arange(Mx)
    lx = np.minimum(lx, Mx - lx) * dx
    ly = np.arange(My)
    ly = np.minimum(ly, My - ly) * dy
    base = np.exp(-np.hypot(ly[:, None], lx[None, :]) / phi)
    return np.fft.rfft2(base).real


class CirculantEmbedding:
    """Square root of a unit-variance exponential correlation on a grid.

    The grid is embedded in a periodic torus whose sides are powers of two and at
    least twice the grid; the torus is doubled (up to ``MAX_EXPANSION`` times the
    minimal size per axis) until the smallest eigenvalue is above
    ``-NEG_EIG_TOL * max``. Remaining small negatives are clipped to zero.

    ``apply`` maps a standard normal torus array to a correlated field on the
    grid; ``adjoint`` is its transpose, used for gradients in the sampler.
    """

    def __init__(self, grid: GridSpec, phi: float, torus: Optional[tuple[int, int]] = None,
                 allow_clip: bool = False):
        self.grid = grid
        self.phi = float(phi)
        if torus is None:
            torus, eig = self._search(grid, phi, allow_clip)
        else:
            eig = _torus_eigenvalues(torus[0], torus[1], grid.dx, grid.dy, phi)
        self.torus = tuple(torus)
        lo, hi = float(eig.min()), float(eig.max())
        self.clipped = max(0.0, -lo / hi)
        self._sqrt_eig = np.sqrt(np.clip(eig, 0.0, None))

    @staticmethod
    def _search(grid: GridSpec, phi: float, allow_clip: bool):
        my0, mx0 = _next_pow2(2 * grid.ny), _next_pow2(2 * grid.nx)
        f = 1
        while True:
            My, Mx = my0 * f, mx0 * f
            eig = _torus_eigenvalues(My, Mx, grid.dx, grid.dy, phi)
            if eig.min() >= -NEG_EIG_TOL * eig.max():
                return (My, Mx), eig
            if f >= MAX_EXPANSION:
                rel = -eig.min() / eig.max()
                if allow_clip:
                    return (My, Mx), eig
                raise EmbeddingError(
                    f"circulant embedding indefinite (min/max eigenvalue {-rel:.3g}) on a "
                    f"{My}x{Mx} torus for phi={phi}; grid extent too small relative to phi"
                )
            f *= 2

    def with_phi(self, phi: float) -> "CirculantEmbedding":
        """Same torus, new range; negative eigenvalues are clipped."""
        return CirculantEmbedding(self.grid, phi, torus=self.torus)

    @property
    def size(self) -> int:
        return self.torus[0] * self.torus[1]

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        full = np.fft.irfft2(self._sqrt_eig * np.fft.rfft2(gamma), s=self.torus)
        return full[: self.grid.ny, : self.grid.nx]

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        pad = np.zeros(self.torus)
        pad[: self.grid.ny, : self.grid.nx] = g
        return np.fft.irfft2(self._sqrt_eig * np.fft.rfft2(pad), s=self.torus)


@dataclass(frozen=True)
class FieldSample:
    grid: GridSpec
    values: np.ndarray
    params: object
    seed: Optional[int] = None


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def standard_field(grid: GridSpec, phi: float, rng, embedding: Optional[CirculantEmbedding] = None):
    """Zero-mean unit-variance exponential field on the grid."""
    emb = embedding or CirculantEmbedding(grid, phi)
    return emb.apply(rng.standard_normal(emb.torus))


def simulate_field(p: ExpCovParams, grid: GridSpec, seed) -> FieldSample:
    """One stationary Gaussian field with mean -sigma^2/2 and covariance sigma^2 exp(-h/phi)."""
    rng = _rng(seed)
    if p.sigma == 0:
        values = np.zeros(grid.shape)
    else:
        emb = CirculantEmbedding(grid, p.phi)
        if emb.clipped > 0:
            warnings.warn(f"clipped negative eigenvalues (relative {emb.clipped:.2g})", RuntimeWarning)
        values = p.mean + p.sigma * emb.apply(rng.standard_normal(emb.torus))
    return FieldSample(grid, values, p, seed if isinstance(seed, (int, np.integer)) else None)


def _component(p: ExpCovParams, grid: GridSpec, rng) -> np.ndarray:
    if p.sigma == 0:
        return np.zeros(grid.shape)
    return p.sigma * standard_field(grid, p.phi, rng)


def simulate_lmc(p: LmcParams, grid: GridSpec, seed) -> tuple[FieldSample, FieldSample]:
    """Draw (e1, e2) from the signed LMC; each has E[exp(e_j)] = 1."""
    e1, e2, _ = simulate_lmc_components(p, grid, seed)
    return e1, e2


def simulate_lmc_components(p: LmcParams, grid: GridSpec, seed):
    """(e1, e2, W) where W is the common component."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    r1, r2, rw = (np.random.default_rng(s) for s in ss.spawn(3))
    w1 = _component(p.w1, grid, r1)
    w2 = _component(p.w2, grid, r2)
    w = _component(p.w, grid, rw)
    e1 = -0.5 * p.variance(1) + w1 + w
    e2 = -0.5 * p.variance(2) + w2 + p.sign * w
    s = seed if isinstance(seed, (int, np.integer)) else None
    return (FieldSample(grid, e1, p, s), FieldSample(grid, e2, p, s),
            FieldSample(grid, w, p.w, s))
