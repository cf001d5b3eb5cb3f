"""Parameter estimation for univariate and bivariate LGCPs.

Minimum contrast gives quick (sigma, phi) estimates from the inhomogeneous K
function; the Bayesian sampler works on the grid-discretised likelihood with a
whitened latent field. Posterior products (correlation curves, intensity-ratio
maps, fitted cross-K envelopes) live at the bottom.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from ._parallel import pmap
from .covar import CovariateStack, design_matrix
from .geom import GridSpec, PointPattern, Window, bin_to_grid
from .grf import (CirculantEmbedding, _next_pow2, ExpCovParams, LmcParams, cross_corr_e, exp_correlation,
                  marginal_corr_e)
from .kernel import IntensityField
from .ripley import KResult, _quantile_band, default_radii, k_inhom, cross_k_inhom
from .sim import LgcpModel, scatter, simulate_bivariate_lgcp

log = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


# ---------------------------------------------------------------- likelihood

def riemann_loglik(counts, log_intensity, cell_areas) -> float:
    """sum_c [n_c log Lambda_c - Lambda_c A_c] over grid cells."""
    eta = np.asarray(log_intensity, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("log-intensity must be finite")
    n = np.asarray(counts, dtype=float)
    a = np.broadcast_to(np.asarray(cell_areas, dtype=float), eta.shape)
    return float(np.sum(n * eta) - np.sum(np.exp(eta) * a))


def riemann_loglik_grad(counts, log_intensity, cell_areas) -> np.ndarray:
    """Gradient with respect to the per-cell log-intensity: n_c - Lambda_c A_c."""
    eta = np.asarray(log_intensity, dtype=float)
    return np.asarray(counts, dtype=float) - np.exp(eta) * np.asarray(cell_areas, dtype=float)


def cell_counts(pp: PointPattern, grid: GridSpec) -> np.ndarray:
    """Counts per masked cell (flat order). Events in unmasked boundary cells are
    moved to the nearest masked cell so the likelihood keeps every point."""
    counts = bin_to_grid(pp, grid)
    stray = counts * ~grid.mask
    if stray.any():
        c = grid.centers()
        mc = c[grid.mask]
        midx = np.flatnonzero(grid.mask.ravel())
        flat = counts.ravel().copy()
        for k in np.flatnonzero(stray.ravel()):
            d = ((mc - c.reshape(-1, 2)[k]) ** 2).sum(1)
            flat[midx[np.argmin(d)]] += flat[k]
            flat[k] = 0
        counts = flat.reshape(grid.shape)
    return counts[grid.mask].astype(float)


def fit_poisson(counts, Z, area: float, n_iter: int = 50) -> np.ndarray:
    """Poisson log-linear coefficients by Newton's method on the Riemann likelihood."""
    counts = np.asarray(counts, dtype=float)
    beta = np.zeros(Z.shape[1])
    beta[0] = math.log(max(counts.sum(), 0.5) / (area * len(counts)))
    for _ in range(n_iter):
        mu = np.exp(Z @ beta) * area
        grad = Z.T @ (counts - mu)
        hess = Z.T @ (Z * mu[:, None]) + 1e-8 * np.eye(Z.shape[1])
        step = np.linalg.solve(hess, grad)
        beta += step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


# ---------------------------------------------------------------- minimum contrast

@dataclass(frozen=True)
class MomentFit:
    sigma: float
    phi: float
    contrast: float
    r_range: tuple
    exponent: float
    on_boundary: bool = False


def lgcp_k(r, sigma: float, phi: float, n_quad: int = 2048) -> np.ndarray:
    """Theoretical K for an LGCP with exponential covariance:
    2 pi int_0^r s exp(sigma^2 exp(-s / phi)) ds."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    rmax = float(r.max())
    if rmax == 0:
        return np.zeros_like(r)
    s = np.linspace(0, rmax, n_quad + 1)
    f = s * np.exp(sigma ** 2 * np.exp(-s / phi))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(s))])
    return 2 * math.pi * np.interp(r, s, cum)


def _lgcp_k_lattice(r, sigmas, phis, n_quad=1024):
    s = np.linspace(0, float(r.max()), n_quad + 1)
    ds = s[1] - s[0]
    rho = np.exp(-s[None, :] / phis[:, None])                       # (P, S)
    f = s * np.exp(sigmas[:, None, None] ** 2 * rho[None])          # (Sg, P, S)
    cum = np.concatenate([np.zeros(f.shape[:2] + (1,)), np.cumsum(0.5 * (f[..., 1:] + f[..., :-1]) * ds, axis=-1)], axis=-1)
    idx = r / ds
    lo = np.clip(np.floor(idx).astype(int), 0, n_quad - 1)
    w = idx - lo
    return 2 * math.pi * (cum[..., lo] * (1 - w) + cum[..., lo + 1] * w)


def min_contrast(pp: PointPattern, mean_intensity: IntensityField, r_range=None, q: float = 0.25,
                 n_lattice: int = 32, n_radii: int = 64) -> MomentFit:
    """(sigma, phi) minimising int (Khat^q - K_theta^q)^2 dr over ``r_range``.

    Khat uses the supplied first-order intensity at the data points. A log-spaced
    lattice search is refined by coordinate descent in log space.
    """
    pp.require_simple()
    if r_range is None:
        r_range = (0.0, float(default_radii(pp.window)[-1]))
    r0, r1 = map(float, r_range)
    radii = np.linspace(r0, r1, n_radii + 1)
    radii = radii[radii > 0]
    lam = mean_intensity.at(pp.points)
    khat = k_inhom(pp, lam, radii)
    dr = np.gradient(radii) if len(radii) > 1 else np.ones(1)
    target = np.clip(khat, 0, None) ** q

    sig_lo, sig_hi = 0.02, 5.0
    phi_lo, phi_hi = max(r1 / 100, 2 * (radii[1] - radii[0]) if len(radii) > 1 else r1 / 100), 4 * r1
    sigmas = np.geomspace(sig_lo, sig_hi, n_lattice)
    phis = np.geomspace(phi_lo, phi_hi, n_lattice)
    kt = _lgcp_k_lattice(radii, sigmas, phis)
    D = ((kt ** q - target) ** 2 * dr).sum(-1)
    i, j = np.unravel_index(np.argmin(D), D.shape)

    def contrast(ls, lp):
        k = lgcp_k(radii, math.exp(ls), math.exp(lp))
        return float(((k ** q - target) ** 2 * dr).sum())

    ls, lp = math.log(sigmas[i]), math.log(phis[j])
    best = contrast(ls, lp)
    for _ in range(6):
        res = minimize_scalar(lambda x: contrast(x, lp), bounds=(math.log(sig_lo), math.log(sig_hi)),
                              method="bounded", options={"xatol": 1e-4})
        ls = res.x if res.fun <= best else ls
        best = min(best, res.fun)
        res = minimize_scalar(lambda x: contrast(ls, x), bounds=(math.log(phi_lo), math.log(phi_hi)),
                              method="bounded", options={"xatol": 1e-4})
        lp = res.x if res.fun <= best else lp
        best = min(best, res.fun)
    boundary = i in (0, n_lattice - 1) or j in (0, n_lattice - 1)
    if boundary:
        warnings.warn("minimum contrast optimum lies on the lattice boundary", RuntimeWarning)
    return MomentFit(math.exp(ls), math.exp(lp), best, (r0, r1), q, bool(boundary))


# ---------------------------------------------------------------- sampler config

@dataclass(frozen=True)
class McmcConfig:
    burn_in: int = 20_000
    thin: int = 20
    n_samples: int = 500
    step_latent: float = 0.05
    step_params: float = 0.1
    beta_var: float = 1e6
    log_sigma_mean: float = 0.0
    log_sigma_var: float = 0.15
    log_phi_mean: Optional[float] = None
    log_phi_var: float = 0.15
    target_accept: float = 0.574
    seed: int = 0
    likelihood: bool = True
    store_latent: bool = True
    torus_factor: int = 2

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1 or self.n_samples < 1:
            raise ValueError("need burn_in >= 0, thin >= 1, n_samples >= 1")
        if min(self.beta_var, self.log_sigma_var, self.log_phi_var) <= 0:
            raise ValueError("prior variances must be positive")
        if self.torus_factor < 2:
            raise ValueError("torus_factor must be at least 2")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")

    @classmethod
    def preset(cls, name: str, bivariate: bool = False, **overrides) -> "McmcConfig":
        presets = {
            "full": dict(burn_in=1_000_000, thin=5000 if bivariate else 3000, n_samples=1000),
            "desk": dict(burn_in=20_000, thin=20, n_samples=500),
            "smoke": dict(burn_in=400, thin=2, n_samples=100),
        }
        if name not in presets:
            raise ValueError(f"unknown MCMC preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


# ---------------------------------------------------------------- posterior container

@dataclass
class PosteriorSamples:
    """Retained draws. ``beta`` is (draws, K, p+1); ``sigma``/``phi`` are (draws, J)."""

    beta: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray
    covariate_names: list
    components: list
    sign: Optional[int] = None
    latent_mean: Optional[np.ndarray] = None
    latent_sd: Optional[np.ndarray] = None
    acceptance: dict = field(default_factory=dict)
    process_names: list = field(default_factory=lambda: ["1"])

    @property
    def n_draws(self) -> int:
        return len(self.sigma)

    @property
    def bivariate(self) -> bool:
        return self.sign is not None

    def lmc(self, i: int) -> LmcParams:
        s, p = self.sigma[i], self.phi[i]
        return LmcParams(ExpCovParams(s[0], p[0]), ExpCovParams(s[1], p[1]),
                         ExpCovParams(s[2], p[2]), self.sign)

    def cov(self, i: int):
        if self.bivariate:
            return self.lmc(i)
        return ExpCovParams(self.sigma[i, 0], self.phi[i, 0])

    def columns(self) -> dict:
        cols = {}
        names = ["intercept"] + list(self.covariate_names)
        for k, pname in enumerate(self.process_names):
            for c, cname in enumerate(names):
                key = f"beta[{cname}]" if len(self.process_names) == 1 else f"beta_{pname}[{cname}]"
                cols[key] = self.beta[:, k, c]
        for j, comp in enumerate(self.components):
            suffix = f"_{comp}" if comp else ""
            cols[f"sigma{suffix}"] = self.sigma[:, j]
            cols[f"phi{suffix}"] = self.phi[:, j]
        return cols

    def to_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw"] + list(cols))
            for i in range(self.n_draws):
                w.writerow([i] + [f"{v[i]:.10g}" for v in cols.values()])

    def summary(self) -> dict:
        out = {}
        for key, v in self.columns().items():
            lo, med, hi = np.quantile(v, [0.025, 0.5, 0.975])
            out[key] = {"lower": float(lo), "median": float(med), "upper": float(hi)}
        return out

    def meta(self) -> dict:
        return {
            "covariate_names": list(self.covariate_names), "components": list(self.components),
            "process_names": list(self.process_names), "sign": self.sign,
            "n_draws": self.n_draws, "acceptance": self.acceptance,
        }

    def to_json(self, path, extra: Optional[dict] = None):
        doc = {"meta": self.meta(), "summary": self.summary()}
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_files(cls, csv_path, json_path) -> "PosteriorSamples":
        meta = json.loads(open(json_path).read())["meta"]
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cov, comps, procs = meta["covariate_names"], meta["components"], meta["process_names"]
        names = ["intercept"] + cov
        n = len(rows)
        beta = np.zeros((n, len(procs), len(names)))
        for k, pname in enumerate(procs):
            for c, cname in enumerate(names):
                key = f"beta[{cname}]" if len(procs) == 1 else f"beta_{pname}[{cname}]"
                beta[:, k, c] = [float(r[key]) for r in rows]
        sigma = np.zeros((n, len(comps)))
        phi = np.zeros((n, len(comps)))
        for j, comp in enumerate(comps):
            suffix = f"_{comp}" if comp else ""
            sigma[:, j] = [float(r[f"sigma{suffix}"]) for r in rows]
            phi[:, j] = [float(r[f"phi{suffix}"]) for r in rows]
        return cls(beta, sigma, phi, cov, comps, meta["sign"], acceptance=meta.get("acceptance", {}),
                   process_names=procs)


# ---------------------------------------------------------------- sampler

class _LatentModel:
    """K Poisson processes on a shared grid driven by J whitened Gaussian components.

    e_k = -1/2 sum_j L_kj^2 sigma_j^2 + sum_j L_kj sigma_j R_j(Gamma_j),
    log Lambda_k = Z_k beta_k + e_k.

    R_j is the circulant square root on a torus fixed for the whole chain; the
    lag-distance table is cached so a new phi costs one exp and one FFT.
    """

    def __init__(self, counts, Z, grid: GridSpec, loading, torus, phis):
        self.counts = [np.asarray(c, dtype=float) for c in counts]
        self.Z = Z
        self.grid = grid
        self.L = np.asarray(loading, dtype=float)
        self.K, self.J = self.L.shape
        self.area = grid.cell_area
        self.mask = grid.mask
        self.torus = tuple(torus)
        My, Mx = self.torus
        ly = np.arange(My)
        lx = np.arange(Mx)
        self._dist = np.hypot((np.minimum(ly, My - ly) * grid.dy)[:, None],
                              (np.minimum(lx, Mx - lx) * grid.dx)[None, :])
        self.use_lik = True

    def root(self, phi: float) -> np.ndarray:
        """Square-rooted (clipped) torus eigenvalues for range phi."""
        eig = np.fft.rfft2(np.exp(-self._dist / phi)).real
        return np.sqrt(np.clip(eig, 0.0, None))

    def field(self, root, ghat) -> np.ndarray:
        """(R Gamma) on masked cells from the FFT of Gamma."""
        full = np.fft.irfft2(root * ghat, s=self.torus)
        return full[: self.grid.ny, : self.grid.nx][self.mask]

    def adjoint(self, root, g) -> np.ndarray:
        pad = np.zeros(self.torus)
        pad[: self.grid.ny, : self.grid.nx][self.mask] = g
        return np.fft.irfft2(root * np.fft.rfft2(pad), s=self.torus)

    def eta(self, beta, sigma, u):
        out = []
        for k in range(self.K):
            e = -0.5 * np.sum(self.L[k] ** 2 * sigma ** 2)
            for j in range(self.J):
                if self.L[k, j] != 0:
                    e = e + self.L[k, j] * sigma[j] * u[j]
            out.append(self.Z @ beta[k] + e)
        return out

    def loglik(self, eta) -> float:
        if not self.use_lik:
            return 0.0
        return sum(float(np.dot(n, e) - self.area * np.exp(e).sum()) for n, e in zip(self.counts, eta))

    def grads(self, eta, sigma, roots):
        """Likelihood gradients w.r.t. beta_k and Gamma_j."""
        gg = np.zeros((self.J,) + self.torus)
        if not self.use_lik:
            return np.zeros((self.K, self.Z.shape[1])), gg
        res = [n - self.area * np.exp(e) for n, e in zip(self.counts, eta)]
        gb = np.array([self.Z.T @ r for r in res])
        for j in range(self.J):
            acc = sum(self.L[k, j] * res[k] for k in range(self.K) if self.L[k, j] != 0)
            gg[j] = sigma[j] * self.adjoint(roots[j], acc)
        return gb, gg

    def level_direction(self, root) -> np.ndarray:
        """Torus vector d with R d = 1 on every masked cell and minimal norm,
        d = R^T C^-1 1 with C = R R^T restricted to the mask (conjugate gradients)."""
        from scipy.sparse.linalg import LinearOperator, cg

        n = self.grid.n_masked

        def matvec(v):
            return self.field(root, np.fft.rfft2(self.adjoint(root, np.ravel(v))))

        op = LinearOperator((n, n), matvec=matvec, dtype=float)
        w, _ = cg(op, np.ones(n), rtol=1e-10, maxiter=5000)
        return self.adjoint(root, w)


def _torus_for(grid: GridSpec, phi: float, factor: int = 2):
    """Torus for a whole chain: the embedding search at ``phi``, capped at ``factor``
    times the grid per axis. Negative eigenvalues are clipped; the cap bounds the
    per-iteration FFT cost when phi is large relative to the grid."""
    t = CirculantEmbedding(grid, phi, allow_clip=True).torus
    cap = (_next_pow2(factor * grid.ny), _next_pow2(factor * grid.nx))
    return (min(t[0], cap[0]), min(t[1], cap[1]))


class _Chain:
    """One Markov chain over (beta, Gamma, log sigma, log phi).

    Per iteration: a preconditioned Langevin step on (beta, Gamma) jointly; a
    random-walk Metropolis step on (log sigma_j, log phi_j) for each component;
    and a line move per component that shifts the field's overall level against
    the intercepts, which is the direction the Langevin step explores slowest.
    """

    def __init__(self, model: _LatentModel, cfg: McmcConfig, beta0, log_sigma0, log_phi0,
                 phi_prior_means, beta_precond):
        m = self.m = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.beta = np.array(beta0, dtype=float)
        self.ls = np.array(log_sigma0, dtype=float)
        self.lp = np.array(log_phi0, dtype=float)
        self.phi_mean = np.asarray(phi_prior_means, dtype=float)
        self.gamma = np.zeros((m.J,) + m.torus)
        self.ghat = np.fft.rfft2(self.gamma)
        self.roots = [m.root(math.exp(v)) for v in self.lp]
        self.Mb = np.asarray(beta_precond, dtype=float)          # (K, P, P)
        self.Mb_chol = np.linalg.cholesky(self.Mb)
        self.Mb_inv = np.linalg.inv(self.Mb)
        self.h = cfg.step_latent
        self.rw_scale = np.full(m.J, cfg.step_params)
        self.rw_chol = np.tile(np.eye(2), (m.J, 1, 1))
        # fixed level directions, one per component, at the prior-centre ranges
        self.level = [m.level_direction(m.root(math.exp(v))) for v in self.phi_mean]
        self.level_hat = [np.fft.rfft2(d) for d in self.level]
        self.level_sq = [float(np.sum(d * d)) for d in self.level]
        self.level_scale = np.array([1.0 / math.sqrt(v) for v in self.level_sq])
        self._level_field = [None] * m.J
        self.sigma = np.exp(self.ls)
        self.u = [m.field(self.roots[j], self.ghat[j]) for j in range(m.J)]
        self.eta = m.eta(self.beta, self.sigma, self.u)
        self.ll = m.loglik(self.eta)
        self._lgrad = None
        if not np.isfinite(self.ll + self._prior_x(self.beta, self.gamma)):
            raise SamplerError("non-finite posterior at initialisation")

    # log posterior pieces -----------------------------------------------
    def _prior_x(self, beta, gamma):
        return -0.5 * np.sum(beta ** 2) / self.cfg.beta_var - 0.5 * np.sum(gamma ** 2)

    def _prior_theta(self, ls, lp):
        c = self.cfg
        return (-0.5 * np.sum((ls - c.log_sigma_mean) ** 2) / c.log_sigma_var
                - 0.5 * np.sum((lp - self.phi_mean) ** 2) / c.log_phi_var)

    def _drift(self, beta, gamma, lgrad):
        gb, gg = lgrad
        db = np.einsum("kij,kj->ki", self.Mb, gb - beta / self.cfg.beta_var)
        return db, gg - gamma

    # updates ------------------------------------------------------------
    def mala(self) -> float:
        m, h = self.m, self.h
        if self._lgrad is None:
            self._lgrad = m.grads(self.eta, self.sigma, self.roots)
        db, dg = self._drift(self.beta, self.gamma, self._lgrad)
        zb = self.rng.standard_normal(self.beta.shape)
        zg = self.rng.standard_normal(self.gamma.shape)
        nb = self.beta + 0.5 * h * db + math.sqrt(h) * np.einsum("kij,kj->ki", self.Mb_chol, zb)
        ng = self.gamma + 0.5 * h * dg + math.sqrt(h) * zg
        nghat = np.fft.rfft2(ng)
        u = [m.field(self.roots[j], nghat[j]) for j in range(m.J)]
        eta = m.eta(nb, self.sigma, u)
        ll = m.loglik(eta)
        if not np.isfinite(ll):
            return 0.0
        lgrad = m.grads(eta, self.sigma, self.roots)
        rb, rg = self._drift(nb, ng, lgrad)
        fwd_b = self.beta - nb - 0.5 * h * rb
        fwd_g = self.gamma - ng - 0.5 * h * rg
        bwd_b = nb - self.beta - 0.5 * h * db
        bwd_g = ng - self.gamma - 0.5 * h * dg
        q_rev = -(np.einsum("ki,kij,kj->", fwd_b, self.Mb_inv, fwd_b) + np.sum(fwd_g ** 2)) / (2 * h)
        q_fwd = -(np.einsum("ki,kij,kj->", bwd_b, self.Mb_inv, bwd_b) + np.sum(bwd_g ** 2)) / (2 * h)
        log_a = (ll + self._prior_x(nb, ng)) - (self.ll + self._prior_x(self.beta, self.gamma)) + q_rev - q_fwd
        a = math.exp(min(0.0, log_a)) if np.isfinite(log_a) else 0.0
        if self.rng.random() < a:
            self.beta, self.gamma, self.ghat, self.u, self.eta, self.ll = nb, ng, nghat, u, eta, ll
            self._lgrad = lgrad
        return a

    def rw(self, j: int) -> float:
        m = self.m
        step = self.rw_scale[j] * (self.rw_chol[j] @ self.rng.standard_normal(2))
        ls, lp = self.ls.copy(), self.lp.copy()
        ls[j] += step[0]
        lp[j] += step[1]
        root = m.root(math.exp(lp[j]))
        sigma = np.exp(ls)
        u = list(self.u)
        u[j] = m.field(root, self.ghat[j])
        eta = m.eta(self.beta, sigma, u)
        ll = m.loglik(eta)
        log_a = (ll + self._prior_theta(ls, lp)) - (self.ll + self._prior_theta(self.ls, self.lp))
        a = math.exp(min(0.0, log_a)) if np.isfinite(log_a) else 0.0
        if self.rng.random() < a:
            self.ls, self.lp, self.sigma, self.u, self.eta, self.ll = ls, lp, sigma, u, eta, ll
            self.roots[j] = root
            self._level_field[j] = None
            self._lgrad = None
        return a

    def shift_level(self, j: int) -> float:
        """Random-walk move of Gamma_j by t d_j with each intercept moved by -L_kj sigma_j t.

        When phi_j equals the range d_j was built for the likelihood is unchanged
        along this line, so only the prior terms decide acceptance."""
        m = self.m
        a = m.L[:, j] * self.sigma[j]
        t = self.level_scale[j] * self.rng.standard_normal()
        if self._level_field[j] is None:
            self._level_field[j] = m.field(self.roots[j], self.level_hat[j])
        u = list(self.u)
        u[j] = self.u[j] + t * self._level_field[j]
        beta = self.beta.copy()
        beta[:, 0] -= a * t
        eta = m.eta(beta, self.sigma, u)
        ll = m.loglik(eta)
        d_prior = (-t * float(np.sum(self.gamma[j] * self.level[j])) - 0.5 * t * t * self.level_sq[j]
                   - 0.5 * (np.sum(beta[:, 0] ** 2) - np.sum(self.beta[:, 0] ** 2)) / self.cfg.beta_var)
        log_a = ll - self.ll + d_prior
        acc = math.exp(min(0.0, log_a)) if np.isfinite(log_a) else 0.0
        if self.rng.random() < acc:
            gamma = self.gamma.copy()
            gamma[j] += t * self.level[j]
            ghat = self.ghat.copy()
            ghat[j] += t * self.level_hat[j]
            self.beta, self.gamma, self.ghat, self.u, self.eta, self.ll = beta, gamma, ghat, u, eta, ll
            self._lgrad = None
        return acc

    def run(self, store_latent: bool):
        cfg = self.cfg
        K, J = self.m.K, self.m.J
        n_iter = cfg.burn_in + cfg.thin * cfg.n_samples
        beta_out = np.zeros((cfg.n_samples, K, self.beta.shape[1]))
        sig_out = np.zeros((cfg.n_samples, J))
        phi_out = np.zeros((cfg.n_samples, J))
        lat_sum = np.zeros((K,) + self.m.grid.shape)
        lat_sq = np.zeros_like(lat_sum)
        acc_mala = acc_rw = acc_level = 0.0
        n_post = 0
        hist = [[] for _ in range(J)]
        target_rw = 0.3
        for it in range(n_iter):
            burning = it < cfg.burn_in
            gain = 1.0 / (it + 1) ** 0.6
            a = self.mala()
            if burning:
                self.h *= math.exp(gain * (a - cfg.target_accept))
                if self.h < 1e-12:
                    raise SamplerError("Langevin step size underflow; adaptation diverged")
            ar = al = 0.0
            for j in range(J):
                aj = self.rw(j)
                ar += aj / J
                aj_level = self.shift_level(j)
                al += aj_level / J
                if burning:
                    self.level_scale[j] *= math.exp(gain * (aj_level - 0.44))
                    self.rw_scale[j] *= math.exp(gain * (aj - target_rw))
                    hist[j].append((self.ls[j], self.lp[j]))
                    if it >= 1000 and it % 500 == 0:
                        # proposal shape from the second half of the burn-in so far
                        hj = np.array(hist[j][len(hist[j]) // 2:])
                        cov = np.cov(hj.T) + 1e-6 * np.eye(2)
                        self.rw_chol[j] = np.linalg.cholesky(cov / (np.trace(cov) / 2))
            if not burning:
                acc_mala += a
                acc_rw += ar
                acc_level += al
                n_post += 1
                t = it - cfg.burn_in
                if (t + 1) % cfg.thin == 0:
                    i = t // cfg.thin
                    beta_out[i] = self.beta
                    sig_out[i] = self.sigma
                    phi_out[i] = np.exp(self.lp)
                    if store_latent:
                        for k in range(K):
                            e = scatter(self.m.grid, self.eta[k] - self.m.Z @ self.beta[k])
                            lat_sum[k] += e
                            lat_sq[k] += e * e
        n_post = max(n_post, 1)
        acc = {"langevin": acc_mala / n_post, "random_walk": acc_rw / n_post,
               "level_shift": acc_level / n_post, "step_latent": self.h}
        lat_mean = lat_sd = None
        if store_latent:
            lat_mean = lat_sum / cfg.n_samples
            lat_sd = np.sqrt(np.clip(lat_sq / cfg.n_samples - lat_mean ** 2, 0, None))
        return beta_out, sig_out, phi_out, lat_mean, lat_sd, acc


# ---------------------------------------------------------------- public fits

@dataclass(frozen=True)
class ModelFrame:
    """Grid plus the design matrix (masked rows) a fit was run with."""

    grid: GridSpec
    Z: np.ndarray
    covariate_names: tuple = ()

    @classmethod
    def from_covariates(cls, grid: GridSpec, covariates: Optional[CovariateStack]) -> "ModelFrame":
        if covariates is None:
            return cls(grid, np.ones((grid.n_masked, 1)), ())
        if not covariates.grid.compatible(grid):
            raise ValueError("covariate grid does not match the computational grid")
        grid = grid.with_mask(grid.mask & covariates.grid.mask)
        cov = covariates.__class__(grid, covariates.layers, covariates.standardization, covariates.log_layers)
        return cls(grid, design_matrix(cov), tuple(covariates.names))


def _prepare(pps, frame: ModelFrame):
    counts = [cell_counts(pp, frame.grid) for pp in pps]
    betas = [fit_poisson(c, frame.Z, frame.grid.cell_area) for c in counts]
    precond = []
    for b in betas:
        mu = np.exp(frame.Z @ b) * frame.grid.cell_area
        info = frame.Z.T @ (frame.Z * mu[:, None])
        precond.append(np.linalg.inv(info + 1e-6 * np.eye(len(b))))
    return counts, np.array(betas), np.array(precond)


def _mcm(pp, frame, beta, r_range=None):
    lam = np.exp(frame.Z @ beta)
    field_ = IntensityField(frame.grid, scatter(frame.grid, lam))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return min_contrast(pp, field_, r_range)


def _grid_check(grid: GridSpec, phi_hat: float):
    if max(grid.dx, grid.dy) > phi_hat:
        warnings.warn(f"grid cell width {max(grid.dx, grid.dy):.3g} exceeds the minimum-contrast "
                      f"range estimate {phi_hat:.3g}; use a finer grid", RuntimeWarning)


def fit_univariate(pp: PointPattern, covariates: Optional[CovariateStack], config: McmcConfig,
                   grid: Optional[GridSpec] = None, moment: Optional[MomentFit] = None) -> PosteriorSamples:
    """Posterior draws of (beta, sigma, phi) for a univariate LGCP on ``grid``."""
    pp.require_simple()
    grid = grid if grid is not None else covariates.grid
    frame = ModelFrame.from_covariates(grid, covariates)
    counts, betas, precond = _prepare([pp], frame)
    moment = moment or _mcm(pp, frame, betas[0])
    _grid_check(frame.grid, moment.phi)
    phi_mean = config.log_phi_mean if config.log_phi_mean is not None else math.log(moment.phi)
    phi0 = math.exp(phi_mean)
    torus = _torus_for(frame.grid, phi0, config.torus_factor)
    model = _LatentModel(counts, frame.Z, frame.grid, [[1.0]], torus, [phi0])
    model.use_lik = config.likelihood
    ls0 = math.log(max(moment.sigma, 0.1)) if config.likelihood else config.log_sigma_mean
    lp0 = math.log(moment.phi) if config.likelihood else phi_mean
    beta0 = betas if config.likelihood else np.zeros_like(betas)
    chain = _Chain(model, config, beta0, [ls0], [lp0], [phi_mean], precond)
    b, s, p, lm, lsd, acc = chain.run(config.store_latent)
    return PosteriorSamples(b, s, p, list(frame.covariate_names), [""], None, lm, lsd, acc)


def fit_bivariate(pp1: PointPattern, pp2: PointPattern, covariates: Optional[CovariateStack], sign: int,
                  config: McmcConfig, grid: Optional[GridSpec] = None,
                  moments: Optional[tuple] = None, names=("1", "2")) -> PosteriorSamples:
    """Posterior draws for the signed-LMC bivariate LGCP with fixed ``sign``."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    pp1.require_simple()
    pp2.require_simple()
    grid = grid if grid is not None else covariates.grid
    frame = ModelFrame.from_covariates(grid, covariates)
    counts, betas, precond = _prepare([pp1, pp2], frame)
    if moments is None:
        moments = (_mcm(pp1, frame, betas[0]), _mcm(pp2, frame, betas[1]))
    m1, m2 = moments
    _grid_check(frame.grid, min(m1.phi, m2.phi))
    lphi = np.log([m1.phi, m2.phi])
    phi_means = np.array([lphi[0], lphi[1], lphi.mean()])
    if config.log_phi_mean is not None:
        phi_means[:] = config.log_phi_mean
    torus = _torus_for(frame.grid, float(np.exp(phi_means).max()), config.torus_factor)
    loading = [[1.0, 0.0, 1.0], [0.0, 1.0, float(sign)]]
    model = _LatentModel(counts, frame.Z, frame.grid, loading, torus, np.exp(phi_means))
    model.use_lik = config.likelihood
    if config.likelihood:
        v1, v2 = max(m1.sigma, 0.1) ** 2, max(m2.sigma, 0.1) ** 2
        vw = 0.5 * min(v1, v2)
        ls0 = 0.5 * np.log([max(v1 - vw, 0.01), max(v2 - vw, 0.01), vw])
        beta0 = betas
    else:
        ls0 = np.full(3, config.log_sigma_mean)
        beta0 = np.zeros_like(betas)
    chain = _Chain(model, config, beta0, ls0, phi_means, phi_means, precond)
    b, s, p, lm, lsd, acc = chain.run(config.store_latent)
    return PosteriorSamples(b, s, p, list(frame.covariate_names), ["w1", "w2", "w"], int(sign), lm, lsd,
                            acc, process_names=list(names))


# ---------------------------------------------------------------- posterior products

@dataclass
class Curve:
    radii: np.ndarray
    median: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def posterior_correlation_curves(s: PosteriorSamples, radii) -> dict:
    """Median and 95% pointwise band of log-intensity correlation curves.

    Univariate: ``corr``. Bivariate: ``marginal_<name>`` for each process and ``cross``.
    """
    radii = np.asarray(radii, dtype=float)
    if s.n_draws == 0:
        raise ValueError("no posterior draws")
    curves = {}
    if not s.bivariate:
        draws = {"corr": np.array([exp_correlation(radii, s.phi[i, 0]) for i in range(s.n_draws)])}
    else:
        draws = {f"marginal_{s.process_names[0]}": [], f"marginal_{s.process_names[1]}": [], "cross": []}
        for i in range(s.n_draws):
            p = s.lmc(i)
            draws[f"marginal_{s.process_names[0]}"].append(marginal_corr_e(radii, p, 1))
            draws[f"marginal_{s.process_names[1]}"].append(marginal_corr_e(radii, p, 2))
            draws["cross"].append(cross_corr_e(radii, p))
        draws = {k: np.array(v) for k, v in draws.items()}
    for k, v in draws.items():
        lo, med, hi = np.quantile(v, [0.025, 0.5, 0.975], axis=0)
        curves[k] = Curve(radii, med, lo, hi)
    return curves


@dataclass
class RatioMap:
    grid: GridSpec
    median: np.ndarray
    plus: np.ndarray
    cross: np.ndarray


def _draw_indices(n_draws: int, n_sim: int) -> np.ndarray:
    return np.linspace(0, n_draws - 1, n_sim).round().astype(int)


def _process_field(s: PosteriorSamples, i: int, process: int, std_fields: dict) -> np.ndarray:
    """Latent field e_k for draw i built from shared standard-normal torus noise."""
    if not s.bivariate:
        sig, phi = s.sigma[i, 0], s.phi[i, 0]
        return -0.5 * sig ** 2 + sig * std_fields["apply"](0, phi)
    load = [1.0, 0.0, 1.0] if process == 0 else [0.0, 1.0, float(s.sign)]
    e = np.zeros(std_fields["shape"])
    var = 0.0
    for j in range(3):
        if load[j]:
            sig = s.sigma[i, j]
            var += sig ** 2
            e = e + load[j] * sig * std_fields["apply"](j, s.phi[i, j])
    return e - 0.5 * var


def intensity_ratio_map(s_a: PosteriorSamples, s_b: PosteriorSamples, frame_a: ModelFrame,
                        frame_b: ModelFrame, n_sim: int = 1000, seed=0, process: int = 0,
                        level: float = 0.99) -> RatioMap:
    """Median of Lambda_a / Lambda_b per cell over posterior draws, with cells flagged
    where the ``level`` interval of the ratio lies above 1 (plus) or below 1 (cross).

    Both intensities of a draw share the same standard-normal latent noise.
    """
    if not frame_a.grid.compatible(frame_b.grid) or not np.array_equal(frame_a.grid.mask, frame_b.grid.mask):
        raise ValueError("ratio map needs both fits on the same grid and mask")
    grid = frame_a.grid
    ia = _draw_indices(s_a.n_draws, n_sim)
    ib = _draw_indices(s_b.n_draws, n_sim)
    phi_max = float(max(s_a.phi.max(), s_b.phi.max()))
    torus = _torus_for(grid, phi_max)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n_sim)
    J = max(s_a.sigma.shape[1], s_b.sigma.shape[1])

    def one(t):
        rng = np.random.default_rng(children[t])
        noise = rng.standard_normal((J,) + torus)
        cache = {}

        def apply(j, phi):
            key = (j, float(phi))
            if key not in cache:
                cache[key] = CirculantEmbedding(grid, phi, torus=torus).apply(noise[j])[grid.mask]
            return cache[key]

        std = {"apply": apply, "shape": (grid.n_masked,)}
        la = frame_a.Z @ s_a.beta[ia[t], process] + _process_field(s_a, ia[t], process, std)
        lb = frame_b.Z @ s_b.beta[ib[t], process] + _process_field(s_b, ib[t], process, std)
        return la - lb

    log_ratio = np.array(pmap(one, range(n_sim)))
    a = (1 - level) / 2
    lo, med, hi = np.quantile(log_ratio, [a, 0.5, 1 - a], axis=0)
    median = scatter(grid, np.exp(med), np.nan)
    plus = scatter(grid, lo > 0, 0).astype(bool)
    cross = scatter(grid, hi < 0, 0).astype(bool)
    return RatioMap(grid, median, plus, cross)


def fitted_cross_k(s: PosteriorSamples, frame: ModelFrame, n_sim: int, radii, seed=0,
                   window: Optional[Window] = None, level: float = 0.95) -> KResult:
    """Pointwise envelope of cross-K over bivariate patterns simulated from posterior draws.

    Each simulated pattern's cross-K uses the draw's first-order intensities.
    """
    if not s.bivariate:
        raise ValueError("fitted cross-K needs bivariate samples")
    radii = np.asarray(radii, dtype=float)
    grid = frame.grid
    window = window or Window.box(*grid.extent)
    idx = _draw_indices(s.n_draws, n_sim)
    children = (seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)).spawn(n_sim)

    def one(t):
        i = idx[t]
        lam = [np.exp(frame.Z @ s.beta[i, k]) for k in range(2)]
        m = _FrameModel(frame, s.beta[i], s.lmc(i))
        (p1, p2), _ = simulate_bivariate_lgcp(m, children[t], window)
        if p1.n == 0 or p2.n == 0:
            return np.zeros(len(radii))
        f1 = IntensityField(grid, scatter(grid, lam[0]))
        f2 = IntensityField(grid, scatter(grid, lam[1]))
        return cross_k_inhom(p1, p2, f1.at(p1.points), f2.at(p2.points), radii, window)

    sims = np.array(pmap(one, range(n_sim)))
    lo, hi = _quantile_band(sims, level)
    return KResult(radii, None, sims.mean(0), lo, hi, n_sim, "cross", level, sims)


class _FrameModel(LgcpModel):
    """LgcpModel backed by a precomputed design matrix."""

    def __init__(self, frame: ModelFrame, beta, cov):
        object.__setattr__(self, "beta", np.asarray(beta, dtype=float))
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "grid", frame.grid)
        object.__setattr__(self, "covariates", None)
        object.__setattr__(self, "_Z", frame.Z)

    def design(self):
        return self._Z
