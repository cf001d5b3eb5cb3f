"""Spatial point-pattern analysis: inhomogeneous K and cross-K diagnostics,
Gaussian random fields by circulant embedding, and univariate/bivariate
log-Gaussian Cox process simulation and fitting."""

from .geom import GridSpec, PointPattern, Projection, Window, load_window
from .grf import ExpCovParams, LmcParams, cross_corr_e, exp_correlation, marginal_corr_e
from .fit import McmcConfig, PosteriorSamples, fit_bivariate, fit_univariate, min_contrast
from .ripley import KResult, cross_k_inhom, csr_test, isotropic_correction, k_inhom
from .sim import LgcpModel, simulate_bivariate_lgcp, simulate_lgcp

__version__ = "0.1.0"
