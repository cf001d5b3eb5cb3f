import math

import numpy as np
import pytest
from scipy import stats

from ppkit.covar import CovariateStack
from ppkit.geom import GridSpec, Window, bin_to_grid
from ppkit.grf import ExpCovParams, LmcParams
from ppkit.kernel import IntensityField
from ppkit.ripley import cross_diagnose, diagnose
from ppkit.sim import LgcpModel, mean_intensity, simulate_bivariate_lgcp, simulate_lgcp, simulate_poisson

BOX = Window.box(0, 0, 10, 10)
G16 = GridSpec.for_window(BOX, 16, 16)


def test_mean_intensity_constants():
    f = mean_intensity(LgcpModel(np.zeros(1), ExpCovParams(1, 4), G16))
    assert np.all(f.values == 1.0)
    f = mean_intensity(LgcpModel(np.array([math.log(2)]), ExpCovParams(1, 4), G16))
    assert np.allclose(f.values, 2.0)


def test_mean_intensity_six_covariates_rowwise():
    g = GridSpec.for_window(BOX, 4, 4)
    rng = np.random.default_rng(0)
    names = ["logpop", "elev", "mdis", "lon", "lat", "lon*lat"]
    layers = {n: rng.normal(size=g.shape) for n in names}
    beta = rng.normal(scale=0.3, size=7)
    f = mean_intensity(LgcpModel(beta, ExpCovParams(1, 4), g, CovariateStack(g, layers)))
    for iy in range(4):
        for ix in range(4):
            eta = beta[0] + sum(b * layers[n][iy, ix] for b, n in zip(beta[1:], names))
            assert f.values[iy, ix] == pytest.approx(math.exp(eta), rel=1e-12)


def test_model_validation_and_overflow():
    with pytest.raises(ValueError):
        LgcpModel(np.zeros(2), ExpCovParams(1, 4), G16)
    with pytest.raises(OverflowError):
        mean_intensity(LgcpModel(np.array([800.0]), ExpCovParams(1, 4), G16))


def test_poisson_rate_identity():
    g = GridSpec.for_window(Window.box(0, 0, 1, 1), 4, 4)
    f = IntensityField(g, np.full(g.shape, 5.0))
    rng = np.random.default_rng(1)
    n = np.array([simulate_poisson(f, rng).n for _ in range(10_000)])
    assert abs(n.mean() - 5) < 3 * n.std(ddof=1) / 100


def test_poisson_zero_field():
    f = IntensityField(G16, np.zeros(G16.shape))
    assert all(simulate_poisson(f, s).n == 0 for s in range(20))


def test_poisson_step_field_regions():
    vals = np.ones(G16.shape)
    vals[:, 8:] = 3.0
    f = IntensityField(G16, vals)
    left, right = [], []
    for s in range(2000):
        pp = simulate_poisson(f, s)
        left.append(np.sum(pp.points[:, 0] < 5))
        right.append(np.sum(pp.points[:, 0] >= 5))
    left, right = np.array(left), np.array(right)
    for c, mu in ((left, 50), (right, 150)):
        assert abs(c.mean() - mu) < 3 * math.sqrt(mu / len(c))
        assert c.var(ddof=1) == pytest.approx(mu, rel=0.1)
    assert abs(np.corrcoef(left, right)[0, 1]) < 3 / math.sqrt(len(left))


def test_conditional_cell_counts_are_poisson():
    g = GridSpec.for_window(BOX, 4, 4)
    vals = np.random.default_rng(3).uniform(0.2, 1.5, g.shape)
    f = IntensityField(g, vals)
    counts = np.array([bin_to_grid(simulate_poisson(f, s), g)[1, 2] for s in range(3000)])
    mu = vals[1, 2] * g.cell_area
    kmax = int(stats.poisson.ppf(0.999, mu))
    obs = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
    p = stats.poisson.pmf(np.arange(kmax + 1), mu)
    p[-1] = stats.poisson.sf(kmax - 1, mu)
    assert stats.chisquare(obs, p * len(counts)).pvalue > 0.01


def test_points_inside_irregular_window(lshape):
    g = GridSpec.for_window(lshape, 7, 7)
    f = IntensityField(g, np.full(g.shape, 2.0))
    pp = simulate_poisson(f, 4, lshape)
    assert pp.n > 0 and np.all(lshape.contains(pp.points))


def test_lgcp_mean_count_and_intercept_scaling():
    m = LgcpModel(np.zeros(1), ExpCovParams(1.0, 4.0), G16)
    m3 = LgcpModel(np.array([math.log(3)]), ExpCovParams(1.0, 4.0), G16)
    n = np.array([simulate_lgcp(m, s, BOX)[0].n for s in range(500)])
    n3 = np.array([simulate_lgcp(m3, s, BOX)[0].n for s in range(500, 1000)])
    assert abs(n.mean() - 100) < 3 * n.std(ddof=1) / math.sqrt(500)
    assert abs(n3.mean() - 300) < 3 * n3.std(ddof=1) / math.sqrt(500)


def test_lgcp_deterministic():
    m = LgcpModel(np.zeros(1), ExpCovParams(1.0, 4.0), G16)
    a, ea = simulate_lgcp(m, 9, BOX)
    b, eb = simulate_lgcp(m, 9, BOX)
    assert np.array_equal(a.points, b.points) and np.array_equal(ea.values, eb.values)
    with pytest.raises(ValueError):
        simulate_bivariate_lgcp(m, 1)


def _bivariate(sign, sigma_w=1.5):
    lmc = LmcParams(ExpCovParams(0.3, 2.0), ExpCovParams(0.3, 2.0), ExpCovParams(sigma_w, 2.0), sign)
    return LgcpModel(np.zeros((2, 1)), lmc, GridSpec.for_window(BOX, 32, 32))


def _small_r_departure(sign, sigma_w, seeds):
    radii = np.linspace(0, 2.5, 11)
    out = []
    for s in seeds:
        (p1, p2), _ = simulate_bivariate_lgcp(_bivariate(sign, sigma_w), s, BOX)
        env = cross_diagnose(p1, p2, G16, radii, n_sim=39, seed=s, estimator="homogeneous")
        out.append(env.departure()[1:4])
    return np.array(out)


@pytest.mark.slow
def test_bivariate_regimes():
    seeds = range(10)
    rep = _small_r_departure(-1, 1.5, seeds)
    assert np.mean(np.any(rep == -1, axis=1)) >= 0.8
    att = _small_r_departure(+1, 1.5, seeds)
    assert np.mean(np.any(att == 1, axis=1)) >= 0.8
    ind = _small_r_departure(-1, 0.0, seeds)
    assert np.mean(np.all(ind == 0, axis=1)) >= 0.9


def test_bivariate_shares_common_component():
    (p1, p2), (e1, e2, w) = simulate_bivariate_lgcp(_bivariate(-1), 3, BOX)
    # with sign -1: e1 = -s1/2 + W1 + W and e2 = -s2/2 + W2 - W, so removing W decorrelates them
    r = np.corrcoef((e1.values - w.values).ravel(), (e2.values + w.values).ravel())[0, 1]
    assert abs(r) < 0.3
    assert np.corrcoef(e1.values.ravel(), e2.values.ravel())[0, 1] < -0.5
