import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppkit.geom import GridSpec, PointPattern, Window
from ppkit.kernel import default_bandwidth, edge_mass, kernel_intensity

from conftest import uniform_pattern


def test_gaussian_decay_far_from_cluster():
    w = Window.box(0, 0, 100, 100)
    rng = np.random.default_rng(0)
    pp = PointPattern(5 + 0.2 * rng.standard_normal((30, 2)), w)
    f = kernel_intensity(pp, 1.0, GridSpec.for_window(w, 50, 50))
    far = f.grid.centers()[..., 0] > 25
    assert f.values[far].max() < 1e-8


@pytest.mark.parametrize("h", [0.3, 1.0])
def test_mass_preservation(box10, h):
    pp = uniform_pattern(box10, 200, 3)
    f = kernel_intensity(pp, h, GridSpec.for_window(box10, 64, 64))
    assert abs(f.integral() / pp.n - 1) < 0.05


def test_two_point_oracle():
    w = Window.box(0, 0, 10, 10)
    g = GridSpec.for_window(w, 100, 100)
    pts = np.array([[4.0, 5.0], [6.0, 5.5]])
    h = 0.8
    f = kernel_intensity(PointPattern(pts, w), h, g)
    u = np.array([5.05, 5.05])        # cell centre
    num = sum(math.exp(-((u - p) ** 2).sum() / (2 * h * h)) / (2 * math.pi * h * h) for p in pts)
    # edge integral by the product of 1-D normal masses over the square
    erf = np.vectorize(math.erf)
    mass = np.prod(0.5 * (erf((10 - u) / (h * math.sqrt(2))) - erf((0 - u) / (h * math.sqrt(2)))))
    assert f.at(u[None])[0] == pytest.approx(num / mass, rel=1e-3)
    # leave-one-out value at the first point only sees the second
    d2 = ((pts[0] - pts[1]) ** 2).sum()
    k = math.exp(-d2 / (2 * h * h)) / (2 * math.pi * h * h)
    e0 = edge_mass(pts[:1], g, h)[0]
    assert f.point_values[0] == pytest.approx(k / e0)


def test_errors(unit_square):
    one = PointPattern(np.array([[0.5, 0.5]]), unit_square)
    g = GridSpec.for_window(unit_square, 8, 8)
    with pytest.raises(ValueError):
        kernel_intensity(one, 0.1, g)
    two = PointPattern(np.array([[0.2, 0.5], [0.5, 0.5]]), unit_square)
    with pytest.raises(ValueError):
        kernel_intensity(two, 0.0, g)
    dup = PointPattern(np.array([[0.5, 0.5], [0.5, 0.5]]), unit_square)
    with pytest.raises(ValueError):
        kernel_intensity(dup, 0.1, g)


def test_bandwidth_degenerate():
    w = Window.box(-1, -1, 1, 1)
    pts = np.zeros((5, 2)) + np.array([[0, 0], [1e-9, 0], [2e-9, 0], [3e-9, 0], [4e-9, 0]])
    with pytest.raises(ValueError):
        default_bandwidth(PointPattern(pts, w))


def test_bandwidth_formula_oracle():
    rng = np.random.default_rng(42)
    pts = rng.standard_normal((100, 2))
    pp = PointPattern(pts, Window.box(-10, -10, 10, 10))
    hs = []
    for a in range(2):
        x = np.sort(pts[:, a])
        sd = math.sqrt(sum((v - x.mean()) ** 2 for v in x) / 99)
        # linear-interpolated quartiles, written out by hand
        def q(p):
            pos = p * 99
            lo = int(math.floor(pos))
            return x[lo] + (pos - lo) * (x[min(lo + 1, 99)] - x[lo])
        hs.append(0.9 * min(sd, (q(0.75) - q(0.25)) / 1.34) * 100 ** -0.2)
    assert default_bandwidth(pp) == pytest.approx(math.sqrt(hs[0] * hs[1]), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_bandwidth_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(40, 2))
    h1 = default_bandwidth(PointPattern(pts, Window.box(0, 0, 1, 1)))
    h2 = default_bandwidth(PointPattern(c * pts, Window.box(0, 0, c, c)))
    assert h2 == pytest.approx(c * h1, rel=1e-9)


def test_translation_equivariance(box10):
    pp = uniform_pattern(box10, 60, 9)
    g = GridSpec.for_window(box10, 20, 20)
    f = kernel_intensity(pp, 0.7, g)
    shift = np.array([3.0, -2.0])
    w2 = Window.box(3, -2, 13, 8)
    f2 = kernel_intensity(PointPattern(pp.points + shift, w2), 0.7, GridSpec.for_window(w2, 20, 20))
    assert np.allclose(f.values, f2.values, rtol=1e-9)


def test_doubling_points_doubles_field(box10):
    pp = uniform_pattern(box10, 150, 5)
    rng = np.random.default_rng(1)
    doubled = PointPattern(np.vstack([pp.points, pp.points + 1e-6 * rng.standard_normal(pp.points.shape)]), box10)
    g = GridSpec.for_window(box10, 20, 20)
    a = kernel_intensity(pp, 1.0, g).values
    b = kernel_intensity(doubled, 1.0, g).values
    assert np.allclose(b[5:15, 5:15] / a[5:15, 5:15], 2.0, rtol=0.05)
