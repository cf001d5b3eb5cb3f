import numpy as np
import pytest

from ppkit.geom import GridSpec, PointPattern, Window


@pytest.fixture
def unit_square():
    return Window.box(0, 0, 1, 1)


@pytest.fixture
def box10():
    return Window.box(0, 0, 10, 10)


@pytest.fixture
def lshape():
    """Irregular L-shaped window with a notch, area 75."""
    return Window(([(0, 0), (10, 0), (10, 5), (5, 5), (5, 10), (0, 10), (0, 0)],))


@pytest.fixture
def grid32(box10):
    return GridSpec.for_window(box10, 32, 32)


def uniform_pattern(window, n, seed):
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = window.bounds
    out = []
    while len(out) < n:
        p = rng.uniform([x0, y0], [x1, y1], size=(2 * n, 2))
        out.extend(p[window.contains(p)].tolist())
    return PointPattern(np.array(out[:n]), window, simple=True)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
