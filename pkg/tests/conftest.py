import numpy as np
import pytest

from lorflow.grid import Grid, MapField
from lorflow.target import CliffordTorus, Sphere, make_warp


@pytest.fixture
def sphere():
    return Sphere(2)


@pytest.fixture
def torus():
    return CliffordTorus()


@pytest.fixture
def height_warp(sphere):
    # beta = 2 + y_3 on the unit sphere, bounds (1, 3)
    return make_warp("affine", 2.0, 1.0, 3, sphere, samples=1 << 12)


def bump_map(n, amp=2.0 / np.pi, twist=0.0):
    g = Grid(n)
    X, Y = g.mesh()
    th = amp * np.sin(np.pi * X) * np.sin(np.pi * Y)
    return MapField(g, np.stack([np.sin(th) * np.cos(twist * Y), np.sin(th) * np.sin(twist * Y), np.cos(th)]))


def random_sphere_map(n, seed=0, modes=3, amp=1.0):
    """Smooth on-sphere map with north-pole boundary values."""
    rng = np.random.default_rng(seed)
    g = Grid(n)
    X, Y = g.mesh()
    w = np.zeros((3, n, n))
    for _ in range(modes):
        a, b = rng.integers(1, 4, size=2)
        w += amp * rng.standard_normal(3)[:, None, None] * (np.sin(a * np.pi * X) * np.sin(b * np.pi * Y))[None]
    w[2] += 1.0
    w[:, 0, :] = w[:, -1, :] = w[:, :, 0] = w[:, :, -1] = np.array([0.0, 0.0, 1.0])[:, None]
    return MapField(g, w / np.linalg.norm(w, axis=0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=int):
            terminalreporter.write_line(LINES[key])
