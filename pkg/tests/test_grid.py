import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorflow.grid import (
    Grid,
    MapField,
    NonFiniteFieldError,
    OutsideDomainError,
    ScalarField,
    ball_energy,
    ball_energy_map,
    dirichlet_energy,
    gradient_sq,
    interpolate,
    laplacian,
    read_field_csv,
    write_field_csv,
)


def test_grid_spacing_and_coords():
    g = Grid(129)
    assert g.h == 1.0 / 128
    assert g.coords[0] == 0.0 and g.coords[-1] == 1.0
    with pytest.raises(ValueError):
        Grid(2)


def test_linear_field_energy_is_exact():
    g = Grid(17)
    X, Y = g.mesh()
    f = ScalarField(g, 3 * X - 2 * Y)
    assert np.allclose(gradient_sq(f), 13.0)
    assert dirichlet_energy(f) == pytest.approx(6.5, rel=1e-13)
    assert np.max(np.abs(laplacian(f))) < 1e-9


def test_energy_gradient_is_scaled_laplacian():
    # d/du_i of sum_c 1/2 |grad u|^2 h^2 equals -h^2 (Lap_h u)_i at interior nodes
    rng = np.random.default_rng(1)
    g = Grid(9)
    f = ScalarField(g, rng.standard_normal((9, 9)))
    lap = laplacian(f)
    eps = 1e-6
    for i, j in [(1, 1), (4, 5), (7, 3)]:
        p = f.values.copy()
        m = f.values.copy()
        p[i, j] += eps
        m[i, j] -= eps
        fd = (dirichlet_energy(ScalarField(g, p)) - dirichlet_energy(ScalarField(g, m))) / (2 * eps)
        assert fd == pytest.approx(-g.h ** 2 * lap[i, j], rel=1e-6, abs=1e-9)


def test_non_finite_fields_rejected():
    g = Grid(5)
    bad = np.zeros((5, 5))
    bad[2, 2] = np.nan
    with pytest.raises(NonFiniteFieldError):
        ScalarField(g, bad)
    with pytest.raises(ValueError):
        MapField(g, np.zeros((5, 5)))


@pytest.mark.parametrize("r", [0.03, 0.1, 0.27])
def test_ball_energy_map_matches_direct_sum(r):
    rng = np.random.default_rng(2)
    g = Grid(33)
    f = ScalarField(g, rng.standard_normal((33, 33)))
    emap = ball_energy_map(gradient_sq(f), g.h, r)
    for i, j in [(0, 0), (16, 16), (5, 30), (32, 10)]:
        assert emap[i, j] == pytest.approx(ball_energy(f, (i * g.h, j * g.h), r), rel=1e-10, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(r1=st.floats(0.02, 0.3), r2=st.floats(0.02, 0.3), seed=st.integers(0, 100))
def test_ball_energy_monotone_in_radius(r1, r2, seed):
    lo, hi = sorted((r1, r2))
    rng = np.random.default_rng(seed)
    g = Grid(17)
    d = rng.random((16, 16))
    assert np.all(ball_energy_map(d, g.h, lo) <= ball_energy_map(d, g.h, hi) + 1e-12)


def test_interpolation_exact_on_bilinear():
    g = Grid(11)
    X, Y = g.mesh()
    f = ScalarField(g, 1 + 2 * X - Y + 3 * X * Y)
    for p in [(0.0, 0.0), (0.33, 0.71), (1.0, 0.5), (0.95, 1.0)]:
        assert interpolate(f, p) == pytest.approx(1 + 2 * p[0] - p[1] + 3 * p[0] * p[1], abs=1e-14)
    with pytest.raises(OutsideDomainError):
        interpolate(f, (1.2, 0.5))
    with pytest.raises(OutsideDomainError):
        interpolate(f, (0.5, -0.01))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.sampled_from([1, 3]), t=st.floats(0, 10, allow_nan=False))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, seed, K, t):
    rng = np.random.default_rng(seed)
    g = Grid(6)
    vals = rng.standard_normal((K, 6, 6)) * 10.0 ** rng.integers(-12, 12)
    f = ScalarField(g, vals[0]) if K == 1 else MapField(g, vals)
    path = tmp_path_factory.mktemp("csv") / "f.csv"
    write_field_csv(path, f, t=t)
    back, meta = read_field_csv(path)
    assert np.array_equal(back.values, f.values)
    assert meta["n"] == 6 and meta["K"] == K and meta["t"] == t


def test_csv_header_with_point(tmp_path):
    g = Grid(4)
    f = MapField(g, np.ones((3, 4, 4)))
    write_field_csv(tmp_path / "b.csv", f, header="bubble x_i=0.5,0.25 r_i=0.01 t_i=0.3")
    _, meta = read_field_csv(tmp_path / "b.csv")
    assert meta["x_i"] == (0.5, 0.25)
    assert meta["r_i"] == 0.01 and meta["tags"] == ["bubble"]
    assert math.isclose(meta["t_i"], 0.3)
