import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lorflow import _pykernels as py
from lorflow import kernels

compiled = pytest.importorskip("lorflow._ckernels")

finite = st.floats(-2.0, 2.0, allow_nan=False, width=64)


def _maps(K, n):
    return arrays(np.float64, (K, n, n), elements=finite)


@settings(max_examples=25, deadline=None)
@given(u=_maps(3, 9), h=st.floats(0.01, 1.0))
def test_cell_density_and_laplacian_backends_agree(u, h):
    assert np.allclose(compiled.cell_density(u, h), py.cell_density(u, h), rtol=1e-12, atol=1e-12 / h**2)
    assert np.allclose(compiled.laplacian(u, h), py.laplacian(u, h), rtol=1e-12, atol=1e-12 / h**2)


@settings(max_examples=25, deadline=None)
@given(beta=arrays(np.float64, (8, 8), elements=st.floats(0.5, 3.0)), harmonic=st.booleans(),
       v=arrays(np.float64, (8, 8), elements=finite))
def test_operator_backends_agree(beta, harmonic, v):
    ax1, ay1 = compiled.face_coefficients(beta, harmonic)
    ax2, ay2 = py.face_coefficients(beta, harmonic)
    assert np.allclose(ax1, ax2, rtol=1e-14) and np.allclose(ay1, ay2, rtol=1e-14)
    assert np.allclose(compiled.apply_operator(ax1, ay1, v), py.apply_operator(ax2, ay2, v), atol=1e-12)
    assert compiled.quadratic_form(ax1, ay1, v) == pytest.approx(py.quadratic_form(ax2, ay2, v), rel=1e-12, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(c=arrays(np.float64, (6, 6), elements=finite))
def test_averages_agree(c):
    assert np.allclose(compiled.node_average(c), py.node_average(c), atol=1e-14)
    assert np.allclose(compiled.cell_average(c), py.cell_average(c), atol=1e-14)


def test_pcg_backends_agree():
    rng = np.random.default_rng(3)
    n = 33
    beta = 1.0 + rng.random((n, n))
    ax, ay = kernels.face_coefficients(beta)
    v0 = np.zeros((n, n))
    v0[0, :], v0[-1, :] = rng.random(n), rng.random(n)
    v0[:, 0], v0[:, -1] = rng.random(n), rng.random(n)
    a, b = v0.copy(), v0.copy()
    ia, ra = compiled.pcg(ax, ay, a, 1e-12, 5000)
    ib, rb = py.pcg(ax, ay, b, 1e-12, 5000)
    assert ra <= 1e-12 and rb <= 1e-12
    assert abs(ia - ib) <= 1
    assert np.max(np.abs(a - b)) < 1e-10


@pytest.mark.parametrize("code,K,radius", [(1, 3, 1.0), (2, 4, 1 / np.sqrt(2))])
def test_explicit_step_backends_bitwise(code, K, radius):
    rng = np.random.default_rng(0)
    n = 17
    u = py.project(rng.standard_normal((K, n, n)), code, radius)
    dens = rng.random((n, n))
    g = rng.standard_normal(K)
    a = compiled.explicit_step(u, dens, g, 1e-4, 1 / 16, code, radius)
    b = py.explicit_step(u, dens, g, 1e-4, 1 / 16, code, radius)
    assert np.array_equal(a, b)
    # boundary rows are copied, not stepped
    assert np.array_equal(a[:, 0], u[:, 0]) and np.array_equal(a[:, :, -1], u[:, :, -1])


@pytest.mark.parametrize("mod", [py, compiled])
def test_projection_undefined_at_origin(mod):
    w = np.zeros((3, 2, 2))
    w[2] = 1.0
    w[:, 1, 1] = 0.0
    with pytest.raises(py.ProjectionError):
        mod.project(w, 1, 1.0)
    t = np.ones((4, 3))
    t[2:, 0] = 0.0
    with pytest.raises(py.ProjectionError):
        mod.project(t, 2, 0.5)


@pytest.mark.parametrize("mod", [py, compiled])
def test_explicit_step_flags_non_finite(mod):
    n = 5
    u = np.zeros((3, n, n))
    u[2] = 1.0
    dens = np.zeros((n, n))
    dens[2, 2] = np.inf
    with pytest.raises(FloatingPointError):
        mod.explicit_step(u, dens, np.array([0.0, 0.0, 1.0]), 0.1, 0.25, 1, 1.0)


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")
