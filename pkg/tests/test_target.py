import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lorflow.target import (
    CliffordTorus,
    OffManifoldError,
    ProjectionUndefinedError,
    Sphere,
    WarpBoundsError,
    analytic_bounds,
    beta_eval,
    beta_grad,
    make_target,
    make_warp,
)

vec3 = arrays(np.float64, (3,), elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=50)
@given(w=vec3)
def test_sphere_projection_is_idempotent(w):
    S = Sphere(2)
    if np.linalg.norm(w) < 1e-6:
        return
    p = S.project(w)
    assert abs(np.linalg.norm(p) - 1.0) < 1e-14
    assert np.allclose(S.project(p), p, atol=1e-15)
    # nearest point: w - p is radial
    assert np.linalg.norm(np.cross(w, p)) < 1e-12 * max(1.0, np.linalg.norm(w))


@settings(max_examples=50)
@given(a=st.floats(0, 7), g=st.floats(0, 7), s=st.floats(0.1, 3))
def test_torus_projection(a, g, s):
    T = CliffordTorus()
    p = T.from_angles(a, g)
    assert T.dist_to_manifold(p) < 1e-14
    assert np.allclose(T.project(s * p), p, atol=1e-14)


def test_projection_undefined():
    with pytest.raises(ProjectionUndefinedError):
        Sphere(2).project(np.zeros(3))
    with pytest.raises(ProjectionUndefinedError):
        CliffordTorus().project(np.array([0.0, 0.0, 1.0, 0.0]))


def test_tangent_projection(sphere, torus):
    p = np.array([0.0, 0.0, 1.0])
    assert np.allclose(sphere.tangent_project(p, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 0.0])
    with pytest.raises(OffManifoldError):
        sphere.tangent_project(np.array([0.0, 0.0, 1.1]), np.ones(3))
    q = torus.from_angles(0.3, 1.1)
    w = torus.tangent_project(q, np.array([1.0, -2.0, 0.5, 4.0]))
    assert abs(w[0] * q[0] + w[1] * q[1]) < 1e-14
    assert abs(w[2] * q[2] + w[3] * q[3]) < 1e-14


def test_samples_on_manifold(sphere, torus):
    for T in (sphere, torus):
        pts = T.sample(1024, seed=3)
        assert np.max(T.dist_to_manifold(pts)) < 1e-12
        assert T.max_violation(pts) < 1e-12


def test_warp_bounds_certified(sphere, torus):
    W = make_warp("affine", 2.0, 1.0, 3, sphere, samples=1 << 14)
    assert (W.lam, W.Lam) == (1.0, 3.0)
    V = make_warp("affine", 2.0, np.sqrt(2.0), 1, torus, samples=1 << 14)
    assert V.lam == pytest.approx(1.0) and V.Lam == pytest.approx(3.0)
    C = make_warp("constant", 1.5, target=sphere, samples=256)
    assert (C.lam, C.Lam) == (1.5, 1.5) and C.is_constant
    with pytest.raises(WarpBoundsError):
        make_warp("affine", 1.0, 2.0, 1, sphere, samples=256)
    with pytest.raises(ValueError):
        make_warp("affine", 2.0, 1.0, 5, sphere, samples=256)


def test_beta_eval_and_grad(sphere):
    W = make_warp("affine", 2.0, 1.0, 3, sphere, samples=256)
    p = np.array([[0.0, 0.6], [0.0, 0.0], [1.0, -0.8]])
    assert np.allclose(beta_eval(W, p), [3.0, 1.2])
    g = beta_grad(W, p)
    assert g.shape == p.shape and np.all(g[2] == 1.0) and np.all(g[:2] == 0.0)
    assert analytic_bounds(W, sphere) == (1.0, 3.0)


def test_make_target_names():
    assert make_target("sphere2").K == 3
    assert make_target("clifford").K == 4
    with pytest.raises(ValueError):
        make_target("hyperbolic")
