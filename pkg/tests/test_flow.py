import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bump_map, random_sphere_map
from lorflow.diagnostics import glued_bubble
from lorflow.elliptic import EllipticOperator, extend_boundary
from lorflow.flow import (
    ConfigError,
    DescentControl,
    DescentStalled,
    FlowConfig,
    FlowProblem,
    default_radii,
    descent_step,
    energies,
    flow_step,
    initial_state,
    l2_inner,
    lorentz_energy,
    reduced_energy,
    reduced_gradient,
    run,
    tension_residual,
)
from lorflow.grid import Grid, MapField, ScalarField, dirichlet_energy
from lorflow.harness import reference_hmhf
from lorflow.target import make_target, make_warp


def const_map(n, p):
    return MapField(Grid(n), np.broadcast_to(np.asarray(p, float)[:, None, None], (len(p), n, n)).copy())


def test_config_validation():
    with pytest.raises(ConfigError):
        FlowConfig(tau_factor=0.3).validate()
    with pytest.raises(ConfigError):
        FlowConfig(tau_factor=0.0).validate()
    FlowConfig(tau_factor=0.25).validate()
    FlowConfig(tau_factor=0.5, mode="descent").validate()
    with pytest.raises(ConfigError):
        FlowConfig(coupling_order="jacobi").validate()
    with pytest.raises(ConfigError):
        FlowConfig.from_dict({"n": 33, "dt": 1.0})
    cfg = FlowConfig(n=33, epsilon1=2.0)
    assert FlowConfig.from_dict(cfg.to_dict()) == cfg


def test_default_radii():
    assert default_radii(1 / 128) == [0.2, 0.1, 0.05, 0.025, 0.015625]
    r = default_radii(1 / 64)
    assert r[-1] == 2 / 64 and r == sorted(r, reverse=True)


def test_lorentz_energy_examples(sphere, height_warp):
    n = 129
    u = const_map(n, (0.0, 0.0, 1.0))
    X, _ = u.grid.mesh()
    assert lorentz_energy(u, ScalarField(u.grid, np.full((n, n), 2.0)), height_warp) == 0.0
    assert lorentz_energy(u, ScalarField(u.grid, X), height_warp) == pytest.approx(-1.5, abs=1e-3)
    w = random_sphere_map(33, seed=7, amp=2.0)
    v = extend_boundary(w, lambda X, Y: X * Y + np.sin(2 * Y), height_warp)
    op = EllipticOperator.for_map(w, height_warp)
    E_g = dirichlet_energy(w) - 0.5 * op.quadratic_form(v)
    assert lorentz_energy(w, v, height_warp) == pytest.approx(E_g, rel=1e-10)


def test_constant_data_is_exact_fixed_point(sphere, height_warp):
    p = np.array([0.6, 0.0, 0.8])
    prob = FlowProblem(sphere, height_warp, const_map(17, p), 1.5)
    cfg = FlowConfig(n=17)
    s = initial_state(prob, cfg)
    assert np.all(s.v.values == 1.5)
    s2 = flow_step(s, cfg, sphere, height_warp, prob)
    assert np.array_equal(s2.u.values, s.u.values)
    _, norm = tension_residual(s.u, s.v, height_warp, sphere)
    assert norm == 0.0


def test_single_step_moves_toward_gradient_of_beta(sphere, height_warp):
    n = 33
    prob = FlowProblem(sphere, height_warp, const_map(n, (1.0, 0.0, 0.0)), lambda X, Y: X)
    cfg = FlowConfig(n=n)
    s = initial_state(prob, cfg)
    h = prob.grid.h
    e0 = energies(s.u.values, s.v.values, s.op, h)
    s1 = flow_step(s, cfg, sphere, height_warp, prob)
    e1 = energies(s1.u.values, s1.v.values, s1.op, h)
    du = s1.u.values - s.u.values
    assert np.all(du[2, 1:-1, 1:-1] > 0)
    assert e1.E_g < e0.E_g
    tau = cfg.tau(prob.grid)
    ut2 = l2_inner(du, du, h) / tau ** 2
    assert (e1.E_g - e0.E_g) == pytest.approx(-tau * ut2, rel=0.05)


def test_linearized_decay_rate(sphere):
    n = 33
    g = Grid(n)
    X, Y = g.mesh()
    w = np.zeros((3, n, n))
    w[2] = 1.0
    w[0] = 0.01 * np.sin(np.pi * X) * np.sin(np.pi * Y)
    W = make_warp("constant", 2.0, target=sphere, samples=64)
    prob = FlowProblem(sphere, W, MapField(g, sphere.project(w)), lambda X, Y: X)
    cfg = FlowConfig(n=n, t_max=0.05, stop_ut_tol=None, snap_every=10_000)
    res = run(cfg, prob)
    a0 = res.snapshots[0].u[0, n // 2, n // 2]
    a1 = res.final.u.values[0, n // 2, n // 2]
    rate = -math.log(a1 / a0) / res.final.t
    assert rate == pytest.approx(2 * math.pi ** 2, rel=0.05)


def test_constant_beta_decouples_and_matches_reference(sphere):
    n = 33
    u0 = bump_map(n, 1.5, twist=2.0)
    W = make_warp("constant", 1.7, target=sphere, samples=64)
    prob = FlowProblem(sphere, W, u0, lambda X, Y: np.cos(3 * X) * Y)
    cfg = FlowConfig(n=n)
    s = initial_state(prob, cfg)
    v0 = s.v.values
    for _ in range(200):
        s = flow_step(s, cfg, sphere, W, prob)
        assert s.v.values is v0
    ref = reference_hmhf(u0.values, 200, cfg.tau(prob.grid), prob.grid.h)
    assert np.max(np.abs(ref - s.u.values)) <= 1e-12


def test_zero_data_rows_identical(sphere, height_warp):
    prob = FlowProblem(sphere, height_warp, const_map(17, (0.0, 0.0, 1.0)), 0.0)
    res = run(FlowConfig(n=17, t_max=0.01, stop_ut_tol=None), prob)
    assert res.termination == "t_max"
    rows = [{k: v for k, v in r.items() if k not in ("step", "t")} for r in res.ledger]
    assert len(rows) > 10 and all(r == rows[0] for r in rows)


@pytest.mark.parametrize("order", ["lagged", "gauss_seidel"])
def test_run_invariants(sphere, height_warp, order):
    n = 33
    prob = FlowProblem(sphere, height_warp, bump_map(n, 1.8, twist=1.0), lambda X, Y: 0.5 * X)
    res = run(FlowConfig(n=n, t_max=0.05, coupling_order=order, snap_every=100), prob)
    assert res.termination in ("t_max", "converged")
    Eg = res.column("E_g")
    assert np.all(np.diff(Eg) <= 1e-8 * np.maximum(1.0, np.abs(Eg[:-1])))
    assert res.max_dist <= 1e-12
    assert res.boundary_drift == 0.0
    assert np.all(np.isfinite(res.column("wp4_ratio")))


def test_reduced_energy_constant_beta_shift(sphere):
    W = make_warp("constant", 2.0, target=sphere, samples=64)
    psi = lambda X, Y: X + Y * Y
    a, b = random_sphere_map(17, seed=1), random_sphere_map(17, seed=2, amp=2.0)
    da = reduced_energy(a, W, psi) - dirichlet_energy(a)
    db = reduced_energy(b, W, psi) - dirichlet_energy(b)
    assert da == pytest.approx(db, rel=1e-9)


def test_reduced_energy_lower_bound(sphere, height_warp):
    n = 17
    psi = lambda X, Y: 2 * X - Y
    ext = extend_boundary(const_map(n, (0.0, 0.0, 1.0)), psi, height_warp)
    bound = -height_warp.Lam * dirichlet_energy(ext)
    for seed in range(100):
        u = random_sphere_map(n, seed=seed, modes=4, amp=3.0)
        assert reduced_energy(u, height_warp, psi) >= bound


def test_envelope_gradient_small_grid(sphere, height_warp):
    n = 33
    u = bump_map(n, 1.2, twist=2.0)
    g = u.grid
    X, Y = g.mesh()
    psi = X
    op = EllipticOperator.for_map(u, height_warp)
    v, _ = op.solve(psi, 1e-13)
    G = reduced_gradient(u, ScalarField(g, v), height_warp, sphere)
    rng = np.random.default_rng(5)
    for _ in range(3):
        eta = rng.standard_normal(3)[:, None, None] * (np.sin(np.pi * X) * np.sin(2 * np.pi * Y))[None]
        eta = sphere.tangent_project(u.values, eta)
        eta /= math.sqrt(l2_inner(eta, eta, g.h))
        d = l2_inner(G, eta, g.h)
        errs = []
        for s in (1e-2, 1e-3):
            ep = reduced_energy(MapField(g, sphere.project(u.values + s * eta)), height_warp, psi, 1e-13, v)
            em = reduced_energy(MapField(g, sphere.project(u.values - s * eta)), height_warp, psi, 1e-13, v)
            errs.append(abs((ep - em) / (2 * s) - d))
        assert 50 <= errs[0] / errs[1] <= 200


def test_descent_at_critical_point_takes_no_step(sphere, height_warp):
    prob = FlowProblem(sphere, height_warp, const_map(9, (0.0, 0.0, 1.0)), 1.0)
    cfg = FlowConfig(n=9, mode="descent")
    res = run(cfg, prob)
    assert res.termination == "converged" and res.final.step_index == 0
    s = initial_state(prob, cfg)
    with pytest.raises(DescentStalled):
        descent_step(s, prob, DescentControl(step=1e-3), cfg)


def test_descent_strictly_decreasing(sphere, height_warp):
    n = 17
    prob = FlowProblem(sphere, height_warp, bump_map(n, 1.5, twist=1.0), lambda X, Y: X)
    res = run(FlowConfig(n=n, mode="descent", t_max=10.0, max_steps=300, stop_ut_tol=1e-8), prob)
    eps = np.array(res.descent_eps)
    assert len(eps) > 5 and np.all(np.diff(eps) < 0)


def test_tension_discriminates_bubble(sphere, height_warp):
    u = glued_bubble(Grid(65), rho=0.05)
    v = ScalarField(u.grid, np.zeros((65, 65)))
    assert tension_residual(u, v, height_warp, sphere)[1] > 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_is_reported(sphere, height_warp, monkeypatch):
    prob = FlowProblem(sphere, height_warp, bump_map(17), lambda X, Y: X)
    cfg = FlowConfig(n=17, t_max=0.01)
    s = initial_state(prob, cfg)
    # gradient density overflows to inf in the coupling term
    s.v = ScalarField(prob.grid, 1e200 * s.v.values)
    with pytest.raises(FloatingPointError, match="numeric_blowup"):
        flow_step(s, cfg, sphere, height_warp, prob)

    import lorflow.flow as flow_mod
    real = flow_mod.flow_step

    def failing(state, *a, **k):
        if state.step_index == 3:
            raise FloatingPointError("numeric_blowup: injected")
        return real(state, *a, **k)

    monkeypatch.setattr(flow_mod, "flow_step", failing)
    res = run(cfg, prob)
    assert res.termination == "numeric_blowup" and res.final.step_index == 3
    assert np.all(np.isfinite(res.final.u.values))


def test_torus_flow_keeps_constraint(torus):
    n = 17
    g = Grid(n)
    X, Y = g.mesh()
    u0 = MapField(g, torus.from_angles(2 * np.pi * X, 0.4 * np.sin(np.pi * X) * np.sin(np.pi * Y)))
    W = make_warp("affine", 2.0, math.sqrt(2.0), 1, torus, samples=1 << 10)
    res = run(FlowConfig(n=n, t_max=0.02, stop_ut_tol=None), FlowProblem(torus, W, u0, lambda X, Y: X))
    assert res.max_dist <= 1e-12 and res.boundary_drift == 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), tf=st.floats(0.05, 0.25))
def test_single_step_dissipates(seed, tf):
    S = make_target("sphere2")
    W = make_warp("affine", 2.0, 1.0, 3, S, samples=256)
    prob = FlowProblem(S, W, random_sphere_map(17, seed=seed, amp=1.5), lambda X, Y: X - Y)
    cfg = FlowConfig(n=17, tau_factor=tf)
    s = initial_state(prob, cfg)
    h = prob.grid.h
    e0 = energies(s.u.values, s.v.values, s.op, h).E_g
    s1 = flow_step(s, cfg, S, W, prob)
    assert energies(s1.u.values, s1.v.values, s1.op, h).E_g <= e0 + 1e-10
