"""Coupled stepper for the parabolic-elliptic flow and the reduced-energy descent.

A :class:`FlowState` always carries ``v = Phi(u)``, the constraint solved for
its own ``u``. One step moves ``u`` with the coupling evaluated at that ``v``
(the v-solve lags the u-move), projects back to N, then re-solves ``v`` for
the new map. Ledger rows are therefore evaluated at consistent pairs and
``E_g`` equals the reduced energy ``E(u) - Q_beta(Phi(u))/2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import kernels
from .elliptic import (
    DEFAULT_MAX_ITER_FACTOR,
    EllipticConvergenceError,
    EllipticOperator,
    SolveStats,
    boundary_values,
)
from .grid import Grid, MapField, ScalarField, ball_energy_map
from .target import TargetManifold, WarpFunction

_logger = logging.getLogger(__name__)

LEDGER_COLUMNS = (
    "step", "t", "E_u", "E_v", "Q_beta", "E_g", "ut_norm_sq", "max_grad", "wp4_ratio", "elliptic_iters",
)
TERMINATIONS = (
    "converged", "t_max", "concentration_detected", "numeric_blowup", "elliptic_no_convergence",
    "descent_stalled",
)


class ConfigError(ValueError):
    pass


def default_radii(h: float) -> list[float]:
    """Scan ladder 0.2, 0.1, 0.05, 0.025 and the resolution rung 2h*ceil(0.0125/2h)."""
    last = 2 * h * math.ceil(0.0125 / (2 * h))
    return [r for r in (0.2, 0.1, 0.05, 0.025) if r > last] + [last]


@dataclass
class FlowConfig:
    n: int = 129
    tau_factor: float = 0.2
    t_max: float = 1.0
    stop_ut_tol: float | None = 1e-6
    epsilon1: float = 1.0
    mode: str = "flow"
    deterministic: bool = True
    snap_every: int = 500
    scan_every: int = 10
    max_steps: int | None = None
    elliptic_tol: float = 1e-10
    face_avg: str = "arithmetic"
    max_iter_factor: int = DEFAULT_MAX_ITER_FACTOR
    coupling_order: str = "lagged"
    monitor_radius: float = 0.05
    # descent mode
    c1: float = 1e-4
    step_rule: str = "bb"
    min_step: float = 1e-14

    def validate(self) -> FlowConfig:
        if int(self.n) != self.n or self.n < 3:
            raise ConfigError(f"n must be an integer >= 3, got {self.n}")
        if self.mode not in ("flow", "descent"):
            raise ConfigError(f"mode must be 'flow' or 'descent', got {self.mode!r}")
        if self.mode == "flow" and not 0.0 < self.tau_factor <= 0.25:
            raise ConfigError(f"tau_factor must lie in (0, 0.25] for the explicit flow, got {self.tau_factor}")
        if not 0.0 < self.elliptic_tol <= 1e-6:
            raise ConfigError(f"elliptic tolerance must lie in (0, 1e-6], got {self.elliptic_tol}")
        if self.face_avg not in ("arithmetic", "harmonic"):
            raise ConfigError(f"face_avg must be arithmetic or harmonic, got {self.face_avg!r}")
        if self.coupling_order not in ("lagged", "gauss_seidel"):
            raise ConfigError(f"coupling_order must be lagged or gauss_seidel, got {self.coupling_order!r}")
        if self.step_rule not in ("bb", "grow"):
            raise ConfigError(f"step_rule must be 'bb' or 'grow', got {self.step_rule!r}")
        if not self.epsilon1 > 0.0:
            raise ConfigError("epsilon1 must be positive")
        if self.t_max <= 0.0:
            raise ConfigError("t_max must be positive")
        for name in ("snap_every", "scan_every", "max_iter_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def tau(self, grid: Grid) -> float:
        return self.tau_factor * grid.h * grid.h

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FlowConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown flow config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FlowProblem:
    """Target, warp, the initial map (whose trace is phi) and the v boundary data."""

    target: TargetManifold
    warp: WarpFunction
    u0: MapField
    psi: np.ndarray

    def __post_init__(self):
        self.psi = boundary_values(self.u0.grid, self.psi)
        if self.u0.K != self.target.K:
            raise ValueError(f"map has K={self.u0.K}, target needs K={self.target.K}")

    @property
    def grid(self) -> Grid:
        return self.u0.grid

    @property
    def g(self) -> np.ndarray:
        return self.warp.gradient(self.target.K)

    def operator(self, u: np.ndarray, face_avg: str = "arithmetic") -> EllipticOperator:
        return EllipticOperator.from_beta(self.grid, self.warp.value(u), face_avg)


@dataclass
class FlowState:
    u: MapField
    v: ScalarField
    t: float = 0.0
    step_index: int = 0
    stats: SolveStats | None = None
    op: EllipticOperator | None = field(default=None, repr=False)
    v_prev: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Energies:
    E_u: float
    E_v: float
    Q_beta: float
    E_g: float
    max_grad: float
    dens_u: np.ndarray = field(repr=False)
    dens_v: np.ndarray = field(repr=False)


# --- energies ----------------------------------------------------------------


def lorentz_energy(u: MapField, v: ScalarField, W: WarpFunction) -> float:
    """1/2 sum over cells of (|grad u|^2 - beta_c |grad v|^2) h^2, beta_c the corner mean."""
    h = u.grid.h
    du = kernels.cell_density(u.values, h)
    dv = kernels.cell_density(v.stacked(), h)
    bc = kernels.cell_average(np.ascontiguousarray(W.value(u.values), dtype=float))
    return 0.5 * float(np.sum(du - bc * dv)) * h * h


def energies(u: np.ndarray, v: np.ndarray, op: EllipticOperator, h: float) -> Energies:
    du = kernels.cell_density(u, h)
    dv = kernels.cell_density(v[None], h)
    E_u = 0.5 * float(np.sum(du)) * h * h
    E_v = 0.5 * float(np.sum(dv)) * h * h
    Q = op.quadratic_form(v)
    return Energies(E_u, E_v, Q, E_u - 0.5 * Q, math.sqrt(float(du.max())), du, dv)


def _solve(problem: FlowProblem, u: np.ndarray, guess: np.ndarray | None, cfg: FlowConfig):
    op = problem.operator(u, cfg.face_avg)
    v, stats = op.solve(problem.psi, cfg.elliptic_tol, guess, cfg.max_iter_factor * problem.grid.n)
    return v, stats, op


def initial_state(problem: FlowProblem, cfg: FlowConfig | None = None) -> FlowState:
    cfg = cfg or FlowConfig(n=problem.grid.n)
    v, stats, op = _solve(problem, problem.u0.values, None, cfg)
    return FlowState(MapField(problem.grid, problem.u0.values.copy()), ScalarField(problem.grid, v),
                     0.0, 0, stats, op)


def _coupling_density(v: np.ndarray, h: float, dens_v: np.ndarray | None = None) -> np.ndarray:
    if dens_v is None:
        dens_v = kernels.cell_density(v[None], h)
    return kernels.node_average(dens_v)


def tension_residual(u: MapField, v: ScalarField, W: WarpFunction, T: TargetManifold) -> tuple[np.ndarray, float]:
    """Tangential part of ``lap u + 1/2 grad beta(u) |grad v|^2`` at interior nodes, and its L2 norm."""
    h = u.grid.h
    lap = kernels.laplacian(u.values, h)
    node = _coupling_density(v.values, h)
    g = W.gradient(u.K)
    F = lap + 0.5 * g[:, None, None] * node[None]
    res = T.tangent_project(u.values, F, check=False)
    res[:, 0, :] = res[:, -1, :] = 0.0
    res[:, :, 0] = res[:, :, -1] = 0.0
    return res, math.sqrt(float(np.sum(res * res)) * h * h)


# --- explicit flow -----------------------------------------------------------


def _move(u: np.ndarray, node: np.ndarray, g: np.ndarray, tau: float, h: float, T: TargetManifold) -> np.ndarray:
    try:
        return kernels.explicit_step(u, node, g, tau, h, T.code, T.radius)
    except kernels.ProjectionError as exc:
        raise FloatingPointError("numeric_blowup: projection undefined") from exc


def flow_step(s: FlowState, cfg: FlowConfig, T: TargetManifold, W: WarpFunction,
              problem: FlowProblem | None = None, dens_v: np.ndarray | None = None) -> FlowState:
    """One explicit projected step of the coupled flow.

    The coupling uses ``s.v`` (solved for ``s.u``); the returned state carries
    the constraint re-solved for the moved map. Raises ``FloatingPointError``
    ("numeric_blowup") on non-finite values and
    :class:`EllipticConvergenceError` when the solve fails.
    """
    grid = s.u.grid
    h = grid.h
    tau = cfg.tau(grid)
    if not 0.0 < cfg.tau_factor <= 0.25:
        raise ConfigError(f"tau_factor must lie in (0, 0.25], got {cfg.tau_factor}")
    node = _coupling_density(s.v.values, h, dens_v)
    g = W.gradient(T.K)
    if problem is None:
        problem = FlowProblem(T, W, s.u, s.v.values)
    u_new = _move(s.u.values, node, g, tau, h, T)
    iters = 0
    if cfg.coupling_order == "gauss_seidel" and not W.is_constant:
        # redo the move with the constraint solved at the predicted map
        v_mid, st, _ = _solve(problem, u_new, s.v.values, cfg)
        iters = st.iterations
        u_new = _move(s.u.values, _coupling_density(v_mid, h), g, tau, h, T)
    if W.is_constant and s.op is not None:
        # grad beta = 0: the constraint does not see u, reuse v bit for bit
        v_new, op = s.v.values, s.op
        stats = SolveStats(0, s.stats.residual, s.stats.energy_Qbeta)
    else:
        guess = s.v.values
        if s.v_prev is not None:
            guess = 2.0 * s.v.values - s.v_prev
        v_new, stats, op = _solve(problem, u_new, guess, cfg)
        stats.iterations += iters
    return FlowState(MapField(grid, u_new), ScalarField(grid, v_new), s.t + tau, s.step_index + 1,
                     stats, op, s.v.values)


# --- reduced energy and descent ----------------------------------------------


def reduced_energy(u: MapField, W: WarpFunction, psi, tol: float = 1e-10, v0=None,
                   face_avg: str = "arithmetic") -> float:
    """E(u) - Q_beta(Phi(u))/2 with Phi(u) the constraint solved for u."""
    op = EllipticOperator.for_map(u, W, face_avg)
    trace = boundary_values(u.grid, psi)
    guess = None if v0 is None else boundary_values(u.grid, v0)
    v, _ = op.solve(trace, tol, guess, DEFAULT_MAX_ITER_FACTOR * u.grid.n)
    h = u.grid.h
    E_u = 0.5 * float(np.sum(kernels.cell_density(u.values, h))) * h * h
    return E_u - 0.5 * op.quadratic_form(v)


def reduced_gradient(u: MapField, v: ScalarField, W: WarpFunction, T: TargetManifold) -> np.ndarray:
    """L2 gradient of the reduced energy: minus the tension residual."""
    res, _ = tension_residual(u, v, W, T)
    return -res


def l2_inner(a: np.ndarray, b: np.ndarray, h: float) -> float:
    return float(np.sum(a * b)) * h * h


@dataclass
class DescentControl:
    step: float
    c1: float = 1e-4
    shrink: float = 0.5
    grow: float = 2.0
    min_step: float = 1e-14
    max_step: float = float("inf")
    rule: str = "bb"
    prev_du: np.ndarray | None = field(default=None, repr=False)
    prev_dG: np.ndarray | None = field(default=None, repr=False)


class DescentStalled(RuntimeError):
    code = "descent_stalled"


@dataclass
class DescentResult:
    state: FlowState
    step: float
    eps_old: float
    eps_new: float
    grad_norm: float
    trials: int
    iterations: int


def descent_step(s: FlowState, problem: FlowProblem, control: DescentControl, cfg: FlowConfig,
                 eps_old: float | None = None, G: np.ndarray | None = None) -> DescentResult:
    """Backtracking step along the negative reduced gradient, projected to N.

    Accepts only if eps(u') <= eps(u) - c1*step*||G||^2 and eps(u') < eps(u).
    Raises :class:`DescentStalled` once the trial step underflows.
    """
    T, W = problem.target, problem.warp
    h = problem.grid.h
    if G is None:
        G = reduced_gradient(s.u, s.v, W, T)
    gnorm2 = l2_inner(G, G, h)
    if eps_old is None:
        eps_old = energies(s.u.values, s.v.values, s.op or problem.operator(s.u.values), h).E_g
    step = control.step
    if control.rule == "bb" and control.prev_du is not None:
        sy = l2_inner(control.prev_du, control.prev_dG, h)
        if sy > 0.0:
            step = l2_inner(control.prev_du, control.prev_du, h) / sy
    step = min(step, control.max_step)
    trials = 0
    iters = 0
    while step >= control.min_step:
        trials += 1
        try:
            u_try = T.project(s.u.values - step * G)
        except kernels.ProjectionError:
            step *= control.shrink
            continue
        v_try, stats, op = _solve(problem, u_try, s.v.values, cfg)
        iters += stats.iterations
        e = energies(u_try, v_try, op, h)
        if e.E_g <= eps_old - control.c1 * step * gnorm2 and e.E_g < eps_old:
            new = FlowState(MapField(problem.grid, u_try), ScalarField(problem.grid, v_try),
                            s.t + step, s.step_index + 1, stats, op, s.v.values)
            G_new = reduced_gradient(new.u, new.v, W, T)
            control.prev_du = u_try - s.u.values
            control.prev_dG = G_new - G
            control.step = step * control.grow
            new._descent_G = G_new
            new._energies = e
            return DescentResult(new, step, eps_old, e.E_g, math.sqrt(gnorm2), trials, iters)
        step *= control.shrink
    raise DescentStalled(f"descent_stalled: step below {control.min_step} with |G| = {math.sqrt(gnorm2):.3e}")


# --- runs ----------------------------------------------------------------------


@dataclass
class Snapshot:
    step: int
    t: float
    u: np.ndarray
    v: np.ndarray


@dataclass
class ScanRecord:
    step: int
    t: float
    max_ball: dict


@dataclass
class RunResult:
    ledger: list[dict]
    snapshots: list[Snapshot]
    termination: str
    final: FlowState
    psi_ext: ScalarField
    scans: list[ScanRecord]
    grid: Grid
    tau: float
    error: str | None = None
    max_dist: float = 0.0
    boundary_drift: float = 0.0
    descent_eps: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.ledger], dtype=float)


def _row(step: int, t: float, e: Energies, ut2: float, wp4: float, iters: int) -> dict:
    return {"step": step, "t": t, "E_u": e.E_u, "E_v": e.E_v, "Q_beta": e.Q_beta, "E_g": e.E_g,
            "ut_norm_sq": ut2, "max_grad": e.max_grad, "wp4_ratio": wp4, "elliptic_iters": iters}


def _wp4(dens_v: np.ndarray, ref4: float, h: float) -> float:
    if ref4 == 0.0:
        return 0.0
    return (float(np.sum(dens_v * dens_v)) * h * h) ** 0.25 / ref4


def run(cfg: FlowConfig, problem: FlowProblem,
        on_row: Callable[[dict], None] | None = None) -> RunResult:
    """Step until t_max, convergence, concentration or failure.

    ``on_row`` receives every ledger row as it is produced.
    """
    cfg.validate()
    kernels.tune_allocator()
    grid = problem.grid
    if grid.n != cfg.n:
        raise ConfigError(f"problem grid n={grid.n} differs from config n={cfg.n}")
    h = grid.h
    T, W = problem.target, problem.warp
    radii = default_radii(h)
    r_min = radii[-1]
    monitor = sorted({r_min, cfg.monitor_radius}, reverse=True)

    state = initial_state(problem, cfg)
    psi_ext = ScalarField(grid, state.v.values.copy())
    e = energies(state.u.values, state.v.values, state.op, h)
    ref4 = (float(np.sum(e.dens_v ** 2)) * h * h) ** 0.25
    ledger = [_row(0, 0.0, e, 0.0, _wp4(e.dens_v, ref4, h), state.stats.iterations)]
    if on_row:
        on_row(ledger[-1])
    snapshots = [Snapshot(0, 0.0, state.u.values.copy(), state.v.values.copy())]
    scans: list[ScanRecord] = []
    phi_trace = state.u.values.copy()
    max_dist = T.max_violation(state.u.values)
    termination = "t_max"
    error = None
    descent_eps = [e.E_g]
    tau = cfg.tau(grid)

    def scan(step: int, t: float, dens: np.ndarray) -> bool:
        rec = {r: float(ball_energy_map(dens, h, r).max()) for r in monitor}
        scans.append(ScanRecord(step, t, rec))
        return rec[r_min] > cfg.epsilon1

    control = None
    G = None
    if cfg.mode == "descent":
        control = DescentControl(step=0.25 * h * h, c1=cfg.c1, min_step=cfg.min_step, rule=cfg.step_rule)

    concentrated = scan(0, 0.0, e.dens_u)
    step_limit = cfg.max_steps if cfg.max_steps is not None else math.inf
    if concentrated:
        termination = "concentration_detected"
    while not concentrated:
        if state.t >= cfg.t_max * (1 - 1e-12) or state.step_index >= step_limit:
            termination = "t_max"
            break
        try:
            if cfg.mode == "flow":
                new = flow_step(state, cfg, T, W, problem, e.dens_v)
                dt = tau
                iters = new.stats.iterations
                e_new = energies(new.u.values, new.v.values, new.op, h)
            else:
                res = descent_step(state, problem, control, cfg, e.E_g, G)
                new = res.state
                dt = res.step
                iters = res.iterations
                e_new = new._energies
                G = new._descent_G
        except FloatingPointError as exc:
            termination, error = "numeric_blowup", str(exc)
            break
        except EllipticConvergenceError as exc:
            termination, error = "elliptic_no_convergence", str(exc)
            break
        except DescentStalled as exc:
            _, gnorm = tension_residual(state.u, state.v, W, T)
            tol = cfg.stop_ut_tol if cfg.stop_ut_tol is not None else 0.0
            termination = "converged" if gnorm <= max(tol, 1e-12) else "descent_stalled"
            error = None if termination == "converged" else str(exc)
            break
        diff = new.u.values - state.u.values
        ut2 = float(np.sum(diff * diff)) * h * h / (dt * dt)
        state, e = new, e_new
        if not (math.isfinite(e.E_g) and math.isfinite(ut2)):
            termination, error = "numeric_blowup", "non-finite energy"
            break
        max_dist = max(max_dist, T.max_violation(state.u.values))
        ledger.append(_row(state.step_index, state.t, e, ut2, _wp4(e.dens_v, ref4, h), iters))
        descent_eps.append(e.E_g)
        if on_row:
            on_row(ledger[-1])
        if state.step_index % cfg.snap_every == 0:
            snapshots.append(Snapshot(state.step_index, state.t, state.u.values.copy(), state.v.values.copy()))
        if state.step_index % cfg.scan_every == 0 and scan(state.step_index, state.t, e.dens_u):
            termination = "concentration_detected"
            break
        if cfg.mode == "flow":
            speed = math.sqrt(ut2)
        else:
            speed = math.sqrt(l2_inner(G, G, h))
        if cfg.stop_ut_tol is not None and speed <= cfg.stop_ut_tol:
            termination = "converged"
            break

    if snapshots[-1].step != state.step_index:
        snapshots.append(Snapshot(state.step_index, state.t, state.u.values.copy(), state.v.values.copy()))
    if not scans or scans[-1].step != state.step_index:
        scan(state.step_index, state.t, e.dens_u)
    drift = float(np.max(np.abs((state.u.values - phi_trace)[:, grid.boundary_mask])))
    drift = max(drift, float(np.max(np.abs((state.v.values - problem.psi)[grid.boundary_mask]))))
    return RunResult(ledger, snapshots, termination, state, psi_ext, scans, grid, tau, error,
                     max_dist, drift, descent_eps)
