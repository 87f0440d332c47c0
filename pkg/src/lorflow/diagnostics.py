"""Energy-concentration scans, blow-up point selection and bubble extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RectBivariateSpline

from . import kernels
from .grid import Grid, MapField, ScalarField, ball_energy_map, format_float, gradient_sq, write_field_csv
from .target import Sphere, TargetManifold

FOUR_PI = 4.0 * math.pi


class NoConcentrationError(RuntimeError):
    code = "no_concentration"


class UnderResolvedError(ValueError):
    code = "under_resolved"


# --- synthetic bubbles ---------------------------------------------------------


def bubble_angle(r: np.ndarray, rho: float) -> np.ndarray:
    """Polar angle (from the north pole) of the degree-1 bubble of scale ``rho``."""
    return 2.0 * np.arctan2(rho, r)


def bubble_profile(X: np.ndarray, Y: np.ndarray, center=(0.0, 0.0), rho: float = 1.0) -> np.ndarray:
    """Inverse stereographic map: centre to the south pole, infinity to the north pole."""
    dx = X - center[0]
    dy = Y - center[1]
    r2 = dx * dx + dy * dy
    den = r2 + rho * rho
    return np.stack([2 * rho * dx / den, 2 * rho * dy / den, (r2 - rho * rho) / den])


def smoothstep(s: np.ndarray) -> np.ndarray:
    """Quintic ramp from 0 at s <= 0 to 1 at s >= 1 with two vanishing derivatives."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def stereographic_bubble(grid: Grid, center=(0.5, 0.5), rho: float = 0.05) -> MapField:
    X, Y = grid.mesh()
    return MapField(grid, bubble_profile(X, Y, center, rho))


def glued_bubble(grid: Grid, center=(0.5, 0.5), rho: float = 0.05, r_in: float = 0.15,
                 r_out: float = 0.3) -> MapField:
    """Bubble of scale ``rho`` blended to the north pole between ``r_in`` and ``r_out``."""
    X, Y = grid.mesh()
    dx, dy = X - center[0], Y - center[1]
    r = np.hypot(dx, dy)
    chi = 1.0 - smoothstep((r - r_in) / (r_out - r_in))
    theta = chi * bubble_angle(r, rho)
    phi = np.arctan2(dy, dx)
    return MapField(grid, np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]))


def bubble_ball_energy(r: float, rho: float) -> float:
    """Closed-form energy of the scale-``rho`` bubble in the disk of radius ``r`` about its centre."""
    return FOUR_PI * r * r / (r * r + rho * rho)


# --- concentration scan --------------------------------------------------------


@dataclass
class Candidate:
    x: tuple[float, float]
    index: tuple[int, int]
    r_star: float
    E_ball: float
    boundary_ratio: float

    def to_dict(self) -> dict:
        return {"x": list(self.x), "index": list(self.index), "r_star": self.r_star,
                "E_ball": self.E_ball, "boundary_ratio": self.boundary_ratio}


@dataclass
class SingularityReport:
    candidates: list[Candidate]
    epsilon1: float
    t: float
    radii: list[float]
    r_star: np.ndarray = field(repr=False)
    total_energy: float = 0.0

    @property
    def detected(self) -> bool:
        return bool(self.candidates)

    def to_dict(self) -> dict:
        return {"epsilon1": self.epsilon1, "t": self.t, "radii": list(self.radii),
                "total_energy": self.total_energy,
                "candidates": [c.to_dict() for c in self.candidates]}


def _boundary_distance(x: float, y: float) -> float:
    return min(x, y, 1.0 - x, 1.0 - y)


def concentration_scan(u: MapField, radii: Sequence[float], epsilon1: float, t: float = 0.0) -> SingularityReport:
    """Per-node first radius (descending ladder) whose ball energy exceeds ``epsilon1``.

    ``r_star`` holds the smallest scanned radius with ball energy above the
    threshold (``inf`` where none). Nodes exceeding it at the smallest radius
    are thinned by greedy non-maximum suppression at distance ``2*r_star``;
    the survivors come back in lexicographic node order.
    """
    radii = [float(r) for r in radii]
    h = u.grid.h
    if not radii or any(a <= b for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be non-empty and strictly descending")
    if radii[-1] < 2 * h * (1 - 1e-12):
        raise ValueError(f"smallest radius {radii[-1]} is below 2h = {2 * h}")
    dens = gradient_sq(u)
    n = u.grid.n
    r_star = np.full((n, n), np.inf)
    last = None
    for r in radii:
        emap = ball_energy_map(dens, h, r)
        r_star[emap > epsilon1] = r
        last = emap
    r_min = radii[-1]
    hot = np.argwhere(last > epsilon1)
    order = sorted(range(len(hot)), key=lambda k: (-last[tuple(hot[k])], tuple(hot[k])))
    kept: list[tuple[int, int]] = []
    for k in order:
        i, j = int(hot[k][0]), int(hot[k][1])
        if all((i - a) ** 2 + (j - b) ** 2 >= (2 * r_min / h) ** 2 * (1 - 1e-12) for a, b in kept):
            kept.append((i, j))
    cands = []
    for i, j in sorted(kept):
        x, y = i * h, j * h
        cands.append(Candidate((x, y), (i, j), r_min, float(last[i, j]), _boundary_distance(x, y) / r_min))
    total = 0.5 * float(np.sum(dens)) * h * h
    return SingularityReport(cands, float(epsilon1), float(t), radii, r_star, total)


# --- blow-up selection ---------------------------------------------------------


@dataclass
class Selection:
    x_i: tuple[float, float]
    r_i: float
    t_i: float
    step: int
    snapshot: int
    E_ball: float
    boundary_ratio: float
    resolved: bool

    def to_dict(self) -> dict:
        return {"x_i": list(self.x_i), "r_i": self.r_i, "t_i": self.t_i, "step": self.step,
                "snapshot": self.snapshot, "E_ball": self.E_ball,
                "boundary_ratio": self.boundary_ratio, "resolved": self.resolved}


def critical_radii(h: float, r_cap: float) -> np.ndarray:
    """Radii at which the cell membership of a node-centred disk changes."""
    m = int(math.ceil(r_cap / h + 1))
    a = np.arange(m) + 0.5
    d = np.unique(np.sqrt(a[:, None] ** 2 + a[None, :] ** 2).ravel()) * h
    return d[d <= r_cap * (1 + 1e-12)]


def smallest_concentration_radius(u: MapField, level: float, r_cap: float = 0.5):
    """Smallest disk radius whose best-placed ball energy reaches ``level``.

    Bisection over the discrete membership radii, so the answer is exact up to
    one ring of cells. Returns ``(r, (i, j), energy)``; raises
    :class:`NoConcentrationError` when even ``r_cap`` falls short.
    """
    h = u.grid.h
    dens = gradient_sq(u)
    rs = critical_radii(h, r_cap)

    def best(r):
        emap = ball_energy_map(dens, h, r)
        flat = int(np.argmax(emap))  # first maximum in lexicographic order
        return float(emap.flat[flat]), divmod(flat, emap.shape[1])

    top, idx = best(rs[-1])
    if top < level:
        raise NoConcentrationError(f"no_concentration: max ball energy {top:.4g} < {level:.4g}")
    lo, hi = -1, len(rs) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        e, _ = best(rs[mid])
        if e >= level:
            hi = mid
        else:
            lo = mid
    e, idx = best(rs[hi])
    return float(rs[hi]), idx, e


def select_blowup(history: Sequence, epsilon1: float, r_cap: float = 0.5, min_resolution: float = 2.0) -> Selection:
    """Pick (x_i, r_i, t_i) with the best ball of radius r_i holding epsilon1/2.

    ``history`` is a sequence of snapshots with ``u`` (MapField or array),
    ``t`` and ``step``. The latest snapshot is tried first; if its radius is
    below ``min_resolution*h`` the search walks back to the most recent
    snapshot that still resolves it. When none does, the latest one is
    returned with ``resolved=False``.
    """
    if len(history) < 2:
        raise ValueError("select_blowup needs at least two snapshots")
    fallback = None
    for k in range(len(history) - 1, -1, -1):
        snap = history[k]
        u = snap.u if isinstance(snap.u, MapField) else MapField(Grid(snap.u.shape[-1]), snap.u)
        h = u.grid.h
        try:
            r, (i, j), e = smallest_concentration_radius(u, 0.5 * epsilon1, r_cap)
        except NoConcentrationError:
            if fallback is None:
                raise
            break
        x = (i * h, j * h)
        sel = Selection(x, r, float(snap.t), int(getattr(snap, "step", k)), k, e,
                        _boundary_distance(*x) / r, r >= min_resolution * h * (1 - 1e-12))
        if sel.resolved:
            return sel
        if fallback is None:
            fallback = sel
    return fallback


# --- bubble extraction -----------------------------------------------------------


@dataclass
class BubbleExtract:
    x_i: tuple[float, float]
    r_i: float
    t_i: float
    u_tilde: MapField
    v_tilde: ScalarField
    spacing: float
    L: float
    stats: dict

    def to_dict(self) -> dict:
        return {"x_i": list(self.x_i), "r_i": self.r_i, "t_i": self.t_i, "L": self.L,
                "m": self.u_tilde.grid.n, "spacing": self.spacing, "stats": dict(self.stats)}

    def header(self) -> str:
        x = ",".join(format_float(c) for c in self.x_i)
        return f"bubble x_i={x} r_i={format_float(self.r_i)} t_i={format_float(self.t_i)}"

    def write(self, out_dir, prefix: str = "bubble"):
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pu = write_field_csv(out / f"{prefix}_u.csv", self.u_tilde, header=self.header())
        pv = write_field_csv(out / f"{prefix}_v.csv", self.v_tilde, header=self.header())
        return pu, pv


def _spline_sample(values: np.ndarray, coords: np.ndarray, px: np.ndarray, py: np.ndarray, order: int) -> np.ndarray:
    out = np.empty((values.shape[0], px.size, py.size))
    for k in range(values.shape[0]):
        if order == 1:
            spl = RectBivariateSpline(coords, coords, values[k], kx=1, ky=1)
        else:
            spl = RectBivariateSpline(coords, coords, values[k], kx=order, ky=order)
        out[k] = spl(px, py, grid=True)
    return out


def sup_gradient(f: ScalarField | MapField) -> float:
    return math.sqrt(float(np.max(gradient_sq(f))))


def tension_norm(u: MapField, T: TargetManifold) -> float:
    """L2 norm of the tangential 5-point Laplacian on interior nodes."""
    lap = kernels.laplacian(u.values, u.grid.h)
    res = T.tangent_project(u.values, lap, check=False)
    h = u.grid.h
    return math.sqrt(float(np.sum(res[:, 1:-1, 1:-1] ** 2)) * h * h)


def window_energy(u: MapField, x_i, r_i: float, L: float) -> float:
    """Energy of the cells of ``u`` whose centres lie in the square x_i + r_i*[-L, L]^2."""
    dens = gradient_sq(u)
    h = u.grid.h
    cx, cy = u.grid.cell_centers()
    half = r_i * L
    inside = (np.abs(cx - x_i[0]) <= half) & (np.abs(cy - x_i[1]) <= half)
    return 0.5 * float(np.sum(dens[inside])) * h * h


def extract_bubble(u: MapField, v: ScalarField, x_i, r_i: float, L: float = 8.0, m: int = 129,
                   T: TargetManifold | None = None, t_i: float = 0.0, order: int = 3,
                   v_sup_M: float | None = None) -> BubbleExtract:
    """Rescale ``u`` and ``v`` about ``x_i`` by ``r_i`` onto an m x m grid over [-L, L]^2.

    Samples come from a tensor spline of degree ``order`` (bilinear kinks
    would pollute the rescaled tension) and are projected back onto N.
    Window points outside the unit square take the value at the nearest
    boundary point; their share is reported in the stats.
    """
    T = T or Sphere(2)
    h = u.grid.h
    if r_i < 2 * h * (1 - 1e-12):
        raise UnderResolvedError(f"under_resolved: r_i = {r_i:.4g} < 2h = {2 * h:.4g}")
    s = np.linspace(-L, L, m)
    px = x_i[0] + r_i * s
    py = x_i[1] + r_i * s
    if px[-1] < 0 or px[0] > 1 or py[-1] < 0 or py[0] > 1:
        raise ValueError("bubble window does not meet the unit square")
    outside = float(np.mean(((px < 0) | (px > 1))[:, None] | ((py < 0) | (py > 1))[None, :]))
    cx, cy = np.clip(px, 0.0, 1.0), np.clip(py, 0.0, 1.0)
    coords = u.grid.coords
    ut = T.project(_spline_sample(u.values, coords, cx, cy, order))
    vt = _spline_sample(v.stacked(), coords, cx, cy, order)[0]
    wg = Grid(m)
    spacing = 2.0 * L / (m - 1)
    u_tilde = MapField(wg, ut)
    v_tilde = ScalarField(wg, vt)
    # stats on the rescaled fields with spacing 2L/(m-1); energy is scale free
    dens_u = kernels.cell_density(ut, spacing)
    E_bubble = 0.5 * float(np.sum(dens_u)) * spacing * spacing
    lap = kernels.laplacian(ut, spacing)
    res = T.tangent_project(ut, lap, check=False)
    tnorm = math.sqrt(float(np.sum(res[:, 1:-1, 1:-1] ** 2)) * spacing * spacing)
    gv = math.sqrt(float(np.max(kernels.cell_density(vt[None], spacing))))
    if v_sup_M is None:
        v_sup_M = sup_gradient(v)
    stats = {
        "E_bubble": E_bubble,
        "tension_norm": tnorm,
        "grad_v_norm": gv,
        "grad_v_norm_M": v_sup_M,
        "grad_v_ratio": gv / v_sup_M if v_sup_M > 0 else 0.0,
        "E_window_source": window_energy(u, x_i, r_i, L),
        "outside_fraction": outside,
    }
    return BubbleExtract((float(x_i[0]), float(x_i[1])), float(r_i), float(t_i), u_tilde, v_tilde,
                         spacing, float(L), stats)


def verify_bubble(b: BubbleExtract, W=None, epsilon1: float = 1.0, rel_tol: float = 0.1,
                  slack: float = 0.05, single_sphere_bubble: bool = False,
                  v_ratio_tol: float | None = None) -> dict:
    """Verdict record for the extracted bubble.

    (i) E_bubble >= epsilon1/4 less ``slack`` (relative); (ii) tension norm
    <= rel_tol * E_bubble; (iii) E_bubble in [0.8, 1.2]*4pi, only when
    ``single_sphere_bubble``. ``v_ratio_tol`` adds the flatness check on v.
    ``W`` is accepted for interface symmetry; the v-term is dropped.
    """
    E = b.stats["E_bubble"]
    checks = {}
    floor = 0.25 * epsilon1 * (1.0 - slack)
    checks["energy_floor"] = {"passed": E >= floor, "value": E, "threshold": floor}
    tt = rel_tol * E
    checks["tension"] = {"passed": b.stats["tension_norm"] <= tt, "value": b.stats["tension_norm"],
                         "threshold": tt}
    if single_sphere_bubble:
        ok = 0.8 * FOUR_PI <= E <= 1.2 * FOUR_PI
        checks["sphere_energy"] = {"passed": ok, "value": E, "threshold": [0.8 * FOUR_PI, 1.2 * FOUR_PI]}
    if v_ratio_tol is not None:
        r = b.stats["grad_v_ratio"]
        checks["v_flat"] = {"passed": r <= v_ratio_tol, "value": r, "threshold": v_ratio_tol}
    failed = [k for k, c in checks.items() if not c["passed"]]
    return {"passed": not failed, "failed": failed, "checks": checks}
