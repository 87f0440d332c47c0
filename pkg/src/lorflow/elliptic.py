"""The constraint -div(beta(u) grad v) = 0 with Dirichlet data v = psi."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import Grid, MapField, ScalarField, gradient_sq
from .target import WarpFunction

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER_FACTOR = 50


@dataclass
class SolveStats:
    iterations: int
    residual: float
    energy_Qbeta: float


class EllipticConvergenceError(RuntimeError):
    code = "elliptic_no_convergence"

    def __init__(self, stats: SolveStats):
        super().__init__(
            f"elliptic_no_convergence: residual {stats.residual:.3e} after {stats.iterations} iterations"
        )
        self.stats = stats


@dataclass
class EllipticOperator:
    """Edge-weighted 5-point operator; ``ax`` holds x-edges, ``ay`` y-edges."""

    grid: Grid
    ax: np.ndarray
    ay: np.ndarray

    @classmethod
    def from_beta(cls, grid: Grid, beta_nodes: np.ndarray, face_avg: str = "arithmetic") -> EllipticOperator:
        if face_avg not in ("arithmetic", "harmonic"):
            raise ValueError(f"face_avg must be 'arithmetic' or 'harmonic', got {face_avg!r}")
        beta_nodes = np.ascontiguousarray(beta_nodes, dtype=float)
        ax, ay = kernels.face_coefficients(beta_nodes, face_avg == "harmonic")
        return cls(grid, ax, ay)

    @classmethod
    def for_map(cls, u: MapField, W: WarpFunction, face_avg: str = "arithmetic") -> EllipticOperator:
        return cls.from_beta(u.grid, W.value(u.values), face_avg)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return kernels.apply_operator(self.ax, self.ay, np.ascontiguousarray(v, dtype=float))

    def quadratic_form(self, v) -> float:
        """Q(v) = sum over edges of a_e (v_i - v_j)^2."""
        vals = v.values if isinstance(v, ScalarField) else v
        return kernels.quadratic_form(self.ax, self.ay, np.ascontiguousarray(vals, dtype=float))

    def coefficient_range(self) -> tuple[float, float]:
        # boundary edges carry half a cell; undo that before reporting the range
        ax = self.ax.copy()
        ay = self.ay.copy()
        ax[:, 0] *= 2.0
        ax[:, -1] *= 2.0
        ay[0, :] *= 2.0
        ay[-1, :] *= 2.0
        lo = min(ax.min(), ay.min())
        hi = max(ax.max(), ay.max())
        return float(lo), float(hi)

    def solve(self, trace: np.ndarray, tol: float = DEFAULT_TOL, v0: np.ndarray | None = None,
              max_iter: int | None = None) -> tuple[np.ndarray, SolveStats]:
        """Minimise Q over fields with the boundary values of ``trace``."""
        n = self.grid.n
        v = np.array(trace if v0 is None else v0, dtype=float, copy=True)
        v[0, :], v[-1, :] = trace[0, :], trace[-1, :]
        v[:, 0], v[:, -1] = trace[:, 0], trace[:, -1]
        if v0 is None:
            # boundary mean start: constant data is reproduced exactly
            bd = self.grid.boundary_mask
            v[1:-1, 1:-1] = float(np.mean(trace[bd])) if np.ptp(trace[bd]) > 0 else trace[0, 0]
        if max_iter is None:
            max_iter = DEFAULT_MAX_ITER_FACTOR * n
        it, res = kernels.pcg(self.ax, self.ay, v, float(tol), int(max_iter))
        stats = SolveStats(int(it), float(res), self.quadratic_form(v))
        if not res <= tol:
            raise EllipticConvergenceError(stats)
        return v, stats


def boundary_values(grid: Grid, psi) -> np.ndarray:
    """Full ``(n, n)`` array whose boundary carries psi; interior entries are kept as given."""
    if callable(psi):
        X, Y = grid.mesh()
        out = np.asarray(psi(X, Y), dtype=float) * np.ones((grid.n, grid.n))
    elif isinstance(psi, ScalarField):
        out = psi.values.copy()
    else:
        out = np.array(psi, dtype=float, copy=True)
        if out.ndim == 0:
            out = np.full((grid.n, grid.n), float(out))
    if out.shape != (grid.n, grid.n):
        raise ValueError(f"boundary data has shape {out.shape}, expected {(grid.n, grid.n)}")
    return out


def solve_v(u: MapField, psi_trace, W: WarpFunction, tol: float = DEFAULT_TOL, *,
            face_avg: str = "arithmetic", max_iter_factor: int = DEFAULT_MAX_ITER_FACTOR,
            v0=None) -> tuple[ScalarField, SolveStats]:
    """Solve -div(beta(u) grad v) = 0, v = psi on the boundary.

    Raises :class:`EllipticConvergenceError` when ``max_iter_factor * n``
    iterations do not reach ``tol``.
    """
    if not 0.0 < tol <= 1e-6:
        raise ValueError(f"elliptic tolerance must lie in (0, 1e-6], got {tol}")
    trace = boundary_values(u.grid, psi_trace)
    op = EllipticOperator.for_map(u, W, face_avg)
    guess = None if v0 is None else boundary_values(u.grid, v0)
    v, stats = op.solve(trace, tol, guess, max_iter_factor * u.grid.n)
    return ScalarField(u.grid, v), stats


def extend_boundary(phi: MapField, psi_trace, W: WarpFunction, tol: float = DEFAULT_TOL,
                    **kwargs) -> ScalarField:
    """Extension of psi into M: the solution of the constraint frozen at the initial map."""
    v, _ = solve_v(phi, psi_trace, W, tol, **kwargs)
    return v


def gradient_lp_norm(f: ScalarField, p: float) -> float:
    h = f.grid.h
    d = gradient_sq(f)
    return float(np.sum(d ** (0.5 * p)) * h * h) ** (1.0 / p)


def wp_monitor(v: ScalarField, psi_ext: ScalarField, p: float = 2) -> tuple[float, bool]:
    """Ratio ||grad v||_p / ||grad psi_ext||_p; ``(0.0, True)`` when psi_ext is constant."""
    if p not in (2, 4):
        raise ValueError(f"exponent must be 2 or 4, got {p}")
    den = gradient_lp_norm(psi_ext, p)
    if den == 0.0:
        return 0.0, True
    return gradient_lp_norm(v, p) / den, False
