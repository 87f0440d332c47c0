"""Uniform grid on the unit square and the discrete calculus used everywhere else.

Nodes sit at ``(i*h, j*h)`` for ``i, j = 0..n-1``. Gradients live on cells (the
four-corner scheme), the Laplacian on nodes (5-point stencil). The pairing is
chosen so that ``sum_cells 1/2 |grad f|^2 h^2`` has nodal gradient
``-h^2 * laplacian(f)`` at every interior node.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import kernels


class OutsideDomainError(ValueError):
    """Raised when a point lies outside the unit square."""

    code = "outside_domain"


class NonFiniteFieldError(FloatingPointError):
    """Raised when a field carries NaN or Inf values."""


@dataclass(frozen=True)
class Grid:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs n >= 3 nodes per side, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def coords(self) -> np.ndarray:
        # i*h instead of linspace so that h*(n-1) == 1 holds node by node
        return np.arange(self.n) * self.h

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.coords, self.coords, indexing="ij")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(self.n - 1) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        return mask

    def zero_trace(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=float, copy=True)
        out[..., 0, :] = out[..., -1, :] = 0.0
        out[..., :, 0] = out[..., :, -1] = 0.0
        return out


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteFieldError(f"{what} contains non-finite values")


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"scalar field shape {self.values.shape} does not match n={self.grid.n}")
        _check_finite(self.values, "scalar field")

    @property
    def K(self) -> int:
        return 1

    def stacked(self) -> np.ndarray:
        return self.values[None, :, :]


@dataclass
class MapField:
    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        n = self.grid.n
        if self.values.ndim != 3 or self.values.shape[1:] != (n, n):
            raise ValueError(f"map field shape {self.values.shape} does not match n={n}")
        _check_finite(self.values, "map field")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def stacked(self) -> np.ndarray:
        return self.values


def _stack(f) -> tuple[np.ndarray, float]:
    if isinstance(f, (ScalarField, MapField)):
        return np.ascontiguousarray(f.stacked()), f.grid.h
    raise TypeError(f"expected ScalarField or MapField, got {type(f).__name__}")


def gradient_sq(f: ScalarField | MapField) -> np.ndarray:
    """Cell-centred |grad f|^2, shape ``(n-1, n-1)``."""
    u, h = _stack(f)
    return kernels.cell_density(u, h)


def dirichlet_energy(f: ScalarField | MapField) -> float:
    """1/2 sum over cells of |grad f|^2 h^2."""
    h = f.grid.h
    return 0.5 * float(np.sum(gradient_sq(f))) * h * h


def laplacian(f: ScalarField | MapField) -> np.ndarray:
    """5-point Laplacian on interior nodes; boundary nodes carry 0."""
    u, h = _stack(f)
    out = kernels.laplacian(u, h)
    return out[0] if isinstance(f, ScalarField) else out


def _disk_offsets(r: float, h: float) -> tuple[np.ndarray, int]:
    """Kernel of cells whose centres are within ``r`` of a node.

    Returns the 0/1 mask over cell offsets ``a, b in [-m, m-1]`` and ``m``.
    """
    m = max(1, int(math.ceil(r / h + 0.5)))
    a = np.arange(-m, m) + 0.5
    A, B = np.meshgrid(a, a, indexing="ij")
    mask = (A * A + B * B) * (h * h) <= r * r
    return mask.astype(float), m


def ball_energy_map(density: np.ndarray, h: float, r: float) -> np.ndarray:
    """Energy of the ball of radius ``r`` centred at every node.

    ``density`` is a cell array as returned by :func:`gradient_sq`.
    """
    e = 0.5 * density * h * h
    mask, m = _disk_offsets(r, h)
    padded = np.pad(e, m)
    offsets = np.argwhere(mask > 0)
    if len(offsets) > 400:
        out = signal.correlate(padded, mask, mode="valid", method="fft")
        # fft round-off can leave tiny negatives where the ball is empty
        np.maximum(out, 0.0, out=out)
        return out
    # small disks: exact shifted sums in a fixed order
    size = padded.shape[0] - 2 * m + 1
    out = np.zeros((size, size))
    for a, b in offsets:
        out += padded[a:a + size, b:b + size]
    return out


def ball_energy(f, center, r: float) -> float:
    """1/2 sum of |grad f|^2 h^2 over cells whose centres lie within ``r`` of ``center``."""
    if not 0.0 < r:
        raise ValueError(f"ball radius must be positive, got {r}")
    density = gradient_sq(f)
    h = f.grid.h
    cx, cy = f.grid.cell_centers()
    inside = (cx - center[0]) ** 2 + (cy - center[1]) ** 2 <= r * r
    return 0.5 * float(np.sum(density[inside])) * h * h


def interpolate_values(values: np.ndarray, h: float, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of stacked node values ``(K, n, n)`` at ``points`` ``(..., 2)``."""
    pts = np.asarray(points, dtype=float)
    n = values.shape[-1]
    tol = 1e-12
    if np.any(pts < -tol) or np.any(pts > 1.0 + tol):
        raise OutsideDomainError("outside_domain")
    s = np.clip(pts / h, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(s[..., 0]).astype(int), n - 2)
    j0 = np.minimum(np.floor(s[..., 1]).astype(int), n - 2)
    fx = s[..., 0] - i0
    fy = s[..., 1] - j0
    v00 = values[:, i0, j0]
    v10 = values[:, i0 + 1, j0]
    v01 = values[:, i0, j0 + 1]
    v11 = values[:, i0 + 1, j0 + 1]
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def interpolate(f: ScalarField | MapField, p) -> float | np.ndarray:
    """Bilinear value of ``f`` at the point ``p``; a float for scalar fields."""
    vals, h = _stack(f)
    out = interpolate_values(vals, h, np.asarray(p, dtype=float))
    return float(out[0]) if isinstance(f, ScalarField) else out


# --- CSV serialisation -------------------------------------------------------

_HEADER = re.compile(r"^#\s*(.*)$")


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def write_field_csv(path, f: ScalarField | MapField, t: float = 0.0, header: str | None = None) -> Path:
    """Write ``# n=<n> K=<K> t=<t>`` (or a custom header) then ``i,j,val_1..val_K`` rows."""
    path = Path(path)
    vals = f.stacked()
    K, n = vals.shape[0], f.grid.n
    if header is None:
        header = f"n={n} K={K} t={format_float(t)}"
    lines = [f"# {header}"]
    flat = vals.reshape(K, -1).T
    for idx in range(n * n):
        i, j = divmod(idx, n)
        lines.append(f"{i},{j}," + ",".join(format_float(x) for x in flat[idx]))
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_value(text: str):
    """Header values are ints, floats, comma-separated points, or plain strings."""
    parts = text.split(",")
    try:
        nums = [int(p) if re.fullmatch(r"[+-]?\d+", p) else float(p) for p in parts]
    except ValueError:
        return text
    return nums[0] if len(nums) == 1 else tuple(float(x) for x in nums)


def read_field_csv(path) -> tuple[ScalarField | MapField, dict]:
    """Inverse of :func:`write_field_csv`; returns the field and the header key/values."""
    text = Path(path).read_text().splitlines()
    meta: dict = {}
    rows = []
    for line in text:
        if not line.strip():
            continue
        m = _HEADER.match(line)
        if m:
            for tok in m.group(1).split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
                else:
                    meta.setdefault("tags", []).append(tok)
            continue
        rows.append([float(x) for x in line.split(",")])
    data = np.array(rows)
    idx = data[:, :2].astype(int)
    n = int(idx.max()) + 1
    K = data.shape[1] - 2
    vals = np.zeros((K, n, n))
    vals[:, idx[:, 0], idx[:, 1]] = data[:, 2:].T
    grid = Grid(n)
    for key, val in list(meta.items()):
        if key != "tags":
            meta[key] = _parse_value(val)
    f = ScalarField(grid, vals[0]) if K == 1 else MapField(grid, vals)
    return f, meta
