"""Embedded targets N in R^K and warp functions beta on them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from . import kernels

OFF_MANIFOLD_TOL = 1e-9


class ProjectionUndefinedError(kernels.ProjectionError):
    code = "projection_undefined"


class OffManifoldError(ValueError):
    code = "off_manifold"


class WarpBoundsError(ValueError):
    pass


class TargetManifold:
    """Base class; subclasses define the nearest-point projection in closed form."""

    name: str
    K: int
    code: int
    radius: float

    def project(self, y) -> np.ndarray:
        """Nearest point on N; ``y`` has the ambient axis first (shape ``(K, ...)``)."""
        y = np.asarray(y, dtype=float)
        try:
            return kernels.project(np.ascontiguousarray(y), self.code, self.radius)
        except kernels.ProjectionError as exc:
            raise ProjectionUndefinedError("projection_undefined") from exc

    def dist_to_manifold(self, y) -> np.ndarray | float:
        y = np.asarray(y, dtype=float)
        d = np.sqrt(np.sum((y - self.project(y)) ** 2, axis=0))
        return float(d) if d.ndim == 0 else d

    def max_violation(self, y) -> float:
        """Largest nodewise distance to N, without building the projection."""
        raise NotImplementedError

    def _check_on(self, p) -> None:
        if np.max(np.atleast_1d(self.dist_to_manifold(p))) > OFF_MANIFOLD_TOL:
            raise OffManifoldError("off_manifold")

    def tangent_project(self, p, w, check: bool = True) -> np.ndarray:
        raise NotImplementedError

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        """Quasi-random points on N, shape ``(K, count)``."""
        raise NotImplementedError

    def config(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sphere(TargetManifold):
    """Round sphere S^dim of radius ``radius`` in R^(dim+1)."""

    dim: int = 2
    radius: float = 1.0

    code = kernels.TARGET_SPHERE

    @property
    def K(self) -> int:
        return self.dim + 1

    @property
    def name(self) -> str:
        return f"sphere{self.dim}"

    def tangent_project(self, p, w, check: bool = True) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        w = np.asarray(w, dtype=float)
        if check:
            self._check_on(p)
        return w - p * (np.sum(w * p, axis=0) / self.radius**2)

    def max_violation(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(np.max(np.abs(np.sqrt(np.sum(y * y, axis=0)) - self.radius)))

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        # Sobol points pushed through the Gaussian inverse CDF, then normalised
        z = qmc.MultivariateNormalQMC(np.zeros(self.K), seed=seed).random(count).T
        return self.radius * z / np.sqrt(np.sum(z * z, axis=0))


@dataclass(frozen=True)
class CliffordTorus(TargetManifold):
    """Flat torus S^1(r) x S^1(r) in R^4 with r = 1/sqrt(2)."""

    radius: float = 1.0 / math.sqrt(2.0)

    code = kernels.TARGET_TORUS
    K = 4
    name = "clifford"

    def tangent_project(self, p, w, check: bool = True) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        w = np.array(w, dtype=float, copy=True)
        if check:
            self._check_on(p)
        r2 = self.radius**2
        for a in (0, 2):
            radial = (w[a] * p[a] + w[a + 1] * p[a + 1]) / r2
            w[a] = w[a] - radial * p[a]
            w[a + 1] = w[a + 1] - radial * p[a + 1]
        return w

    @staticmethod
    def from_angles(alpha, gamma) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        r = 1.0 / math.sqrt(2.0)
        return np.stack([r * np.cos(alpha), r * np.sin(alpha), r * np.cos(gamma), r * np.sin(gamma)])

    def max_violation(self, y) -> float:
        y = np.asarray(y, dtype=float)
        d1 = np.sqrt(y[0] ** 2 + y[1] ** 2) - self.radius
        d2 = np.sqrt(y[2] ** 2 + y[3] ** 2) - self.radius
        return float(np.sqrt(np.max(d1 * d1 + d2 * d2)))

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        s = qmc.Sobol(d=2, scramble=True, seed=seed).random(count)
        return self.from_angles(2 * np.pi * s[:, 0], 2 * np.pi * s[:, 1])


def make_target(name: str) -> TargetManifold:
    if name in ("sphere2", "sphere"):
        return Sphere(2)
    if name == "clifford":
        return CliffordTorus()
    if name.startswith("sphere") and name[6:].isdigit():
        return Sphere(int(name[6:]))
    raise ValueError(f"unknown target {name!r}; expected 'sphere2' or 'clifford'")


# --- warp functions ----------------------------------------------------------


@dataclass(frozen=True)
class WarpFunction:
    """beta(y) = c (``kind='constant'``) or a + b*y[axis] (``kind='affine'``).

    ``axis`` is 1-based, matching the usual y_1..y_K labelling. ``lam`` and
    ``Lam`` are the bounds of beta on the target, certified on construction by
    :func:`make_warp`.
    """

    kind: str
    a: float
    b: float = 0.0
    axis: int = 1
    lam: float = float("nan")
    Lam: float = float("nan")

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or self.b == 0.0

    def value(self, p) -> np.ndarray | float:
        p = np.asarray(p, dtype=float)
        if self.kind == "constant":
            out = np.full(p.shape[1:], self.a)
        else:
            out = self.a + self.b * p[self.axis - 1]
        return float(out) if np.ndim(out) == 0 else out

    def gradient(self, K: int) -> np.ndarray:
        """Ambient gradient (constant for the built-in warps)."""
        g = np.zeros(K)
        if self.kind != "constant":
            g[self.axis - 1] = self.b
        return g

    def config(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "axis": self.axis}


def beta_eval(W: WarpFunction, p) -> np.ndarray | float:
    return W.value(p)


def beta_grad(W: WarpFunction, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    g = W.gradient(p.shape[0])
    return g.reshape((-1,) + (1,) * (p.ndim - 1)) * np.ones_like(p)


def analytic_bounds(W: WarpFunction, T: TargetManifold) -> tuple[float, float]:
    if W.kind == "constant":
        return W.a, W.a
    if isinstance(T, Sphere):
        span = T.radius
    elif isinstance(T, CliffordTorus):
        span = T.radius
    else:
        raise ValueError(f"no analytic range for target {T!r}")
    lo, hi = W.a - abs(W.b) * span, W.a + abs(W.b) * span
    return lo, hi


def make_warp(kind: str, a: float, b: float = 0.0, axis: int = 1,
              target: TargetManifold | None = None, samples: int = 1 << 20,
              seed: int = 0) -> WarpFunction:
    """Build a warp and certify 0 < lam <= beta <= Lam on ``target``.

    The bounds are the analytic extremes; a quasi-random sample of N must stay
    inside them (1e-9 slack) and must not leave the extremes loose by more
    than the sampling resolution.
    """
    kind = {"affine": "affine", "affine_height": "affine", "constant": "constant"}.get(kind, kind)
    if kind not in ("affine", "constant"):
        raise ValueError(f"unknown warp kind {kind!r}")
    if kind == "constant":
        b, axis = 0.0, 1
    W = WarpFunction(kind, float(a), float(b), int(axis))
    if target is None:
        return W
    if kind == "affine" and not 1 <= axis <= target.K:
        raise ValueError(f"warp axis {axis} outside 1..{target.K}")
    lo, hi = analytic_bounds(W, target)
    if not lo > 0.0:
        raise WarpBoundsError(f"warp is not positive on {target.name}: min {lo}")
    pts = target.sample(samples, seed=seed)
    vals = W.value(pts)
    vals = np.atleast_1d(vals)
    if vals.min() < lo - 1e-9 or vals.max() > hi + 1e-9:
        raise WarpBoundsError("sampled warp values escape the analytic bounds")
    if (vals.min() - lo) + (hi - vals.max()) > 1e-2 * max(hi - lo, 1.0):
        raise WarpBoundsError("sampled warp values do not reach the analytic bounds")
    return WarpFunction(W.kind, W.a, W.b, W.axis, lo, hi)
