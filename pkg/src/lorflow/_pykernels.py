"""Pure numpy implementations of the stencil kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Arrays follow the layout ``u[k, i, j]`` with ``x = i*h`` and ``y = j*h``;
scalar fields are ``(n, n)``, cell fields ``(n-1, n-1)``.
"""

import numpy as np

TARGET_NONE = 0
TARGET_SPHERE = 1
TARGET_TORUS = 2

PROJECTION_EPS = 1e-9


class ProjectionError(ArithmeticError):
    pass


def cell_density(u, h):
    """|grad u|^2 at cell centres from the two edge pairs of each cell."""
    ex = u[:, 1:, :] - u[:, :-1, :]
    ey = u[:, :, 1:] - u[:, :, :-1]
    ex2 = ex * ex
    ey2 = ey * ey
    d = 0.5 * (ex2[:, :, :-1] + ex2[:, :, 1:]) + 0.5 * (ey2[:, :-1, :] + ey2[:, 1:, :])
    return d.sum(axis=0) / (h * h)


def laplacian(u, h):
    out = np.zeros_like(u)
    c = u[:, 1:-1, 1:-1]
    out[:, 1:-1, 1:-1] = (
        u[:, 2:, 1:-1] + u[:, :-2, 1:-1] + u[:, 1:-1, 2:] + u[:, 1:-1, :-2] - 4.0 * c
    ) / (h * h)
    return out


def cell_average(f):
    return 0.25 * (f[:-1, :-1] + f[1:, :-1] + f[:-1, 1:] + f[1:, 1:])


def node_average(c):
    """Average of the cells touching each node (4 inside, 2 on edges, 1 at corners)."""
    m = c.shape[0]
    acc = np.zeros((m + 1, m + 1))
    cnt = np.zeros((m + 1, m + 1))
    for di in (0, 1):
        for dj in (0, 1):
            acc[di:di + m, dj:dj + m] += c
            cnt[di:di + m, dj:dj + m] += 1.0
    return acc / cnt


def face_coefficients(beta, harmonic=False):
    """Edge weights a_e of Q(v) = sum_e a_e (v_i - v_j)^2.

    Each cell carries the corner average of ``beta``; an edge collects half of
    each adjacent cell value, so that Q equals sum_c beta_c |grad v|_c^2 h^2.
    ``harmonic`` replaces the two-cell arithmetic mean of interior edges by the
    harmonic mean.
    """
    bc = cell_average(beta)
    n = beta.shape[0]
    ax = np.zeros((n - 1, n))
    ay = np.zeros((n, n - 1))
    if harmonic:
        ax[:, 1:-1] = 2.0 * bc[:, :-1] * bc[:, 1:] / (bc[:, :-1] + bc[:, 1:])
        ay[1:-1, :] = 2.0 * bc[:-1, :] * bc[1:, :] / (bc[:-1, :] + bc[1:, :])
    else:
        ax[:, 1:-1] = 0.5 * (bc[:, :-1] + bc[:, 1:])
        ay[1:-1, :] = 0.5 * (bc[:-1, :] + bc[1:, :])
    ax[:, 0] = 0.5 * bc[:, 0]
    ax[:, -1] = 0.5 * bc[:, -1]
    ay[0, :] = 0.5 * bc[0, :]
    ay[-1, :] = 0.5 * bc[-1, :]
    return ax, ay


def apply_operator(ax, ay, v):
    """(A v)_i = sum over edges at interior node i of a_e (v_i - v_j); zero on the boundary."""
    out = np.zeros_like(v)
    c = v[1:-1, 1:-1]
    out[1:-1, 1:-1] = (
        ax[1:, 1:-1] * (c - v[2:, 1:-1])
        + ax[:-1, 1:-1] * (c - v[:-2, 1:-1])
        + ay[1:-1, 1:] * (c - v[1:-1, 2:])
        + ay[1:-1, :-1] * (c - v[1:-1, :-2])
    )
    return out


def quadratic_form(ax, ay, v):
    dx = v[1:, :] - v[:-1, :]
    dy = v[:, 1:] - v[:, :-1]
    return float(np.sum(ax * dx * dx) + np.sum(ay * dy * dy))


def _diag(ax, ay):
    return ax[1:, 1:-1] + ax[:-1, 1:-1] + ay[1:-1, 1:] + ay[1:-1, :-1]


def pcg(ax, ay, v, tol, maxiter):
    """Jacobi-preconditioned CG on the interior unknowns of ``v`` (in place).

    Boundary entries of ``v`` are the Dirichlet data; interior entries are the
    initial guess. Returns ``(iterations, relative_residual)`` where the residual
    is relative to the boundary-induced right-hand side.
    """
    zero_int = v.copy()
    zero_int[1:-1, 1:-1] = 0.0
    bnorm = float(np.sqrt(np.sum(apply_operator(ax, ay, zero_int)[1:-1, 1:-1] ** 2)))
    scale = bnorm if bnorm > 0.0 else 1.0
    dinv = 1.0 / _diag(ax, ay)

    r = -apply_operator(ax, ay, v)[1:-1, 1:-1]
    rnorm = float(np.sqrt(np.sum(r * r)))
    it = 0
    while True:
        if rnorm / scale <= tol:
            # recursive residual may drift; confirm on the true residual
            r = -apply_operator(ax, ay, v)[1:-1, 1:-1]
            rnorm = float(np.sqrt(np.sum(r * r)))
            if rnorm / scale <= tol or it >= maxiter:
                break
        if it >= maxiter:
            break
        z = dinv * r
        p = z.copy()
        rz = float(np.sum(r * z))
        pfull = np.zeros_like(v)
        while it < maxiter:
            pfull[1:-1, 1:-1] = p
            q = apply_operator(ax, ay, pfull)[1:-1, 1:-1]
            alpha = rz / float(np.sum(p * q))
            v[1:-1, 1:-1] += alpha * p
            r -= alpha * q
            it += 1
            rnorm = float(np.sqrt(np.sum(r * r)))
            if rnorm / scale <= tol:
                break
            z = dinv * r
            rz_new = float(np.sum(r * z))
            p = z + (rz_new / rz) * p
            rz = rz_new
    return it, rnorm / scale


def project_sphere(w, radius):
    norm = np.sqrt(np.sum(w * w, axis=0))
    if np.any(~(norm >= PROJECTION_EPS)):
        raise ProjectionError("projection_undefined")
    return w * (radius / norm)


def project_torus(w, radius):
    out = np.empty_like(w)
    for a in (0, 2):
        norm = np.sqrt(w[a] * w[a] + w[a + 1] * w[a + 1])
        if np.any(~(norm >= PROJECTION_EPS)):
            raise ProjectionError("projection_undefined")
        out[a] = w[a] * (radius / norm)
        out[a + 1] = w[a + 1] * (radius / norm)
    return out


def project(w, target_code, radius):
    if target_code == TARGET_SPHERE:
        return project_sphere(w, radius)
    if target_code == TARGET_TORUS:
        return project_torus(w, radius)
    return w.copy()


def explicit_step(u, dens, g, tau, h, target_code, radius):
    """u + tau*(lap u + 0.5*g*dens) at interior nodes, projected; boundary copied."""
    out = u.copy()
    lap = laplacian(u, h)[:, 1:-1, 1:-1]
    with np.errstate(invalid="ignore", over="ignore"):
        w = u[:, 1:-1, 1:-1] + tau * (lap + 0.5 * g[:, None, None] * dens[None, 1:-1, 1:-1])
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("numeric_blowup")
    out[:, 1:-1, 1:-1] = project(w, target_code, radius)
    return out
