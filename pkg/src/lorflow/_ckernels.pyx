# cython: language_level=3
"""Compiled stencil kernels; same signatures and semantics as ``_pykernels``.

All reductions are sequential loops in a fixed (i, j, k) order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite

from ._pykernels import ProjectionError, PROJECTION_EPS as _PY_EPS

cnp.import_array()

cdef double PROJECTION_EPS = _PY_EPS

cdef enum:
    T_SPHERE = 1
    T_TORUS = 2


def cell_density(double[:, :, ::1] u, double h):
    cdef Py_ssize_t K = u.shape[0], n = u.shape[1], i, j, k
    cdef double s, a, b, c, d, inv = 1.0 / (h * h)
    out = np.zeros((n - 1, n - 1))
    cdef double[:, ::1] o = out
    for k in range(K):
        for i in range(n - 1):
            for j in range(n - 1):
                a = u[k, i + 1, j] - u[k, i, j]
                b = u[k, i + 1, j + 1] - u[k, i, j + 1]
                c = u[k, i, j + 1] - u[k, i, j]
                d = u[k, i + 1, j + 1] - u[k, i + 1, j]
                o[i, j] += 0.5 * (a * a + b * b) + 0.5 * (c * c + d * d)
    for i in range(n - 1):
        for j in range(n - 1):
            o[i, j] *= inv
    return out


def laplacian(double[:, :, ::1] u, double h):
    cdef Py_ssize_t K = u.shape[0], n = u.shape[1], i, j, k
    cdef double inv = 1.0 / (h * h)
    out = np.zeros((K, n, n))
    cdef double[:, :, ::1] o = out
    for k in range(K):
        for i in range(1, n - 1):
            for j in range(1, n - 1):
                o[k, i, j] = (u[k, i + 1, j] + u[k, i - 1, j] + u[k, i, j + 1]
                              + u[k, i, j - 1] - 4.0 * u[k, i, j]) * inv
    return out


def cell_average(double[:, ::1] f):
    cdef Py_ssize_t n = f.shape[0], i, j
    out = np.empty((n - 1, n - 1))
    cdef double[:, ::1] o = out
    for i in range(n - 1):
        for j in range(n - 1):
            o[i, j] = 0.25 * (f[i, j] + f[i + 1, j] + f[i, j + 1] + f[i + 1, j + 1])
    return out


def node_average(double[:, ::1] c):
    cdef Py_ssize_t m = c.shape[0], i, j
    acc = np.zeros((m + 1, m + 1))
    cnt = np.zeros((m + 1, m + 1))
    cdef double[:, ::1] a = acc
    cdef double[:, ::1] q = cnt
    cdef double val
    for i in range(m):
        for j in range(m):
            val = c[i, j]
            a[i, j] += val
            a[i + 1, j] += val
            a[i, j + 1] += val
            a[i + 1, j + 1] += val
            q[i, j] += 1.0
            q[i + 1, j] += 1.0
            q[i, j + 1] += 1.0
            q[i + 1, j + 1] += 1.0
    for i in range(m + 1):
        for j in range(m + 1):
            a[i, j] = a[i, j] / q[i, j]
    return acc


def face_coefficients(double[:, ::1] beta, bint harmonic=False):
    cdef Py_ssize_t n = beta.shape[0], i, j
    bc_arr = cell_average(beta)
    cdef double[:, ::1] bc = bc_arr
    ax_arr = np.zeros((n - 1, n))
    ay_arr = np.zeros((n, n - 1))
    cdef double[:, ::1] ax = ax_arr
    cdef double[:, ::1] ay = ay_arr
    cdef double p, q
    for i in range(n - 1):
        for j in range(1, n - 1):
            p = bc[i, j - 1]
            q = bc[i, j]
            ax[i, j] = 2.0 * p * q / (p + q) if harmonic else 0.5 * (p + q)
        ax[i, 0] = 0.5 * bc[i, 0]
        ax[i, n - 1] = 0.5 * bc[i, n - 2]
    for i in range(1, n - 1):
        for j in range(n - 1):
            p = bc[i - 1, j]
            q = bc[i, j]
            ay[i, j] = 2.0 * p * q / (p + q) if harmonic else 0.5 * (p + q)
    for j in range(n - 1):
        ay[0, j] = 0.5 * bc[0, j]
        ay[n - 1, j] = 0.5 * bc[n - 2, j]
    return ax_arr, ay_arr


cdef inline void _apply(double[:, ::1] ax, double[:, ::1] ay, double[:, ::1] v,
                        double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = v.shape[0], i, j
    cdef double c
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            c = v[i, j]
            out[i, j] = (ax[i, j] * (c - v[i + 1, j]) + ax[i - 1, j] * (c - v[i - 1, j])
                         + ay[i, j] * (c - v[i, j + 1]) + ay[i, j - 1] * (c - v[i, j - 1]))


def apply_operator(double[:, ::1] ax, double[:, ::1] ay, double[:, ::1] v):
    out = np.zeros((v.shape[0], v.shape[1]))
    _apply(ax, ay, v, out)
    return out


def quadratic_form(double[:, ::1] ax, double[:, ::1] ay, double[:, ::1] v):
    cdef Py_ssize_t n = v.shape[0], i, j
    cdef double s = 0.0, d
    for i in range(n - 1):
        for j in range(n):
            d = v[i + 1, j] - v[i, j]
            s += ax[i, j] * d * d
    for i in range(n):
        for j in range(n - 1):
            d = v[i, j + 1] - v[i, j]
            s += ay[i, j] * d * d
    return s


cdef double _interior_dot(double[:, ::1] a, double[:, ::1] b) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], i, j
    cdef double s = 0.0
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            s += a[i, j] * b[i, j]
    return s


def pcg(double[:, ::1] ax, double[:, ::1] ay, double[:, ::1] v, double tol, long maxiter):
    cdef Py_ssize_t n = v.shape[0], i, j
    cdef long it = 0
    r_arr = np.zeros((n, n))
    z_arr = np.zeros((n, n))
    p_arr = np.zeros((n, n))
    q_arr = np.zeros((n, n))
    d_arr = np.zeros((n, n))
    cdef double[:, ::1] r = r_arr
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] q = q_arr
    cdef double[:, ::1] dinv = d_arr
    cdef double bnorm, scale, rnorm, rz, rz_new, alpha, beta_cg, pq, rr, c, qq

    # right-hand side norm: operator applied with a zero interior
    for i in range(n):
        for j in range(n):
            if i == 0 or j == 0 or i == n - 1 or j == n - 1:
                p[i, j] = v[i, j]
    _apply(ax, ay, p, q)
    bnorm = sqrt(_interior_dot(q, q))
    scale = bnorm if bnorm > 0.0 else 1.0
    for i in range(n):
        for j in range(n):
            p[i, j] = 0.0
            q[i, j] = 0.0
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            dinv[i, j] = 1.0 / (ax[i, j] + ax[i - 1, j] + ay[i, j] + ay[i, j - 1])

    _apply(ax, ay, v, r)
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            r[i, j] = -r[i, j]
    rnorm = sqrt(_interior_dot(r, r))
    while True:
        if rnorm / scale <= tol:
            _apply(ax, ay, v, r)
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    r[i, j] = -r[i, j]
            rnorm = sqrt(_interior_dot(r, r))
            if rnorm / scale <= tol or it >= maxiter:
                break
        if it >= maxiter:
            break
        for i in range(1, n - 1):
            for j in range(1, n - 1):
                z[i, j] = dinv[i, j] * r[i, j]
                p[i, j] = z[i, j]
        rz = _interior_dot(r, z)
        while it < maxiter:
            # fused passes: q = A p with p.q, then the v/r update with r.r and r.z
            pq = 0.0
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    c = p[i, j]
                    qq = (ax[i, j] * (c - p[i + 1, j]) + ax[i - 1, j] * (c - p[i - 1, j])
                          + ay[i, j] * (c - p[i, j + 1]) + ay[i, j - 1] * (c - p[i, j - 1]))
                    q[i, j] = qq
                    pq += c * qq
            alpha = rz / pq
            rr = 0.0
            rz_new = 0.0
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    v[i, j] += alpha * p[i, j]
                    c = r[i, j] - alpha * q[i, j]
                    r[i, j] = c
                    rr += c * c
                    z[i, j] = dinv[i, j] * c
                    rz_new += c * z[i, j]
            it += 1
            rnorm = sqrt(rr)
            if rnorm / scale <= tol:
                break
            beta_cg = rz_new / rz
            rz = rz_new
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    p[i, j] = z[i, j] + beta_cg * p[i, j]
    return it, rnorm / scale


def project(w_in, int target_code, double radius):
    w = np.array(w_in, dtype=np.float64, order="C", copy=True)
    if target_code != T_SPHERE and target_code != T_TORUS:
        return w
    shape = w.shape
    cdef Py_ssize_t K = shape[0]
    cdef double[:, ::1] a = w.reshape(K, -1)
    cdef Py_ssize_t m = a.shape[1], idx, k
    cdef double s, f
    for idx in range(m):
        if target_code == T_SPHERE:
            s = 0.0
            for k in range(K):
                s += a[k, idx] * a[k, idx]
            s = sqrt(s)
            if not (s >= PROJECTION_EPS):
                raise ProjectionError("projection_undefined")
            f = radius / s
            for k in range(K):
                a[k, idx] *= f
        else:
            for k in range(0, 4, 2):
                s = sqrt(a[k, idx] * a[k, idx] + a[k + 1, idx] * a[k + 1, idx])
                if not (s >= PROJECTION_EPS):
                    raise ProjectionError("projection_undefined")
                f = radius / s
                a[k, idx] *= f
                a[k + 1, idx] *= f
    return w


def project_sphere(w, double radius):
    return project(w, T_SPHERE, radius)


def project_torus(w, double radius):
    return project(w, T_TORUS, radius)


def explicit_step(double[:, :, ::1] u, double[:, ::1] dens, double[::1] g, double tau,
                  double h, int target_code, double radius):
    cdef Py_ssize_t K = u.shape[0], n = u.shape[1], i, j, k
    cdef double inv = 1.0 / (h * h), s, f, c
    out_arr = np.empty((K, n, n))
    cdef double[:, :, ::1] out = out_arr
    # pass 1: ambient update (boundary rows copied unchanged)
    for k in range(K):
        c = 0.5 * g[k]
        out[k, 0, :] = u[k, 0, :]
        out[k, n - 1, :] = u[k, n - 1, :]
        for i in range(1, n - 1):
            out[k, i, 0] = u[k, i, 0]
            out[k, i, n - 1] = u[k, i, n - 1]
            for j in range(1, n - 1):
                out[k, i, j] = u[k, i, j] + tau * ((u[k, i + 1, j] + u[k, i - 1, j] + u[k, i, j + 1]
                                                    + u[k, i, j - 1] - 4.0 * u[k, i, j]) * inv
                                                   + c * dens[i, j])
    # pass 2: nearest-point projection; a non-finite entry shows up in the norm
    if target_code == T_SPHERE:
        for i in range(1, n - 1):
            for j in range(1, n - 1):
                s = 0.0
                for k in range(K):
                    s += out[k, i, j] * out[k, i, j]
                if not isfinite(s):
                    raise FloatingPointError("numeric_blowup")
                s = sqrt(s)
                if not (s >= PROJECTION_EPS):
                    raise ProjectionError("projection_undefined")
                f = radius / s
                for k in range(K):
                    out[k, i, j] *= f
    elif target_code == T_TORUS:
        for k in range(0, 4, 2):
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    s = out[k, i, j] * out[k, i, j] + out[k + 1, i, j] * out[k + 1, i, j]
                    if not isfinite(s):
                        raise FloatingPointError("numeric_blowup")
                    s = sqrt(s)
                    if not (s >= PROJECTION_EPS):
                        raise ProjectionError("projection_undefined")
                    f = radius / s
                    out[k, i, j] *= f
                    out[k + 1, i, j] *= f
    else:
        for k in range(K):
            for i in range(1, n - 1):
                for j in range(1, n - 1):
                    if not isfinite(out[k, i, j]):
                        raise FloatingPointError("numeric_blowup")
    return out_arr
