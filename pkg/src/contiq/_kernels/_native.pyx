# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Mirrors _ref.py operation for operation.

Scalar loops use the same expression grouping as the numpy reference so the
two backends agree to float64 rounding (summation order is the only
difference, covered by the parity tests' tolerance).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport M_PI, erfc, exp, pow, sqrt

cnp.import_array()

cdef double INV_SQRT2 = sqrt(0.5)
cdef double INV_SQRT_2PI = 1.0 / sqrt(2.0 * M_PI)


cdef inline double _phi(double u) nogil:
    return 0.5 * erfc(-u * INV_SQRT2)


def normal_cdf(z):
    """Standard normal CDF, elementwise."""
    cdef cnp.ndarray arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(arr)
    cdef double[::1] zf = arr.reshape(-1)
    cdef double[::1] of = out.reshape(-1)
    cdef Py_ssize_t i, n = zf.shape[0]
    with nogil:
        for i in range(n):
            of[i] = _phi(zf[i])
    return out


def pair_pref_forward(sx, sy):
    """Preference probability Phi((sx - sy)/sqrt(2)) and d/dsx."""
    cdef double[::1] a = np.ascontiguousarray(sx, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(sy, dtype=np.float64)
    cdef Py_ssize_t i, n = a.shape[0]
    if b.shape[0] != n:
        raise ValueError("score arrays differ in length")
    phat = np.empty(n, dtype=np.float64)
    dpd = np.empty(n, dtype=np.float64)
    cdef double[::1] pv = phat
    cdef double[::1] dv = dpd
    cdef double u
    with nogil:
        for i in range(n):
            u = (a[i] - b[i]) * INV_SQRT2
            pv[i] = _phi(u)
            dv[i] = exp(-0.5 * (u * u)) * INV_SQRT_2PI * INV_SQRT2
    return phat, dpd


def fidelity_forward(p, phat, double lo, double hi):
    """Clamped fidelity loss and its derivative w.r.t. phat."""
    cdef double[::1] pt = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[::1] qt = np.ascontiguousarray(phat, dtype=np.float64)
    cdef Py_ssize_t i, n = pt.shape[0]
    if qt.shape[0] != n:
        raise ValueError("probability arrays differ in length")
    loss = np.empty(n, dtype=np.float64)
    dq = np.empty(n, dtype=np.float64)
    cdef double[::1] lv = loss
    cdef double[::1] gv = dq
    cdef double cp, cq, interior
    with nogil:
        for i in range(n):
            cp = pt[i]
            if cp < lo:
                cp = lo
            elif cp > hi:
                cp = hi
            cq = qt[i]
            if cq < lo:
                cq = lo
            elif cq > hi:
                cq = hi
            lv[i] = 1.0 - sqrt(cp * cq) - sqrt((1.0 - cp) * (1.0 - cq))
            interior = 1.0 if (qt[i] > lo and qt[i] < hi) else 0.0
            gv[i] = (0.5 * sqrt((1.0 - cp) / (1.0 - cq)) - 0.5 * sqrt(cp / cq)) * interior
    return loss, dq


def relu(z):
    cdef cnp.ndarray arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(arr)
    cdef double[::1] zf = arr.reshape(-1)
    cdef double[::1] of = out.reshape(-1)
    cdef Py_ssize_t i, n = zf.shape[0]
    with nogil:
        for i in range(n):
            of[i] = zf[i] if zf[i] > 0.0 else 0.0
    return out


def relu_backward(z, grad_out):
    cdef cnp.ndarray za = np.ascontiguousarray(z, dtype=np.float64)
    cdef cnp.ndarray ga = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef cnp.ndarray out = np.empty_like(za)
    cdef double[::1] zf = za.reshape(-1)
    cdef double[::1] gf = ga.reshape(-1)
    cdef double[::1] of = out.reshape(-1)
    cdef Py_ssize_t i, n = zf.shape[0]
    if gf.shape[0] != n:
        raise ValueError("shape mismatch between z and grad_out")
    with nogil:
        for i in range(n):
            of[i] = gf[i] if zf[i] > 0.0 else 0.0
    return out


def l2_normalize_rows(v):
    """Row-normalize onto the unit sphere; zero rows stay zero."""
    cdef double[:, ::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t i, j, n = vv.shape[0], d = vv.shape[1]
    unit = np.empty((n, d), dtype=np.float64)
    norms = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] uv = unit
    cdef double[::1] nv = norms
    cdef double acc, safe
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += vv[i, j] * vv[i, j]
            acc = sqrt(acc)
            nv[i] = acc
            safe = acc if acc > 0.0 else 1.0
            for j in range(d):
                uv[i, j] = vv[i, j] / safe
    return unit, norms


def l2_normalize_backward(unit, norms, grad_unit):
    """Backprop through row normalization; zero-norm rows get zero gradient."""
    cdef double[:, ::1] uv = np.ascontiguousarray(unit, dtype=np.float64)
    cdef double[::1] nv = np.ascontiguousarray(norms, dtype=np.float64)
    cdef double[:, ::1] gv = np.ascontiguousarray(grad_unit, dtype=np.float64)
    cdef Py_ssize_t i, j, n = uv.shape[0], d = uv.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double dot, safe
    with nogil:
        for i in range(n):
            if nv[i] > 0.0:
                dot = 0.0
                for j in range(d):
                    dot += gv[i, j] * uv[i, j]
                safe = nv[i]
                for j in range(d):
                    ov[i, j] = (gv[i, j] - dot * uv[i, j]) / safe
            else:
                for j in range(d):
                    ov[i, j] = 0.0
    return out


def adam_update(param, grad, m, v, long step, double lr,
                double beta1, double beta2, double eps):
    """One fused Adam update, in place on param/m/v. step is 1-based."""
    if not (param.flags["C_CONTIGUOUS"] and m.flags["C_CONTIGUOUS"]
            and v.flags["C_CONTIGUOUS"]):
        raise ValueError("adam_update requires C-contiguous state arrays")
    cdef double[::1] pf = param.reshape(-1)
    cdef double[::1] gf = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mf = m.reshape(-1)
    cdef double[::1] vf = v.reshape(-1)
    cdef Py_ssize_t i, n = pf.shape[0]
    if gf.shape[0] != n or mf.shape[0] != n or vf.shape[0] != n:
        raise ValueError("adam_update state shapes do not match param")
    cdef double one_m_b1 = 1.0 - beta1
    cdef double one_m_b2 = 1.0 - beta2
    cdef double bc1 = 1.0 - pow(beta1, <double> step)
    cdef double bc2 = 1.0 - pow(beta2, <double> step)
    with nogil:
        for i in range(n):
            mf[i] = beta1 * mf[i] + one_m_b1 * gf[i]
            vf[i] = beta2 * vf[i] + one_m_b2 * (gf[i] * gf[i])
            pf[i] -= (mf[i] / bc1) / (sqrt(vf[i] / bc2) + eps) * lr


def assign_nearest(x, c):
    """Nearest centroid per row of x; ties go to the lowest index."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef Py_ssize_t n = xv.shape[0], nc = cv.shape[0], d = xv.shape[1]
    if cv.shape[1] != d:
        raise ValueError("feature and centroid dimensions differ")
    labels = np.empty(n, dtype=np.int64)
    dmin = np.empty(n, dtype=np.float64)
    cdef long[::1] lv = labels
    cdef double[::1] dv = dmin
    cdef double best, acc, diff
    cdef Py_ssize_t best_j
    with nogil:
        for i in range(n):
            best = -1.0
            best_j = 0
            for j in range(nc):
                acc = 0.0
                for k in range(d):
                    diff = xv[i, k] - cv[j, k]
                    acc += diff * diff
                if best < 0.0 or acc < best:
                    best = acc
                    best_j = j
            lv[i] = best_j
            dv[i] = best
    return labels, dmin
