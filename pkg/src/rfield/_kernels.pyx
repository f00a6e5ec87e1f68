# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: trilinear grid gather/scatter and ray compositing.

Same contracts as `rfield._kernels_py`; selected at import by `rfield.kernels`.
All loops run in a fixed index order so accumulation is deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, floor

cnp.import_array()


def trilerp_forward(cnp.ndarray[cnp.float64_t, ndim=4] values,
                    cnp.ndarray[cnp.float64_t, ndim=2] pts):
    """Gather trilinearly interpolated vectors at continuous grid coords."""
    cdef Py_ssize_t X = values.shape[0]
    cdef Py_ssize_t Y = values.shape[1]
    cdef Py_ssize_t Z = values.shape[2]
    cdef Py_ssize_t C = values.shape[3]
    cdef Py_ssize_t N = pts.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((N, C), dtype=np.float64)
    cdef Py_ssize_t n, c, ix, iy, iz
    cdef double tx, ty, tz, fx, fy, fz, gx, gy, gz
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    for n in range(N):
        tx = pts[n, 0]
        ty = pts[n, 1]
        tz = pts[n, 2]
        ix = <Py_ssize_t>floor(tx)
        iy = <Py_ssize_t>floor(ty)
        iz = <Py_ssize_t>floor(tz)
        if ix < 0: ix = 0
        if iy < 0: iy = 0
        if iz < 0: iz = 0
        if ix > X - 2: ix = X - 2
        if iy > Y - 2: iy = Y - 2
        if iz > Z - 2: iz = Z - 2
        fx = tx - ix
        fy = ty - iy
        fz = tz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w001 = gx * gy * fz
        w010 = gx * fy * gz
        w011 = gx * fy * fz
        w100 = fx * gy * gz
        w101 = fx * gy * fz
        w110 = fx * fy * gz
        w111 = fx * fy * fz
        for c in range(C):
            out[n, c] = (w000 * values[ix, iy, iz, c]
                         + w001 * values[ix, iy, iz + 1, c]
                         + w010 * values[ix, iy + 1, iz, c]
                         + w011 * values[ix, iy + 1, iz + 1, c]
                         + w100 * values[ix + 1, iy, iz, c]
                         + w101 * values[ix + 1, iy, iz + 1, c]
                         + w110 * values[ix + 1, iy + 1, iz, c]
                         + w111 * values[ix + 1, iy + 1, iz + 1, c])
    return out


def trilerp_backward(cnp.ndarray[cnp.float64_t, ndim=4] grad,
                     cnp.ndarray[cnp.float64_t, ndim=2] pts,
                     cnp.ndarray[cnp.float64_t, ndim=2] upstream):
    """Scatter-add `upstream` into the 8 corner gradient slots per point."""
    cdef Py_ssize_t X = grad.shape[0]
    cdef Py_ssize_t Y = grad.shape[1]
    cdef Py_ssize_t Z = grad.shape[2]
    cdef Py_ssize_t C = grad.shape[3]
    cdef Py_ssize_t N = pts.shape[0]
    cdef Py_ssize_t n, c, ix, iy, iz
    cdef double tx, ty, tz, fx, fy, fz, gx, gy, gz, u
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    for n in range(N):
        tx = pts[n, 0]
        ty = pts[n, 1]
        tz = pts[n, 2]
        ix = <Py_ssize_t>floor(tx)
        iy = <Py_ssize_t>floor(ty)
        iz = <Py_ssize_t>floor(tz)
        if ix < 0: ix = 0
        if iy < 0: iy = 0
        if iz < 0: iz = 0
        if ix > X - 2: ix = X - 2
        if iy > Y - 2: iy = Y - 2
        if iz > Z - 2: iz = Z - 2
        fx = tx - ix
        fy = ty - iy
        fz = tz - iz
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        w000 = gx * gy * gz
        w001 = gx * gy * fz
        w010 = gx * fy * gz
        w011 = gx * fy * fz
        w100 = fx * gy * gz
        w101 = fx * gy * fz
        w110 = fx * fy * gz
        w111 = fx * fy * fz
        for c in range(C):
            u = upstream[n, c]
            grad[ix, iy, iz, c] += w000 * u
            grad[ix, iy, iz + 1, c] += w001 * u
            grad[ix, iy + 1, iz, c] += w010 * u
            grad[ix, iy + 1, iz + 1, c] += w011 * u
            grad[ix + 1, iy, iz, c] += w100 * u
            grad[ix + 1, iy, iz + 1, c] += w101 * u
            grad[ix + 1, iy + 1, iz, c] += w110 * u
            grad[ix + 1, iy + 1, iz + 1, c] += w111 * u
    return None


def composite_forward(cnp.ndarray[cnp.float64_t, ndim=2] sigma,
                      cnp.ndarray[cnp.float64_t, ndim=2] delta):
    """Emission-absorption weights per ray: w_k = T_k * (1 - exp(-sigma_k * delta_k))."""
    cdef Py_ssize_t R = sigma.shape[0]
    cdef Py_ssize_t K = sigma.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] weights = np.empty((R, K), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t_res = np.empty(R, dtype=np.float64)
    cdef Py_ssize_t r, k
    cdef double T, s
    for r in range(R):
        T = 1.0
        for k in range(K):
            s = sigma[r, k] * delta[r, k]
            weights[r, k] = T * (-expm1(-s))
            T = T * exp(-s)
        t_res[r] = T
    return weights, t_res


def adam_step(cnp.ndarray[cnp.float64_t, ndim=1] params,
              cnp.ndarray[cnp.float64_t, ndim=1] grads,
              cnp.ndarray[cnp.float64_t, ndim=1] m,
              cnp.ndarray[cnp.float64_t, ndim=1] v,
              long t, double lr, double beta1, double beta2, double eps):
    """Fused in-place Adam update with bias correction (single pass)."""
    cdef Py_ssize_t n = params.shape[0]
    cdef Py_ssize_t i
    cdef double g, mi, vi
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    for i in range(n):
        g = grads[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        params[i] -= lr * (mi / c1) / ((vi / c2) ** 0.5 + eps)
    return None


def composite_backward(cnp.ndarray[cnp.float64_t, ndim=2] weights,
                       cnp.ndarray[cnp.float64_t, ndim=1] t_res,
                       cnp.ndarray[cnp.float64_t, ndim=2] delta,
                       cnp.ndarray[cnp.float64_t, ndim=2] g_weights,
                       cnp.ndarray[cnp.float64_t, ndim=1] g_tres):
    """Gradient of (weights, t_res) wrt sigma, contracted with upstream grads.

    With s_j = sigma_j * delta_j:  dw_k/ds_j = -w_k for j < k, T_{k+1} for j = k;
    dT_res/ds_j = -T_res.  Uses a suffix sum over g_k * w_k, iterating back to front.
    """
    cdef Py_ssize_t R = weights.shape[0]
    cdef Py_ssize_t K = weights.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g_sigma = np.empty((R, K), dtype=np.float64)
    cdef Py_ssize_t r, k
    cdef double suffix, T_next, g_s
    for r in range(R):
        suffix = 0.0
        T_next = t_res[r]
        for k in range(K - 1, -1, -1):
            # T_next is T_{k+1}; recover T_k = T_{k+1} + w_k after use
            g_s = g_weights[r, k] * T_next - suffix - g_tres[r] * t_res[r]
            g_sigma[r, k] = g_s * delta[r, k]
            suffix += g_weights[r, k] * weights[r, k]
            T_next += weights[r, k]
    return g_sigma
