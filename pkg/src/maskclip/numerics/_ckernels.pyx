# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels; drop-in twins of ``_fallback``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, exp, log, erf, fabs, INFINITY

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def layer_norm_forward(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty((R, C), dtype=dtype)
    mean_arr = np.empty(R, dtype=dtype)
    rstd_arr = np.empty(R, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double s, v, mu, r, d
    with nogil:
        for i in range(R):
            s = 0.0
            for j in range(C):
                s = s + x[i, j]
            mu = s / C
            v = 0.0
            for j in range(C):
                d = x[i, j] - mu
                v = v + d * d
            r = 1.0 / sqrt(v / C + eps)
            mean[i] = <floating>mu
            rstd[i] = <floating>r
            for j in range(C):
                y[i, j] = <floating>((x[i, j] - mu) * r * gamma[j] + beta[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] gamma,
                        floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.empty((R, C), dtype=dtype)
    dg_acc = np.zeros(C, dtype=np.float64)
    db_acc = np.zeros(C, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_acc
    cdef double[::1] db = db_acc
    cdef double m1, m2, xh, dxh, r, mu
    with nogil:
        for i in range(R):
            mu = mean[i]
            r = rstd[i]
            m1 = 0.0
            m2 = 0.0
            for j in range(C):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gamma[j]
                m1 = m1 + dxh
                m2 = m2 + dxh * xh
                dg[j] = dg[j] + dy[i, j] * xh
                db[j] = db[j] + dy[i, j]
            m1 = m1 / C
            m2 = m2 / C
            for j in range(C):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gamma[j]
                dx[i, j] = <floating>((dxh - m1 - xh * m2) * r)
    return dx_arr, dg_acc.astype(dtype, copy=False), db_acc.astype(dtype, copy=False)


def softmax_forward(floating[:, ::1] x, keep=None):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j, KR = 1
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty((R, C), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef cnp.uint8_t[:, ::1] km
    cdef bint masked = keep is not None
    cdef double mx, s, e
    cdef Py_ssize_t kr
    if masked:
        km = np.ascontiguousarray(keep, dtype=np.uint8)
        KR = km.shape[0]
    with nogil:
        for i in range(R):
            mx = -INFINITY
            kr = i % KR
            for j in range(C):
                if (not masked or km[kr, j]) and x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(C):
                if masked and not km[kr, j]:
                    y[i, j] = 0
                else:
                    e = exp(x[i, j] - mx)
                    y[i, j] = <floating>e
                    s = s + y[i, j]
            for j in range(C):
                y[i, j] = <floating>(y[i, j] / s)
    return y_arr


def softmax_backward(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.empty((R, C), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(R):
            s = 0.0
            for j in range(C):
                s = s + dy[i, j] * y[i, j]
            for j in range(C):
                dx[i, j] = <floating>(y[i, j] * (dy[i, j] - s))
    return dx_arr


def log_softmax_forward(floating[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty((R, C), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef double mx, s, lse
    with nogil:
        for i in range(R):
            mx = x[i, 0]
            for j in range(1, C):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(C):
                s = s + exp(x[i, j] - mx)
            lse = log(s)
            for j in range(C):
                y[i, j] = <floating>((x[i, j] - mx) - lse)
    return y_arr


def log_softmax_backward(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], i, j
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.empty((R, C), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(R):
            s = 0.0
            for j in range(C):
                s = s + dy[i, j]
            for j in range(C):
                dx[i, j] = <floating>(dy[i, j] - exp(y[i, j]) * s)
    return dx_arr


def gelu_forward(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float64 if floating is double else np.float32
    y_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] y = y_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <floating>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return y_arr


def gelu_backward(floating[::1] x, floating[::1] dy):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = dx_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            dx[i] = <floating>(dy[i] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                        + v * INV_SQRT2PI * exp(-0.5 * v * v)))
    return dx_arr


def smooth_l1_forward(floating[::1] a, floating[::1] b, double beta):
    cdef Py_ssize_t n = a.shape[0], i
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef double d
    with nogil:
        for i in range(n):
            d = fabs(<double>a[i] - <double>b[i])
            if d < beta:
                out[i] = <floating>(0.5 * d * d / beta)
            else:
                out[i] = <floating>(d - 0.5 * beta)
    return out_arr


def smooth_l1_backward(floating[::1] a, floating[::1] b, double beta, floating[::1] dy):
    cdef Py_ssize_t n = a.shape[0], i
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef double d
    with nogil:
        for i in range(n):
            d = <double>a[i] - <double>b[i]
            if fabs(d) < beta:
                out[i] = <floating>(dy[i] * d / beta)
            elif d > 0:
                out[i] = dy[i]
            elif d < 0:
                out[i] = -dy[i]
            else:
                out[i] = 0
    return out_arr
