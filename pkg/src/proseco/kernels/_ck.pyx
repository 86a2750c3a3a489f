# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row/elementwise kernels. Semantics mirror numpy_backend exactly."""

import numpy as np

from libc.math cimport exp, log, sqrt, INFINITY

NAME = "cython"


cdef inline tuple _rows(arr):
    """View an (..., K) array as contiguous 2-d (rows, K)."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return a, a.reshape(-1, a.shape[a.ndim - 1])


def log_softmax_fwd(scores):
    a, flat = _rows(scores)
    out = np.empty_like(a)
    cdef double[:, ::1] x = flat
    cdef double[:, ::1] y = out.reshape(-1, a.shape[a.ndim - 1])
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, acc
    for i in range(n):
        m = -INFINITY
        for j in range(k):
            if x[i, j] > m:
                m = x[i, j]
        acc = 0.0
        for j in range(k):
            acc += exp(x[i, j] - m)
        acc = log(acc)
        for j in range(k):
            y[i, j] = x[i, j] - m - acc
    return out


def log_softmax_bwd(logp, grad):
    a, flat_l = _rows(logp)
    g, flat_g = _rows(grad)
    out = np.empty_like(a)
    cdef double[:, ::1] lp = flat_l
    cdef double[:, ::1] gr = flat_g
    cdef double[:, ::1] dx = out.reshape(-1, a.shape[a.ndim - 1])
    cdef Py_ssize_t n = lp.shape[0], k = lp.shape[1], i, j
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += gr[i, j]
        for j in range(k):
            dx[i, j] = gr[i, j] - exp(lp[i, j]) * s
    return out


def softmax_fwd(scores):
    a, flat = _rows(scores)
    out = np.empty_like(a)
    cdef double[:, ::1] x = flat
    cdef double[:, ::1] y = out.reshape(-1, a.shape[a.ndim - 1])
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, acc
    for i in range(n):
        m = -INFINITY
        for j in range(k):
            if x[i, j] > m:
                m = x[i, j]
        acc = 0.0
        for j in range(k):
            y[i, j] = exp(x[i, j] - m)
            acc += y[i, j]
        for j in range(k):
            y[i, j] /= acc
    return out


def softmax_bwd(probs, grad):
    a, flat_p = _rows(probs)
    g, flat_g = _rows(grad)
    out = np.empty_like(a)
    cdef double[:, ::1] p = flat_p
    cdef double[:, ::1] gr = flat_g
    cdef double[:, ::1] dx = out.reshape(-1, a.shape[a.ndim - 1])
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += gr[i, j] * p[i, j]
        for j in range(k):
            dx[i, j] = p[i, j] * (gr[i, j] - s)
    return out


def layernorm_fwd(x, gain, bias, double eps):
    a, flat = _rows(x)
    cdef Py_ssize_t n = flat.shape[0], k = flat.shape[1], i, j
    out = np.empty_like(a)
    lead_shape = a.shape[: a.ndim - 1] + (1,)
    mean = np.empty(n)
    rstd = np.empty(n)
    g = np.ascontiguousarray(gain, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64)
    cdef double[:, ::1] xv = flat
    cdef double[:, ::1] yv = out.reshape(-1, k)
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef double[::1] gv = g
    cdef double[::1] bv = b
    cdef double mu, var, d
    for i in range(n):
        mu = 0.0
        for j in range(k):
            mu += xv[i, j]
        mu /= k
        var = 0.0
        for j in range(k):
            d = xv[i, j] - mu
            var += d * d
        var /= k
        mv[i] = mu
        rv[i] = 1.0 / sqrt(var + eps)
        for j in range(k):
            yv[i, j] = (xv[i, j] - mu) * rv[i] * gv[j] + bv[j]
    return out, mean.reshape(lead_shape), rstd.reshape(lead_shape)


def layernorm_bwd(x, gain, mean, rstd, grad):
    a, flat_x = _rows(x)
    g_arr, flat_g = _rows(grad)
    cdef Py_ssize_t n = flat_x.shape[0], k = flat_x.shape[1], i, j
    dx = np.empty_like(a)
    dgain = np.zeros(k)
    dbias = np.zeros(k)
    gn = np.ascontiguousarray(gain, dtype=np.float64)
    mu = np.ascontiguousarray(mean, dtype=np.float64).reshape(-1)
    rs = np.ascontiguousarray(rstd, dtype=np.float64).reshape(-1)
    cdef double[:, ::1] xv = flat_x
    cdef double[:, ::1] gv = flat_g
    cdef double[:, ::1] dxv = dx.reshape(-1, k)
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef double[::1] gnv = gn
    cdef double[::1] muv = mu
    cdef double[::1] rsv = rs
    cdef double xhat, dxhat, s1, s2
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(k):
            xhat = (xv[i, j] - muv[i]) * rsv[i]
            dxhat = gv[i, j] * gnv[j]
            s1 += dxhat
            s2 += dxhat * xhat
            dgv[j] += gv[i, j] * xhat
            dbv[j] += gv[i, j]
        s1 /= k
        s2 /= k
        for j in range(k):
            xhat = (xv[i, j] - muv[i]) * rsv[i]
            dxhat = gv[i, j] * gnv[j]
            dxv[i, j] = rsv[i] * (dxhat - s1 - xhat * s2)
    return dx, dgain, dbias


def silu_fwd(x):
    """x * sigmoid(x). Returns (y, sigmoid) so backward can reuse it.

    The bulk exp goes through numpy's SIMD ufunc; the rest is one fused pass.
    """
    a = np.ascontiguousarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        e = np.exp(-a)
    out = np.empty_like(a)
    cdef double[::1] xv = a.reshape(-1)
    cdef double[::1] ev = e.reshape(-1)
    cdef double[::1] yv = out.reshape(-1)
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double s
    for i in range(n):
        s = 1.0 / (1.0 + ev[i])
        ev[i] = s
        yv[i] = xv[i] * s
    return out, e


def silu_bwd(x, sig, grad):
    a = np.ascontiguousarray(x, dtype=np.float64)
    s_arr = np.ascontiguousarray(sig, dtype=np.float64)
    g = np.ascontiguousarray(grad, dtype=np.float64)
    out = np.empty_like(a)
    cdef double[::1] xv = a.reshape(-1)
    cdef double[::1] sv = s_arr.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    cdef double[::1] yv = out.reshape(-1)
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double s
    for i in range(n):
        s = sv[i]
        yv[i] = gv[i] * (s * (1.0 + xv[i] * (1.0 - s)))
    return out


def adamw_update(param, grad, m, v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bias1, double bias2):
    cdef double[::1] pv = param.reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t n = pv.shape[0], i
    cdef double mhat, vhat
    for i in range(n):
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
        mhat = mv[i] / bias1
        vhat = vv[i] / bias2
        pv[i] -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * pv[i])
