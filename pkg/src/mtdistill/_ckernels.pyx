# cython: language_level=3
"""Compiled row-wise loss kernels; same contracts as ``_pykernels``."""
import numpy as np

from libc.math cimport exp, log

cdef double EPS = 1e-12


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e, s
    if x >= 0:
        s = 1.0 / (1.0 + exp(-x))
    else:
        e = exp(x)
        s = e / (1.0 + e)
    if s < EPS:
        return EPS
    if s > 1.0 - EPS:
        return 1.0 - EPS
    return s


cdef void _softmax_row(const double[::1] z, double inv_t, double[::1] out) noexcept nogil:
    cdef Py_ssize_t d, n = z.shape[0]
    cdef double m = z[0] * inv_t, total = 0.0, v
    for d in range(1, n):
        v = z[d] * inv_t
        if v > m:
            m = v
    for d in range(n):
        v = exp(z[d] * inv_t - m)
        out[d] = v
        total += v
    for d in range(n):
        out[d] = out[d] / total


def sigmoid_rows(z):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty((zv.shape[0], zv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, d
    with nogil:
        for i in range(zv.shape[0]):
            for d in range(zv.shape[1]):
                ov[i, d] = _sigmoid(zv[i, d])
    return out


def softmax_rows(z, double temperature):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty((zv.shape[0], zv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double inv_t = 1.0 / temperature
    cdef Py_ssize_t i
    with nogil:
        for i in range(zv.shape[0]):
            _softmax_row(zv[i], inv_t, ov[i])
    return out


def softmax_xent(target, z, double temperature):
    cdef const double[:, ::1] yv = np.ascontiguousarray(target, dtype=np.float64)
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], dim = zv.shape[1], i, d
    values = np.empty(n, dtype=np.float64)
    grad = np.empty((n, dim), dtype=np.float64)
    cdef double[::1] vv = values
    cdef double[:, ::1] gv = grad
    cdef double inv_t = 1.0 / temperature, acc, ysum, p
    with nogil:
        for i in range(n):
            _softmax_row(zv[i], inv_t, gv[i])
            acc = 0.0
            ysum = 0.0
            for d in range(dim):
                p = gv[i, d]
                acc -= yv[i, d] * log(p if p > EPS else EPS)
                ysum += yv[i, d]
            vv[i] = acc
            for d in range(dim):
                gv[i, d] = (ysum * gv[i, d] - yv[i, d]) * inv_t
    return values, grad


def sigmoid_bce(target, z):
    cdef const double[:, ::1] yv = np.ascontiguousarray(target, dtype=np.float64)
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], dim = zv.shape[1], i, d
    values = np.empty(n, dtype=np.float64)
    grad = np.empty((n, dim), dtype=np.float64)
    cdef double[::1] vv = values
    cdef double[:, ::1] gv = grad
    cdef double acc, s, y
    with nogil:
        for i in range(n):
            acc = 0.0
            for d in range(dim):
                s = _sigmoid(zv[i, d])
                y = yv[i, d]
                acc -= y * log(s) + (1.0 - y) * log(1.0 - s)
                gv[i, d] = s - y
            vv[i] = acc
    return values, grad


def bin_expectation_rows(z, centers):
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], dim = zv.shape[1], i, d
    probs = np.empty((n, dim), dtype=np.float64)
    means = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] pv = probs
    cdef double[::1] mv = means
    cdef double acc
    with nogil:
        for i in range(n):
            _softmax_row(zv[i], 1.0, pv[i])
            acc = 0.0
            for d in range(dim):
                acc += cv[d] * pv[i, d]
            mv[i] = acc
    return means, probs
