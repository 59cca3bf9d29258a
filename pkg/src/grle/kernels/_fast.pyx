# Compiled kernels: fused rowwise softmax family, GELU, RMS norm, AdamW.
# Same contracts as grle.kernels.py_backend; float32 and float64 via fused types.

import numpy as np

cimport cython
from libc.math cimport erf, exp, log, sqrt, INFINITY

ctypedef fused floating:
    float
    double

DEF INV_SQRT2 = 0.7071067811865476
DEF INV_SQRT_2PI = 0.3989422804014327


cdef inline object _empty2(Py_ssize_t r, Py_ssize_t c, bint single):
    return np.empty((r, c), dtype=np.float32 if single else np.float64)


cdef inline object _empty1(Py_ssize_t n, bint single):
    return np.empty(n, dtype=np.float32 if single else np.float64)


def softmax_rows(floating[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    out_np = _empty2(R, C, floating is float)
    cdef floating[:, ::1] out = out_np
    cdef floating m, s, v
    for i in range(R):
        m = -INFINITY
        for j in range(C):
            if x[i, j] > m:
                m = x[i, j]
        if m == -INFINITY:
            for j in range(C):
                out[i, j] = 0.0
            continue
        s = 0.0
        for j in range(C):
            v = <floating> exp(x[i, j] - m)
            out[i, j] = v
            s += v
        if s == 0.0:
            s = 1.0
        for j in range(C):
            out[i, j] /= s
    return out_np


def softmax_rows_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], i, j
    out_np = _empty2(R, C, floating is float)
    cdef floating[:, ::1] out = out_np
    cdef floating dot
    for i in range(R):
        dot = 0.0
        for j in range(C):
            dot += gy[i, j] * y[i, j]
        for j in range(C):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_np


def log_softmax_rows(floating[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    out_np = _empty2(R, C, floating is float)
    cdef floating[:, ::1] out = out_np
    cdef floating m, s, lse
    for i in range(R):
        m = -INFINITY
        for j in range(C):
            if x[i, j] > m:
                m = x[i, j]
        if m == -INFINITY:
            for j in range(C):
                out[i, j] = -INFINITY
            continue
        s = 0.0
        for j in range(C):
            s += <floating> exp(x[i, j] - m)
        if s == 0.0:
            s = 1.0
        lse = m + <floating> log(s)
        for j in range(C):
            out[i, j] = x[i, j] - lse
    return out_np


def log_softmax_rows_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], i, j
    out_np = _empty2(R, C, floating is float)
    cdef floating[:, ::1] out = out_np
    cdef floating gsum
    for i in range(R):
        gsum = 0.0
        for j in range(C):
            gsum += gy[i, j]
        for j in range(C):
            out[i, j] = gy[i, j] - <floating> exp(y[i, j]) * gsum
    return out_np


def _gelu_impl(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    for i in range(n):
        out[i] = <floating> (0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))


def _gelu_backward_impl(floating[::1] x, floating[::1] gy, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double cdf, pdf
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT_2PI
        out[i] = <floating> (gy[i] * (cdf + x[i] * pdf))


def gelu(x):
    arr = np.ascontiguousarray(x)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    _gelu_impl(flat, out)
    return out.reshape(arr.shape)


def gelu_backward(x, gy):
    arr = np.ascontiguousarray(x)
    garr = np.ascontiguousarray(gy)
    flat = arr.reshape(-1)
    gflat = garr.reshape(-1)
    out = np.empty_like(flat)
    _gelu_backward_impl(flat, gflat, out)
    return out.reshape(arr.shape)


def rms_norm_rows(floating[:, ::1] x, floating[::1] gain, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    out_np = _empty2(R, C, floating is float)
    inv_np = _empty1(R, floating is float)
    cdef floating[:, ::1] out = out_np
    cdef floating[::1] inv = inv_np
    cdef double s
    cdef floating iv
    for i in range(R):
        s = 0.0
        for j in range(C):
            s += x[i, j] * x[i, j]
        iv = <floating> (1.0 / sqrt(s / C + eps))
        inv[i] = iv
        for j in range(C):
            out[i, j] = x[i, j] * iv * gain[j]
    return out_np, inv_np


def rms_norm_rows_backward(floating[:, ::1] x, floating[::1] gain,
                           floating[::1] inv, floating[:, ::1] gy):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    gx_np = _empty2(R, C, floating is float)
    ggain_np = _empty1(C, floating is float)
    cdef floating[:, ::1] gx = gx_np
    cdef floating[::1] ggain = ggain_np
    cdef double ux
    cdef floating iv, u
    for j in range(C):
        ggain[j] = 0.0
    for i in range(R):
        iv = inv[i]
        ux = 0.0
        for j in range(C):
            ux += gy[i, j] * gain[j] * x[i, j]
        ux /= C
        for j in range(C):
            u = gy[i, j] * gain[j]
            gx[i, j] = <floating> (u * iv - x[i, j] * iv * iv * iv * ux)
            ggain[j] += gy[i, j] * x[i, j] * iv
    return gx_np, ggain_np


def adamw_update(floating[::1] param, floating[::1] grad,
                 floating[::1] m, floating[::1] v, long t,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double g, mh, vh
    for i in range(n):
        if weight_decay != 0.0:
            param[i] = <floating> (param[i] * (1.0 - lr * weight_decay))
        g = grad[i]
        m[i] = <floating> (beta1 * m[i] + (1.0 - beta1) * g)
        v[i] = <floating> (beta2 * v[i] + (1.0 - beta2) * g * g)
        mh = m[i] / bc1
        vh = v[i] / bc2
        param[i] = <floating> (param[i] - lr * mh / (sqrt(vh) + eps))
