"""Numpy implementations of the hot kernels.

Reference backend; grle.kernels._fast provides the compiled equivalents.
Rowwise kernels take C-contiguous 2-D arrays (float32 or float64) and reduce
along axis 1. A row whose maximum is -inf (fully masked) yields all-zero
probabilities from softmax_rows and all -inf from log_softmax_rows.
"""

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    y = np.exp(x - m)
    s = y.sum(axis=1, keepdims=True)
    s[s == 0.0] = 1.0
    y /= s
    return y


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_rows(x):
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    s = np.exp(shifted).sum(axis=1, keepdims=True)
    s[s == 0.0] = 1.0
    return shifted - np.log(s)


def log_softmax_rows_backward(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return gy * (cdf + x * pdf)


def rms_norm_rows(x, gain, eps):
    """Returns (y, inv_rms); inv_rms is kept for the backward pass."""
    ms = np.mean(x * x, axis=1, keepdims=True) + eps
    inv = 1.0 / np.sqrt(ms)
    return x * inv * gain, inv[:, 0]


def rms_norm_rows_backward(x, gain, inv, gy):
    n = x.shape[1]
    inv = inv[:, None]
    u = gy * gain
    ux = (u * x).sum(axis=1, keepdims=True)
    gx = u * inv - x * (inv**3) * (ux / n)
    ggain = (gy * x * inv).sum(axis=0)
    return gx, ggain


def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """In-place decoupled-weight-decay Adam step on flat 1-D views."""
    if weight_decay != 0.0:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
