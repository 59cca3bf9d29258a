"""Kernel backend selection.

The compiled extension (grle.kernels._fast, Cython) is used when it imported
successfully; otherwise the numpy backend takes over. Set GRLE_KERNELS to
"python" or "cython" to force a choice, or call set_backend() at runtime.
"""

import os

from . import py_backend

_BACKENDS = {"python": py_backend}

try:
    from . import _fast

    _BACKENDS["cython"] = _fast
except ImportError:
    _fast = None

_active = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _active
    if name == "auto":
        name = "cython" if "cython" in _BACKENDS else "python"
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active = name


def get_backend():
    return _active


set_backend(os.environ.get("GRLE_KERNELS", "auto"))


def softmax_rows(x):
    return _BACKENDS[_active].softmax_rows(x)


def softmax_rows_backward(y, gy):
    return _BACKENDS[_active].softmax_rows_backward(y, gy)


def log_softmax_rows(x):
    return _BACKENDS[_active].log_softmax_rows(x)


def log_softmax_rows_backward(y, gy):
    return _BACKENDS[_active].log_softmax_rows_backward(y, gy)


def gelu(x):
    return _BACKENDS[_active].gelu(x)


def gelu_backward(x, gy):
    return _BACKENDS[_active].gelu_backward(x, gy)


def rms_norm_rows(x, gain, eps):
    return _BACKENDS[_active].rms_norm_rows(x, gain, eps)


def rms_norm_rows_backward(x, gain, inv, gy):
    return _BACKENDS[_active].rms_norm_rows_backward(x, gain, inv, gy)


def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    return _BACKENDS[_active].adamw_update(
        param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay
    )
