"""Elementwise hot loops with a numba path and a pure-numpy path.

The numba kernels are used when numba imports cleanly and the environment
variable ``STAIR_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``numpy_kernels`` / ``numba_kernels`` so tests and the
benchmark can compare them directly.

Dense matrix products are left to numpy/BLAS on both paths.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


def _env_disabled() -> bool:
    return os.environ.get("STAIR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _np_instance_stats(x, eps):
    # x: (B, L, C); returns float64 mean and std, each (B, C)
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=1)
    var = ((x64 - mu[:, None, :]) ** 2).mean(axis=1)
    return mu, np.sqrt(var + eps)


def _np_shift_scale(x, shift, scale):
    # (x - shift) / scale with (B, C) statistics broadcast over time
    return ((x - shift[:, None, :]) / scale[:, None, :]).astype(x.dtype, copy=False)


def _np_scale_shift(y, scale, shift):
    return (y * scale[:, None, :] + shift[:, None, :]).astype(y.dtype, copy=False)


def _np_gather_windows(segment, starts, L, H):
    offs = starts[:, None]
    x = segment[offs + np.arange(L)[None, :]]
    y = segment[offs + L + np.arange(H)[None, :]]
    return x, y


def _np_mse_and_grad(pred, target):
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    loss = float(np.mean(diff * diff))
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype)


def _np_adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, wd):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * mhat / (np.sqrt(vhat) + eps)
    if wd != 0.0:
        p -= (lr * wd) * p


def _np_sumsq(a):
    return float(np.dot(a.ravel().astype(np.float64), a.ravel().astype(np.float64)))


numpy_kernels = SimpleNamespace(
    name="numpy",
    instance_stats=_np_instance_stats,
    shift_scale=_np_shift_scale,
    scale_shift=_np_scale_shift,
    gather_windows=_np_gather_windows,
    mse_and_grad=_np_mse_and_grad,
    adam_update=_np_adam_update,
    sumsq=_np_sumsq,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_instance_stats(x, eps):
    B, L, C = x.shape
    mu = np.empty((B, C), dtype=np.float64)
    sd = np.empty((B, C), dtype=np.float64)
    for b in range(B):
        for c in range(C):
            s = 0.0
            for t in range(L):
                s += x[b, t, c]
            m = s / L
            q = 0.0
            for t in range(L):
                d = x[b, t, c] - m
                q += d * d
            mu[b, c] = m
            sd[b, c] = np.sqrt(q / L + eps)
    return mu, sd


@njit(cache=True)
def _nb_shift_scale(x, shift, scale):
    B, T, C = x.shape
    out = np.empty_like(x)
    for b in range(B):
        for t in range(T):
            for c in range(C):
                out[b, t, c] = (x[b, t, c] - shift[b, c]) / scale[b, c]
    return out


@njit(cache=True)
def _nb_scale_shift(y, scale, shift):
    B, T, C = y.shape
    out = np.empty_like(y)
    for b in range(B):
        for t in range(T):
            for c in range(C):
                out[b, t, c] = y[b, t, c] * scale[b, c] + shift[b, c]
    return out


@njit(cache=True)
def _nb_gather_windows(segment, starts, L, H):
    n = starts.shape[0]
    C = segment.shape[1]
    x = np.empty((n, L, C), dtype=segment.dtype)
    y = np.empty((n, H, C), dtype=segment.dtype)
    for i in range(n):
        s = starts[i]
        for t in range(L):
            for c in range(C):
                x[i, t, c] = segment[s + t, c]
        for t in range(H):
            for c in range(C):
                y[i, t, c] = segment[s + L + t, c]
    return x, y


@njit(cache=True)
def _nb_mse_kernel(pred, target, grad):
    p = pred.ravel()
    q = target.ravel()
    g = grad.ravel()
    n = p.shape[0]
    acc = 0.0
    scale = 2.0 / n
    for i in range(n):
        d = np.float64(p[i]) - np.float64(q[i])
        acc += d * d
        g[i] = scale * d
    return acc / n


def _nb_mse_and_grad(pred, target):
    pred = np.ascontiguousarray(pred)
    target = np.ascontiguousarray(target)
    grad = np.empty_like(pred)
    loss = _nb_mse_kernel(pred, target, grad)
    return float(loss), grad


@njit(cache=True)
def _nb_adam_kernel(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, wd):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        pi = p[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        if wd != 0.0:
            pi = pi - (lr * wd) * pi
        p[i] = pi


def _nb_adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, wd):
    # in-place on contiguous parameter/moment buffers of any shape
    _nb_adam_kernel(
        p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
        lr, beta1, beta2, eps, bc1, bc2, wd,
    )


@njit(cache=True)
def _nb_sumsq_kernel(a):
    s = 0.0
    for i in range(a.shape[0]):
        x = np.float64(a[i])
        s += x * x
    return s


def _nb_sumsq(a):
    return float(_nb_sumsq_kernel(np.ascontiguousarray(a).reshape(-1)))


numba_kernels = SimpleNamespace(
    name="numba",
    instance_stats=_nb_instance_stats,
    shift_scale=_nb_shift_scale,
    scale_shift=_nb_scale_shift,
    gather_windows=_nb_gather_windows,
    mse_and_grad=_nb_mse_and_grad,
    adam_update=_nb_adam_update,
    sumsq=_nb_sumsq,
)


def select_kernels():
    """Return the kernel namespace honoring ``STAIR_DISABLE_NUMBA``."""
    if NUMBA_AVAILABLE and not _env_disabled():
        return numba_kernels
    return numpy_kernels


K = select_kernels()
BACKEND = K.name
