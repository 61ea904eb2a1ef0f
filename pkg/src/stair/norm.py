"""Partial reversible instance normalization (alpha-RevIN).

Statistics come from the input window only and are reused to restore the
horizon.  ``alpha`` scales how much of the window mean is removed and the
power of the window std that divides the input:

    x_norm = (x - alpha * mu) / sigma ** alpha
    y      = y_norm * sigma ** alpha + alpha * mu

with ``sigma ** alpha`` evaluated as ``exp(alpha * log(sigma))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import K

NORM_EPS = 1e-5
MODES = ("full", "mean_only", "std_only", "none")
_MODE_ALIASES = {"mean-only": "mean_only", "std-only": "std_only", "revin": "full"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown normalization mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class NormState:
    mu: np.ndarray      # (B, C) window mean, float64
    sigma: np.ndarray   # (B, C) window std with eps inside the variance, float64
    alpha: float
    mode: str

    @property
    def identity(self) -> bool:
        return self.mode == "none" or self.alpha == 0.0

    def shift(self) -> np.ndarray:
        """``alpha * mu`` (zero for std-only)."""
        if self.mode in ("full", "mean_only"):
            return self.alpha * self.mu
        return np.zeros_like(self.mu)

    def scale(self) -> np.ndarray:
        """``sigma ** alpha`` (one for mean-only)."""
        if self.mode in ("full", "std_only"):
            return np.exp(self.alpha * np.log(self.sigma))
        return np.ones_like(self.sigma)


def fit_instance_stats(inputs: np.ndarray, alpha: float = 0.99, mode: str = "full") -> NormState:
    if inputs.ndim != 3 or inputs.shape[1] < 1:
        raise ValueError(f"inputs must be B x L x C with L >= 1, got {inputs.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    mu, sigma = K.instance_stats(np.ascontiguousarray(inputs), NORM_EPS)
    return NormState(mu, sigma, float(alpha), canonical_mode(mode))


def normalize(x: np.ndarray, state: NormState) -> np.ndarray:
    if state.identity:
        return x
    shift = state.shift().astype(x.dtype)
    scale = state.scale().astype(x.dtype)
    return K.shift_scale(np.ascontiguousarray(x), shift, scale)


def denormalize(y: np.ndarray, state: NormState) -> np.ndarray:
    if state.identity:
        return y
    shift = state.shift().astype(y.dtype)
    scale = state.scale().astype(y.dtype)
    return K.scale_shift(np.ascontiguousarray(y), scale, shift)


def denormalize_grad(grad_out: np.ndarray, state: NormState) -> np.ndarray:
    """Pull a gradient w.r.t. restored predictions back to the normalized space."""
    if state.identity or state.mode == "mean_only":
        return grad_out
    return grad_out * state.scale().astype(grad_out.dtype)[:, None, :]
