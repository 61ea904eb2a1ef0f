"""MSE objective, Adam with decoupled weight decay, global-norm clipping, anchor penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from ._kernels import K
from .params import ParamSet


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient ``2 (pred - target) / n``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return K.mse_and_grad(pred, target)


def adam_step(ps: ParamSet, cfg: OptimConfig, step_count: int | None = None) -> None:
    """One Adam update of every block of ``ps`` using ``ps.grads``.

    ``step_count`` defaults to ``ps.step + 1``; bias correction uses it.
    Weight decay shrinks each parameter by ``lr * weight_decay * param``
    after the Adam move.
    """
    t = ps.step + 1 if step_count is None else int(step_count)
    if t < 1:
        raise ValueError("step_count must be >= 1")
    for name, g in ps.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {name!r}")
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in ps.params.items():
        K.adam_update(p, ps.grads[name], ps.m[name], ps.v[name],
                      cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2, cfg.weight_decay)
    ps.step = t
    ps.version += 1


def global_norm(*sets: ParamSet) -> float:
    return math.sqrt(sum(K.sumsq(g) for ps in sets for g in ps.grads.values()))


def clip_global_norm(sets, max_norm: float) -> float:
    """Scale all gradients of ``sets`` jointly so their L2 norm is at most ``max_norm``.

    The factor is ``max_norm / (norm + 1e-6)`` so rounding never leaves the
    clipped norm above the bound.  Returns the norm before clipping.
    """
    if isinstance(sets, ParamSet):
        sets = (sets,)
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(*sets)
    if norm > max_norm and math.isfinite(max_norm):
        factor = max_norm / (norm + 1e-6)
        for ps in sets:
            for g in ps.grads.values():
                g *= g.dtype.type(factor)
    return norm


def anchor_penalty(bank: ParamSet, anchor: ParamSet, lam: float) -> float:
    """Add ``2 lam (theta_c - anchor)`` to every channel's gradient; return ``lam * sum ||theta_c - anchor||^2``.

    ``anchor`` blocks carry a leading axis of size 1 that broadcasts over channels.
    """
    total = 0.0
    for name, p in bank.params.items():
        a = anchor.params[name]
        if a.shape[1:] != p.shape[1:]:
            raise ValueError(f"anchor block {name!r} has shape {a.shape}, bank block {p.shape}")
        if lam == 0.0:
            continue
        diff = p - a
        total += float(np.sum(diff.astype(np.float64) ** 2))
        bank.grads[name] += (2.0 * lam) * diff
    return lam * total
