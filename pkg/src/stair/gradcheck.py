"""Central finite-difference checks of every analytic gradient, in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .backbone import BackboneConfig
from .optim import anchor_penalty, mse_loss
from .residual import backward_residual, forward_residual, init_residual
from .training import BackboneModel, CompositeModel, NormConfig

STEP = 1e-5
FLOOR = 1e-6
TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_params(ps, loss_and_grad, step: float = STEP) -> float:
    """Compare ``ps.grads`` after ``loss_and_grad()`` with central differences of its loss."""
    loss_and_grad()
    analytic = {k: g.copy() for k, g in ps.grads.items()}
    worst = 0.0
    for name, p in ps.params.items():
        num = np.empty_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            ps.version += 1
            up = loss_and_grad()
            flat[i] = old - step
            ps.version += 1
            down = loss_and_grad()
            flat[i] = old
            ps.version += 1
            nflat[i] = (up - down) / (2 * step)
        worst = max(worst, float(rel_error(analytic[name], num).max()))
    return worst


def _bank(layers: int, kind: str, L: int, H: int, C: int, hidden: int, rng) -> bb.ParamBank:
    cfg = BackboneConfig(L, H, layers=layers, hidden=hidden, dropout=0.0)
    bank = bb.init_shared(cfg, rng, np.float64)
    if kind == "individual":
        bank = bb.clone_to_individual(bank, C)
        for p in bank.params.values():   # break the clone symmetry
            p += 0.1 * rng.standard_normal(p.shape)
    return bank


def run_gradchecks(L: int = 8, H: int = 4, C: int = 3, hidden: int = 5, d_h: int = 3, rank: int = 2,
                   batch: int = 4, seed: int = 0) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, L, C))
    y = rng.standard_normal((batch, H, C))
    out = []

    # raw mapping under a random linear functional of its output
    G = rng.standard_normal((batch, H, C))
    for layers, label in ((1, "linear"), (2, "mlp2-relu"), (4, "mlp4-relu")):
        for kind in ("shared", "individual"):
            bank = _bank(layers, kind, L, H, C, hidden, rng)

            def f(bank=bank):
                yy, cache = bb.forward(bank, x)
                bb.backward(bank, cache, G)
                return float(np.sum(yy * G))

            out.append(GradcheckResult(f"backbone/{label}/{kind}", check_params(bank, f), bank.n_params))

    # full objective: instance normalization, MSE in the denormalized space, anchor penalty
    norm = NormConfig("full", 0.99)
    for layers, label in ((1, "linear"), (2, "mlp2-relu")):
        anchor = _bank(layers, "shared", L, H, C, hidden, rng)
        bank = _bank(layers, "individual", L, H, C, hidden, rng)
        model = BackboneModel(bank, norm)

        def f(model=model, bank=bank, anchor=anchor):
            pred, cache = model.predict(x)
            loss, grad = mse_loss(pred, y)
            model.backward(cache, grad)
            return loss + anchor_penalty(bank, anchor, 0.3)

        out.append(GradcheckResult(f"objective/{label}/individual+anchor", check_params(bank, f), bank.n_params))

    # residual alone, with every block randomized so no path is trivially zero
    res = init_residual(C, L, H, d_h, rank, rng, dtype=np.float64)
    for p in res.params.values():
        p[...] = rng.standard_normal(p.shape)
    Gr = rng.standard_normal((batch, H, C))

    def fr():
        R, cache = forward_residual(res, x)
        backward_residual(res, cache, Gr)
        return float(np.sum(R * Gr))

    out.append(GradcheckResult("residual", check_params(res, fr), res.n_params))

    # residual inside the composite objective over a frozen mapping
    res2 = init_residual(C, L, H, d_h, rank, rng, scale=0.7, dtype=np.float64)
    for p in res2.params.values():
        p[...] = rng.standard_normal(p.shape)
    comp = CompositeModel(_bank(2, "individual", L, H, C, hidden, rng), res2, norm)

    def fc():
        pred, cache = comp.predict(x)
        loss, grad = mse_loss(pred, y)
        comp.backward(cache, grad)
        return loss

    out.append(GradcheckResult("objective/composite-residual", check_params(res2, fc), res2.n_params))
    return out


def format_results(results: list[GradcheckResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{r.name:<{w}}  n={r.n_checked:<4d} max_rel_err={r.max_rel_error:.3e}  "
             f"{'ok' if r.ok else 'FAIL'}" for r in results]
    return "\n".join(lines) + "\n"
