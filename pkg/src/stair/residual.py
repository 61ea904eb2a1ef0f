"""Low-rank cross-variable residual adapter.

Each channel window is encoded by one shared linear map, channels are mixed
by ``M = U V^T`` with its diagonal zeroed, and the mixed codes are decoded by
a shared linear map that starts at exactly zero::

    e[b, j]  = x[b, :, j] @ enc_w + enc_b            (B, C, d_h)
    mixed    = M_offdiag @ e                         (per batch element)
    R[b,:,c] = scale * (mixed[b, c] @ dec_w + dec_b)

Channel ``c`` of the output never depends on channel ``c`` of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet, StaleCacheError


class ResidualParams(ParamSet):
    def __init__(self, C: int, L: int, H: int, d_h: int, rank: int, scale: float,
                 params: dict[str, np.ndarray]):
        super().__init__(params)
        self.C, self.L, self.H = C, L, H
        self.d_h, self.rank = d_h, rank
        self.scale = float(scale)

    def mixing(self) -> np.ndarray:
        """Effective channel mixing matrix with the diagonal removed."""
        M = self.params["U"] @ self.params["V"].T
        np.fill_diagonal(M, 0)
        return M

    def meta(self) -> dict:
        return {"C": self.C, "L": self.L, "H": self.H, "d_h": self.d_h,
                "rank": self.rank, "scale": self.scale}


def init_residual(C: int, L: int, H: int, d_h: int = 32, rank: int = 32, seed=0,
                  scale: float = 1.0, dtype=np.float32) -> ResidualParams:
    if C < 2:
        raise ValueError("the cross-variable residual needs at least two channels")
    if d_h < 1 or rank < 1:
        raise ValueError("d_h and rank must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    be = 1.0 / np.sqrt(L)
    bm = 1.0 / np.sqrt(rank)
    params = {
        "enc_w": rng.uniform(-be, be, size=(L, d_h)).astype(dtype),
        "enc_b": rng.uniform(-be, be, size=(d_h,)).astype(dtype),
        "U": rng.uniform(-bm, bm, size=(C, rank)).astype(dtype),
        "V": rng.uniform(-bm, bm, size=(C, rank)).astype(dtype),
        "dec_w": np.zeros((d_h, H), dtype=dtype),
        "dec_b": np.zeros((H,), dtype=dtype),
    }
    return ResidualParams(C, L, H, d_h, rank, scale, params)


@dataclass
class ResidualCache:
    params_id: int
    version: int
    x: np.ndarray       # (B, C, L)
    e: np.ndarray       # (B, C, d_h)
    M: np.ndarray       # (C, C), diagonal zeroed
    mixed: np.ndarray   # (B, C, d_h)


def forward_residual(rp: ResidualParams, x: np.ndarray):
    """``x`` is (B, L, C) in the normalized space; returns ``(R, cache)`` with R (B, H, C)."""
    if x.ndim != 3 or x.shape[2] != rp.C or x.shape[1] != rp.L:
        raise ValueError(f"expected B x {rp.L} x {rp.C} input, got {x.shape}")
    p = rp.params
    xc = np.ascontiguousarray(x.transpose(0, 2, 1), dtype=rp.dtype)
    e = xc @ p["enc_w"] + p["enc_b"]
    M = rp.mixing()
    mixed = np.matmul(M, e)
    out = mixed @ p["dec_w"] + p["dec_b"]
    if rp.scale != 1.0:
        out = out * rp.dtype.type(rp.scale)
    R = np.ascontiguousarray(out.transpose(0, 2, 1))
    return R, ResidualCache(id(rp), rp.version, xc, e, M, mixed)


def backward_residual(rp: ResidualParams, cache: ResidualCache, grad_R: np.ndarray) -> None:
    if cache.params_id != id(rp) or cache.version != rp.version:
        raise StaleCacheError("residual cache does not match the current parameters")
    if grad_R.shape != (cache.x.shape[0], rp.H, rp.C):
        raise ValueError(f"gradient shape {grad_R.shape} does not match residual output")
    p, gr = rp.params, rp.grads
    g = np.ascontiguousarray(grad_R.transpose(0, 2, 1), dtype=rp.dtype)  # (B, C, H)
    if rp.scale != 1.0:
        g = g * rp.dtype.type(rp.scale)
    d_h, H = rp.d_h, rp.H
    gr["dec_w"][...] = cache.mixed.reshape(-1, d_h).T @ g.reshape(-1, H)
    gr["dec_b"][...] = g.reshape(-1, H).sum(axis=0)
    d_mixed = g @ p["dec_w"].T                                   # (B, C, d_h)
    dM = np.einsum("bcd,bjd->cj", d_mixed, cache.e)
    np.fill_diagonal(dM, 0)                                      # masked entries are constants
    gr["U"][...] = dM @ p["V"]
    gr["V"][...] = dM.T @ p["U"]
    d_e = np.matmul(cache.M.T, d_mixed)                          # (B, C, d_h)
    gr["enc_w"][...] = cache.x.reshape(-1, rp.L).T @ d_e.reshape(-1, d_h)
    gr["enc_b"][...] = d_e.reshape(-1, d_h).sum(axis=0)
