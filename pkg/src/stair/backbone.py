"""Temporal mapping applied along the time axis of every channel.

A bank holds either one parameter set used by all channels (``shared``) or
one set per channel (``individual``).  Every weight is stored with a leading
group axis: size 1 for shared banks, C for individual banks, with layout
``(group, fan_in, fan_out)`` so that the forward pass is ``z @ W + b``.

Inputs are processed channel-major as ``(C, B, L)``.  Shared weights are
broadcast across the channel axis, so a shared bank and its individual
clone evaluate exactly the same per-channel products.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .params import ParamSet, StaleCacheError

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class BackboneConfig:
    input_len: int
    horizon: int
    layers: int = 1
    hidden: int = 512
    activation: str = "relu"
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.layers > 1 and self.hidden < 1:
            raise ValueError("hidden must be >= 1 for multi-layer mappings")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.input_len < 1 or self.horizon < 1:
            raise ValueError("input_len and horizon must be >= 1")

    @property
    def dims(self) -> list[int]:
        return [self.input_len] + [self.hidden] * (self.layers - 1) + [self.horizon]

    @property
    def uses_dropout(self) -> bool:
        return self.layers > 1 and self.activation != "none" and self.dropout > 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class ParamBank(ParamSet):
    def __init__(self, config: BackboneConfig, kind: str, params: dict[str, np.ndarray]):
        if kind not in ("shared", "individual"):
            raise ValueError(f"unknown bank kind {kind!r}")
        super().__init__(params)
        self.config = config
        self.kind = kind

    @property
    def groups(self) -> int:
        return self.params["w0"].shape[0]

    def weight(self, k: int) -> np.ndarray:
        return self.params[f"w{k}"]

    def bias(self, k: int) -> np.ndarray:
        return self.params[f"b{k}"]

    def __repr__(self) -> str:
        return f"ParamBank(kind={self.kind}, groups={self.groups}, dims={self.config.dims})"


def init_shared(config: BackboneConfig, seed=0, dtype=np.float32) -> ParamBank:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases for every layer."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    dims = config.dims
    for k, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fi)
        params[f"w{k}"] = rng.uniform(-bound, bound, size=(1, fi, fo)).astype(dtype)
        params[f"b{k}"] = rng.uniform(-bound, bound, size=(1, fo)).astype(dtype)
    return ParamBank(config, "shared", params)


def clone_to_individual(shared: ParamBank, C: int) -> ParamBank:
    if shared.kind != "shared":
        raise ValueError("clone_to_individual expects a shared bank")
    if C < 1:
        raise ValueError("C must be >= 1")
    params = {k: np.repeat(v, C, axis=0) for k, v in shared.params.items()}
    return ParamBank(shared.config, "individual", params)


@dataclass
class ForwardCache:
    bank_id: int
    version: int
    C: int
    inputs: list      # per layer input, (C, B, fan_in)
    pre: list         # pre-activation of hidden layers
    masks: list       # dropout masks (or None) of hidden layers


def _check_input(bank: ParamBank, x: np.ndarray) -> int:
    if x.ndim != 3:
        raise ValueError(f"expected B x L x C input, got shape {x.shape}")
    B, L, C = x.shape
    if L != bank.config.input_len:
        raise ValueError(f"input length {L} does not match bank input_len {bank.config.input_len}")
    if bank.kind == "individual" and C != bank.groups:
        raise ValueError(f"individual bank has {bank.groups} channels, input has {C}")
    return C


def forward(bank: ParamBank, x: np.ndarray, train_mode: bool = False, rng=None):
    """Map ``x`` (B, L, C) to (B, H, C); returns ``(y, cache)``.

    Dropout follows each hidden layer only when ``train_mode`` is set and the
    activation is not ``none``; ``rng`` (int seed or Generator) drives the masks.
    """
    C = _check_input(bank, x)
    cfg = bank.config
    z = np.ascontiguousarray(x.transpose(2, 0, 1), dtype=bank.dtype)
    drop = train_mode and cfg.uses_dropout
    if drop and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    inputs, pre, masks = [], [], []
    n = cfg.layers
    for k in range(n):
        inputs.append(z)
        h = np.matmul(z, bank.weight(k))
        h += bank.bias(k)[:, None, :]
        if k < n - 1:
            pre.append(h)
            if cfg.activation == "relu":
                h = np.maximum(h, 0)
            mask = None
            if drop:
                keep = 1.0 - cfg.dropout
                mask = (rng.random(h.shape) < keep).astype(h.dtype) / h.dtype.type(keep)
                h = h * mask
            masks.append(mask)
        z = h
    y = np.ascontiguousarray(z.transpose(1, 2, 0))
    return y, ForwardCache(id(bank), bank.version, C, inputs, pre, masks)


def backward(bank: ParamBank, cache: ForwardCache, grad_y: np.ndarray) -> None:
    """Fill ``bank.grads`` with the gradient of a loss whose output gradient is ``grad_y``."""
    if cache.bank_id != id(bank) or cache.version != bank.version:
        raise StaleCacheError("forward cache does not match the current bank parameters")
    cfg = bank.config
    if grad_y.shape[2] != cache.C or grad_y.shape[1] != cfg.horizon:
        raise ValueError(f"gradient shape {grad_y.shape} does not match forward output")
    g = np.ascontiguousarray(grad_y.transpose(2, 0, 1), dtype=bank.dtype)  # (C, B, out)
    shared = bank.kind == "shared"
    for k in reversed(range(cfg.layers)):
        z = cache.inputs[k]
        if shared:
            fi, fo = z.shape[2], g.shape[2]
            bank.grads[f"w{k}"][0] = z.reshape(-1, fi).T @ g.reshape(-1, fo)
            bank.grads[f"b{k}"][0] = g.reshape(-1, fo).sum(axis=0)
        else:
            bank.grads[f"w{k}"][...] = np.matmul(z.transpose(0, 2, 1), g)
            bank.grads[f"b{k}"][...] = g.sum(axis=1)
        if k == 0:
            break
        g = np.matmul(g, bank.weight(k).transpose(0, 2, 1))
        mask = cache.masks[k - 1]
        if mask is not None:
            g = g * mask
        if cfg.activation == "relu":
            g = g * (cache.pre[k - 1] > 0)


def predict(bank: ParamBank, x: np.ndarray) -> np.ndarray:
    return forward(bank, x, train_mode=False)[0]


def export_joint_matrix(bank: ParamBank, C: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Flattened ``(HC x LC)`` operator and ``(HC,)`` bias of a linear bank.

    Flattening is channel-major: input index ``c*L + t``, output ``c*H + h``.
    Shared banks need ``C``; individual banks use their own channel count.
    """
    if bank.config.layers != 1:
        raise NotImplementedError("joint-matrix export is only defined for one-layer linear banks")
    if bank.kind == "individual":
        if C is not None and C != bank.groups:
            raise ValueError(f"bank has {bank.groups} channels, C={C} requested")
        C = bank.groups
    elif C is None:
        raise ValueError("C is required to export a shared bank")
    L, H = bank.config.input_len, bank.config.horizon
    W = np.zeros((H * C, L * C), dtype=bank.dtype)
    bias = np.empty(H * C, dtype=bank.dtype)
    w, b = bank.weight(0), bank.bias(0)
    for c in range(C):
        g = 0 if bank.kind == "shared" else c
        W[c * H:(c + 1) * H, c * L:(c + 1) * L] = w[g].T
        bias[c * H:(c + 1) * H] = b[g]
    return W, bias


def channel_major(x: np.ndarray) -> np.ndarray:
    """``vec`` of each (L, C) window in channel-major order: shape (B, L*C)."""
    return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(x.shape[0], -1)
