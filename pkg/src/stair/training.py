"""Three-stage training: shared mapping, per-channel fine-tuning, cross-variable residual.

Every stage trains against dataset-standardized targets after the
instance normalization has been inverted, evaluates on the validation
windows after each epoch, and keeps the best-validation parameters.  The
state each stage starts from is evaluated as epoch 0, so a stage can never
hand over something worse on validation than what it received.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import backbone as bb
from .backbone import BackboneConfig, ParamBank
from .dataio import RawSeries, SplitSpec, WindowSet, batch_iter, fit_scaler, make_windows, split
from .metrics import compute_metrics
from .norm import canonical_mode, denormalize, denormalize_grad, fit_instance_stats, normalize
from .optim import OptimConfig, adam_step, anchor_penalty, clip_global_norm, mse_loss
from .params import ParamSet
from .residual import ResidualParams, backward_residual, forward_residual, init_residual

EVAL_BATCH = 256


@dataclass(frozen=True)
class NormConfig:
    mode: str = "full"
    alpha: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 20
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    anchor: float = 0.0     # stage 2 only
    hidden: int = 32        # stage 3 only
    rank: int = 32          # stage 3 only
    scale: float = 1.0      # stage 3 only

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm)


STAGE_DEFAULTS = {
    1: StageConfig(lr=1e-3),
    2: StageConfig(lr=1e-5, anchor=1e-4),
    3: StageConfig(lr=1e-5),
}


@dataclass
class StageReport:
    stage: int
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)   # index 0 is the starting state
    val_mae: list = field(default_factory=list)
    best_epoch: int = 0
    test_mse: float = float("nan")
    test_mae: float = float("nan")
    wall_time: float = field(default=0.0, compare=False)

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch]

    @property
    def best_val_mae(self) -> float:
        return self.val_mae[self.best_epoch]

    @property
    def init_val_mse(self) -> float:
        return self.val_mse[0]

    @property
    def init_val_mae(self) -> float:
        return self.val_mae[0]

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(**d)


@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    names: tuple

    @property
    def C(self) -> int:
        return self.train.segment.shape[1]

    @property
    def L(self) -> int:
        return self.train.L

    @property
    def H(self) -> int:
        return self.train.H


def prepare_data(series: RawSeries, spec: SplitSpec, horizon: int, dtype=np.float32) -> PreparedData:
    tr, va, te = split(series, spec)
    scaler = fit_scaler(tr)
    L = spec.lookback
    sets = [make_windows(scaler.apply(s), L, horizon, dtype) for s in (tr, va, te)]
    return PreparedData(*sets, series.names)


# ---------------------------------------------------------------------------
# models seen by the training loop
# ---------------------------------------------------------------------------

class BackboneModel:
    def __init__(self, bank: ParamBank, norm: NormConfig):
        self.bank, self.norm = bank, norm

    def predict(self, x, train=False, rng=None):
        state = fit_instance_stats(x, self.norm.alpha, self.norm.mode)
        y, cache = bb.forward(self.bank, normalize(x, state), train, rng)
        return denormalize(y, state), (state, cache)

    def backward(self, cache, grad):
        state, fc = cache
        bb.backward(self.bank, fc, denormalize_grad(grad, state))


class CompositeModel:
    """Frozen backbone plus residual, summed in the normalized space."""

    def __init__(self, bank: ParamBank, residual: ResidualParams, norm: NormConfig):
        self.bank, self.residual, self.norm = bank, residual, norm

    def predict_parts(self, x):
        state = fit_instance_stats(x, self.norm.alpha, self.norm.mode)
        xn = normalize(x, state)
        base = bb.predict(self.bank, xn)
        R, rc = forward_residual(self.residual, xn)
        return state, base, R, rc

    def predict(self, x, train=False, rng=None):
        state, base, R, rc = self.predict_parts(x)
        return denormalize(base + R, state), (state, rc)

    def backward(self, cache, grad):
        state, rc = cache
        backward_residual(self.residual, rc, denormalize_grad(grad, state))


def predict_windows(model, windows: WindowSet, batch_size: int = EVAL_BATCH):
    preds, targets = [], []
    for batch in batch_iter(windows, batch_size):
        preds.append(model.predict(batch.inputs)[0])
        targets.append(batch.targets)
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model, windows: WindowSet, batch_size: int = EVAL_BATCH) -> tuple[float, float]:
    return compute_metrics(*predict_windows(model, windows, batch_size))


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------

def _fit(stage: int, model, trainable: ParamSet, data: PreparedData, cfg: StageConfig,
         batch_size: int, rng: np.random.Generator, anchor: ParamSet | None = None) -> StageReport:
    t0 = time.perf_counter()
    rep = StageReport(stage)
    vm, va = evaluate(model, data.val)
    rep.val_mse.append(vm)
    rep.val_mae.append(va)
    best_snap, best = trainable.snapshot(), vm
    opt = cfg.optim
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in batch_iter(data.train, batch_size, shuffle=True, seed=rng):
            pred, cache = model.predict(batch.inputs, train=True, rng=rng)
            loss, grad = mse_loss(pred, batch.targets)
            model.backward(cache, grad)
            if anchor is not None and cfg.anchor > 0:
                loss += anchor_penalty(trainable, anchor, cfg.anchor)
            clip_global_norm(trainable, opt.clip_norm)
            adam_step(trainable, opt)
            losses.append(loss)
        rep.train_loss.append(float(np.mean(losses)))
        vm, va = evaluate(model, data.val)
        rep.val_mse.append(vm)
        rep.val_mae.append(va)
        if vm < best:
            best, best_snap, rep.best_epoch, stale = vm, trainable.snapshot(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    trainable.restore(best_snap)
    rep.test_mse, rep.test_mae = evaluate(model, data.test)
    rep.wall_time = time.perf_counter() - t0
    return rep


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stage)])


def run_stage1(data: PreparedData, backbone_cfg: BackboneConfig, norm: NormConfig = NormConfig(),
               cfg: StageConfig = STAGE_DEFAULTS[1], batch_size: int = 64, seed: int = 2026,
               dtype=np.float32) -> tuple[ParamBank, StageReport]:
    rng = stage_rng(seed, 1)
    bank = bb.init_shared(backbone_cfg, rng, dtype)
    rep = _fit(1, BackboneModel(bank, norm), bank, data, cfg, batch_size, rng)
    return bank, rep


def run_stage2(shared: ParamBank, data: PreparedData, norm: NormConfig = NormConfig(),
               cfg: StageConfig = STAGE_DEFAULTS[2], batch_size: int = 64,
               seed: int = 2026) -> tuple[ParamBank, StageReport]:
    rng = stage_rng(seed, 2)
    bank = bb.clone_to_individual(shared, data.C)
    rep = _fit(2, BackboneModel(bank, norm), bank, data, cfg, batch_size, rng, anchor=shared)
    return bank, rep


def run_stage3(individual: ParamBank, data: PreparedData, norm: NormConfig = NormConfig(),
               cfg: StageConfig = STAGE_DEFAULTS[3], batch_size: int = 64,
               seed: int = 2026) -> tuple[ResidualParams, StageReport]:
    if data.C < 2:
        raise ValueError("stage 3 needs at least two channels")
    rng = stage_rng(seed, 3)
    res = init_residual(data.C, data.L, data.H, cfg.hidden, cfg.rank, rng, cfg.scale, individual.dtype)
    rep = _fit(3, CompositeModel(individual, res, norm), res, data, cfg, batch_size, rng)
    return res, rep


def select_stage(reports) -> int:
    """Lowest validation MSE, then lowest validation MAE, then earliest stage."""
    best = min(reports, key=lambda r: (r.best_val_mse, r.best_val_mae, r.stage))
    return best.stage


def with_overrides(cfg: StageConfig, **kw) -> StageConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
