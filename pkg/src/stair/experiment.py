"""Experiment configuration, the per-horizon three-stage runner, and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import save_checkpoint
from .dataio import SYNTHETIC_PRESETS, RawSeries, SplitSpec, SyntheticSpec, gen_synthetic, load_csv
from .training import (
    STAGE_DEFAULTS, CompositeModel, BackboneModel, NormConfig, PreparedData, StageConfig, StageReport,
    predict_windows, prepare_data, run_stage1, run_stage2, run_stage3, select_stage,
)

log = logging.getLogger(__name__)

STANDARD_HORIZONS = (96, 192, 336, 720)

# final Stage 1 capacities per benchmark
BACKBONE_PRESETS = {
    "etth1": {"layers": 1},
    "etth2": {"layers": 1},
    "exchange": {"layers": 1},
    "ettm1": {"layers": 2, "hidden": 512},
    "ettm2": {"layers": 2, "hidden": 512},
    "weather": {"layers": 2, "hidden": 512},
    "traffic": {"layers": 4, "hidden": 512},
    "solar": {"layers": 4, "hidden": 512},
    "electricity": {"layers": 4, "hidden": 1024},
    "linear": {"layers": 1},
    "mlp": {"layers": 2, "hidden": 512},
}
_PRESET_ALIASES = {"exchange_rate": "exchange", "ecl": "electricity", "solar_al": "solar",
                   "solar-energy": "solar"}

NORM_SWEEP = (
    ("none", NormConfig("none", 0.0)),
    ("alpha=0.95", NormConfig("full", 0.95)),
    ("alpha=0.99", NormConfig("full", 0.99)),
    ("revin", NormConfig("full", 1.0)),
)


class ConfigError(ValueError):
    pass


def preset_key(name: str | None) -> str | None:
    if name is None:
        return None
    k = name.lower()
    k = _PRESET_ALIASES.get(k, k)
    return k if k in BACKBONE_PRESETS else None


def default_split(name: str) -> str:
    k = name.lower()
    if k.startswith("etth"):
        return "ett-hourly"
    if k.startswith("ettm"):
        return "ett-minutely"
    return "ratio-7-1-2"


def horizon_seed(seed: int, horizon: int) -> int:
    """Per-horizon seed: ``seed XOR horizon``."""
    return int(seed) ^ int(horizon)


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    synthetic: dict | None = None
    name: str | None = None
    split: str | None = None
    lookback: int | None = None
    horizons: list | None = None
    preset: str | None = None
    backbone: dict = field(default_factory=dict)
    norm: dict = field(default_factory=dict)
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    stage3: dict = field(default_factory=dict)
    batch_size: int = 64
    seed: int = 2026
    dtype: str = "float32"
    save_predictions: bool = False
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def validate(self) -> None:
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'dataset' or 'synthetic' must be set")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for key, sub, allowed in (
            ("backbone", self.backbone, {"layers", "hidden", "activation", "dropout"}),
            ("norm", self.norm, {"mode", "alpha"}),
            ("stage1", self.stage1, {f.name for f in fields(StageConfig)}),
            ("stage2", self.stage2, {f.name for f in fields(StageConfig)}),
            ("stage3", self.stage3, {f.name for f in fields(StageConfig)}),
        ):
            if not isinstance(sub, dict):
                raise ConfigError(f"'{key}' must be an object")
            bad = sorted(set(sub) - allowed)
            if bad:
                raise ConfigError(f"unknown keys in '{key}': {bad}")
        if self.preset is not None and preset_key(self.preset) is None:
            raise ConfigError(f"unknown preset {self.preset!r}; known: {sorted(BACKBONE_PRESETS)}")
        try:
            self.norm_config()
            self.synthetic_spec()
            for s in (1, 2, 3):
                self.stage_config(s).optim
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    # -- resolution -------------------------------------------------------

    def synthetic_spec(self) -> SyntheticSpec | None:
        if self.synthetic is None:
            return None
        d = dict(self.synthetic)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in SYNTHETIC_PRESETS:
                raise ConfigError(f"unknown synthetic preset {preset!r}")
            return SYNTHETIC_PRESETS[preset](**d)
        return SyntheticSpec.from_dict(d)

    def dataset_name(self) -> str:
        if self.name:
            return self.name
        if self.dataset is not None:
            return Path(self.dataset).stem
        return "synthetic"

    def dataset_path(self) -> Path:
        p = Path(self.dataset)
        root = os.environ.get("STAIR_DATA_DIR")
        if not p.is_absolute() and root:
            p = Path(root) / p
        return p

    def resolved_lookback(self) -> int:
        if self.lookback is not None:
            return int(self.lookback)
        spec = self.synthetic_spec()
        return spec.L if spec is not None else 96

    def resolved_horizons(self) -> list[int]:
        if self.horizons is not None:
            return [int(h) for h in self.horizons]
        spec = self.synthetic_spec()
        return [spec.H] if spec is not None else list(STANDARD_HORIZONS)

    def resolved_split(self) -> str:
        return self.split or default_split(self.dataset_name())

    def backbone_dict(self) -> dict:
        base = {"layers": 1, "hidden": 512, "activation": "relu", "dropout": 0.1}
        key = preset_key(self.preset) or preset_key(self.dataset_name())
        if key is not None:
            base.update(BACKBONE_PRESETS[key])
        base.update(self.backbone)
        return base

    def backbone_config(self, horizon: int) -> BackboneConfig:
        return BackboneConfig(self.resolved_lookback(), horizon, **self.backbone_dict())

    def norm_config(self) -> NormConfig:
        d = {"mode": "full", "alpha": 0.99, **self.norm}
        if str(d["mode"]).lower() == "revin" and "alpha" not in self.norm:
            d["alpha"] = 1.0
        elif d["mode"] == "alpha":
            d["mode"] = "full"
        return NormConfig(**d)

    def stage_config(self, stage: int) -> StageConfig:
        over = {1: self.stage1, 2: self.stage2, 3: self.stage3}[stage]
        return replace(STAGE_DEFAULTS[stage], **over)

    def resolved(self) -> dict:
        """Fully explicit configuration (output directory excluded)."""
        spec = self.synthetic_spec()
        nc = self.norm_config()
        return {
            "dataset": self.dataset,
            "synthetic": None if spec is None else spec.to_dict(),
            "name": self.dataset_name(),
            "split": self.resolved_split(),
            "lookback": self.resolved_lookback(),
            "horizons": self.resolved_horizons(),
            "backbone": self.backbone_dict(),
            "norm": {"mode": nc.mode, "alpha": nc.alpha},
            "stage1": vars(self.stage_config(1)).copy(),
            "stage2": vars(self.stage_config(2)).copy(),
            "stage3": vars(self.stage_config(3)).copy(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dtype": self.dtype,
            "save_predictions": self.save_predictions,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def load_series(self) -> RawSeries:
        spec = self.synthetic_spec()
        if spec is not None:
            return gen_synthetic(spec)
        return load_csv(self.dataset_path())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class HorizonResult:
    horizon: int
    stages: list = field(default_factory=list)   # StageReport per stage run
    selected_stage: int | None = None
    failure: str | None = None

    def stage(self, k: int) -> StageReport | None:
        for r in self.stages:
            if r.stage == k:
                return r
        return None

    def to_dict(self, timing=False) -> dict:
        return {"horizon": self.horizon, "selected_stage": self.selected_stage, "failure": self.failure,
                "stages": [r.to_dict(timing) for r in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "HorizonResult":
        return cls(d["horizon"], [StageReport.from_dict(s) for s in d["stages"]],
                   d["selected_stage"], d["failure"])


@dataclass
class ExperimentReport:
    dataset: str
    config_hash: str
    horizons: list = field(default_factory=list)   # HorizonResult
    runtime: float = field(default=0.0, compare=False)

    def result(self, horizon: int) -> HorizonResult | None:
        for h in self.horizons:
            if h.horizon == horizon:
                return h
        return None

    def averages(self) -> dict | None:
        """Per-stage and selected-stage test means over the four standard horizons.

        ``None`` unless all of 96/192/336/720 completed.
        """
        done = {h.horizon: h for h in self.horizons if h.failure is None}
        if not all(k in done for k in STANDARD_HORIZONS):
            return None
        rows = [done[k] for k in STANDARD_HORIZONS]
        out = {}
        for s in (1, 2, 3):
            reps = [r.stage(s) for r in rows]
            if all(rep is not None for rep in reps):
                out[f"stage{s}"] = {"mse": float(np.mean([r.test_mse for r in reps])),
                                    "mae": float(np.mean([r.test_mae for r in reps]))}
        sel = [r.stage(r.selected_stage) for r in rows]
        out["selected"] = {"mse": float(np.mean([r.test_mse for r in sel])),
                           "mae": float(np.mean([r.test_mae for r in sel]))}
        return out

    def to_dict(self, timing=False) -> dict:
        d = {"dataset": self.dataset, "config_hash": self.config_hash,
             "horizons": [h.to_dict(timing) for h in self.horizons],
             "averages": self.averages()}
        if timing:
            d["runtime"] = self.runtime
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["dataset"], d["config_hash"], [HorizonResult.from_dict(h) for h in d["horizons"]],
                   d.get("runtime", 0.0))


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def format_table(report: ExperimentReport) -> str:
    """Stage-ablation table; ``↓`` marks a metric strictly below the previous stage's."""
    head = f"{'Dataset':<12}{'H':>5} | {'S1 MSE':>8}{'S1 MAE':>8} | {'S2 MSE':>8}{'S2 MAE':>8} | " \
           f"{'S3 MSE':>8}{'S3 MAE':>8} | {'Sel':>3}"
    lines = [head, "-" * len(head)]
    for h in report.horizons:
        if h.failure is not None:
            lines.append(f"{report.dataset:<12}{h.horizon:>5} | FAILED: {h.failure}")
            continue
        cells, prev = [], None
        for s in (1, 2, 3):
            r = h.stage(s)
            if r is None:
                cells.append(f"{'--':>8}{'--':>8}")
                prev = None
                continue
            mse = _fmt(r.test_mse) + ("↓" if prev is not None and r.test_mse < prev.test_mse else " ")
            mae = _fmt(r.test_mae) + ("↓" if prev is not None and r.test_mae < prev.test_mae else " ")
            cells.append(f"{mse:>8}{mae:>8}")
            prev = r
        lines.append(f"{report.dataset:<12}{h.horizon:>5} | " + " | ".join(cells) + f" | {h.selected_stage!s:>3}")
    avg = report.averages()
    if avg is not None:
        cells = []
        for s in (1, 2, 3):
            a = avg.get(f"stage{s}")
            cells.append(f"{_fmt(a['mse']) + ' ':>8}{_fmt(a['mae']) + ' ':>8}" if a else f"{'--':>8}{'--':>8}")
        lines.append(f"{report.dataset:<12}{'Avg':>5} | " + " | ".join(cells) + " |    ")
    return "\n".join(lines) + "\n"


CSV_COLUMNS = ("dataset", "horizon", "stage", "mse", "mae", "val_mse", "val_mae", "best_epoch")


def format_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for h in report.horizons:
        for r in h.stages:
            w.writerow([report.dataset, h.horizon, r.stage, repr(r.test_mse), repr(r.test_mae),
                        repr(r.best_val_mse), repr(r.best_val_mae), r.best_epoch])
    return buf.getvalue()


def format_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


_FORMATS = {"json": ("report.json", format_json), "csv": ("report.csv", format_csv),
            "table": ("report.txt", format_table), "text-table": ("report.txt", format_table)}


def emit_report(report: ExperimentReport, out_dir, formats=("json", "csv", "table")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    if isinstance(formats, str):
        formats = (formats,)
    paths = []
    for f in formats:
        if f not in _FORMATS:
            raise ValueError(f"unknown report format {f!r}")
        name, fn = _FORMATS[f]
        p = out / name
        p.write_text(fn(report), encoding="utf-8")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def run_horizon(config: ExperimentConfig, data: PreparedData, horizon: int,
                out_dir: Path | None) -> tuple[HorizonResult, dict]:
    seed = horizon_seed(config.seed, horizon)
    dtype = np.dtype(config.dtype)
    norm = config.norm_config()
    bs = config.batch_size
    res = HorizonResult(horizon)
    bank1, r1 = run_stage1(data, config.backbone_config(horizon), norm, config.stage_config(1), bs, seed, dtype)
    log.info("H=%d stage 1: val %.4f test %.4f", horizon, r1.best_val_mse, r1.test_mse)
    bank2, r2 = run_stage2(bank1, data, norm, config.stage_config(2), bs, seed)
    log.info("H=%d stage 2: val %.4f test %.4f", horizon, r2.best_val_mse, r2.test_mse)
    res.stages = [r1, r2]
    models = {1: BackboneModel(bank1, norm), 2: BackboneModel(bank2, norm)}
    if data.C >= 2:
        resid, r3 = run_stage3(bank2, data, norm, config.stage_config(3), bs, seed)
        log.info("H=%d stage 3: val %.4f test %.4f", horizon, r3.best_val_mse, r3.test_mse)
        res.stages.append(r3)
        models[3] = CompositeModel(bank2, resid, norm)
    res.selected_stage = select_stage(res.stages)
    if out_dir is not None:
        hdir = out_dir / str(horizon)
        meta = {"horizon": horizon, "seed": seed, "config_hash": config.config_hash()}
        save_checkpoint(hdir / "stage1.ckpt", backbone=bank1, meta={**meta, "stage": 1})
        save_checkpoint(hdir / "stage2.ckpt", backbone=bank2, meta={**meta, "stage": 2})
        if 3 in models:
            save_checkpoint(hdir / "stage3.ckpt", backbone=bank2, residual=models[3].residual,
                            meta={**meta, "stage": 3})
        if config.save_predictions:
            for k, m in models.items():
                preds, _ = predict_windows(m, data.test)
                np.save(hdir / f"stage{k}_test_predictions.npy", preds)
        _write_json(hdir / "manifest.json", {
            **meta,
            "selected_stage": res.selected_stage,
            "stages": {str(r.stage): {"best_epoch": r.best_epoch, "val_mse": r.best_val_mse,
                                      "val_mae": r.best_val_mae, "test_mse": r.test_mse,
                                      "test_mae": r.test_mae, "checkpoint": f"stage{r.stage}.ckpt"}
                       for r in res.stages},
        })
    return res, models


def run_experiment(config: ExperimentConfig, write: bool = True, out: str | os.PathLike | None = None
                   ) -> ExperimentReport:
    t0 = time.perf_counter()
    name = config.dataset_name()
    out_dir = Path(out if out is not None else config.out) / name if write else None
    series = config.load_series()
    spec = SplitSpec(config.resolved_split(), config.resolved_lookback())
    report = ExperimentReport(name, config.config_hash())
    timing = {}
    for h in config.resolved_horizons():
        try:
            data = prepare_data(series, spec, h, np.dtype(config.dtype))
            res, _ = run_horizon(config, data, h, out_dir)
        except Exception as exc:  # recorded, other horizons proceed
            log.exception("horizon %d failed", h)
            res = HorizonResult(h, failure=f"{type(exc).__name__}: {exc}")
        report.horizons.append(res)
        timing[str(h)] = {str(r.stage): r.wall_time for r in res.stages}
    report.runtime = time.perf_counter() - t0
    if out_dir is not None:
        emit_report(report, out_dir)
        for res in report.horizons:
            if res.failure is None:
                emit_report(ExperimentReport(name, report.config_hash, [res]), out_dir / str(res.horizon))
        _write_json(out_dir / "manifest.json", {
            "format": "stair-manifest", "format_version": 1,
            "config": config.resolved(), "config_hash": report.config_hash, "seed": config.seed,
            "report": report.to_dict(),
        })
        _write_json(out_dir / "timing.json", {"runtime": report.runtime, "stages": timing})
    return report


def load_manifest(path) -> tuple[ExperimentConfig, ExperimentReport]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    m = json.loads(p.read_text(encoding="utf-8"))
    if m.get("format") != "stair-manifest":
        raise ConfigError(f"{p}: not an experiment manifest")
    cfg = dict(m["config"])
    cfg["norm"] = dict(cfg["norm"])
    return ExperimentConfig.from_dict(cfg), ExperimentReport.from_dict(m["report"])


# ---------------------------------------------------------------------------
# ablation protocols
# ---------------------------------------------------------------------------

def ablate_norm(config: ExperimentConfig, write: bool = True, out=None, settings=NORM_SWEEP
                ) -> dict[str, ExperimentReport]:
    base = Path(out if out is not None else config.out)
    results = {}
    for label, nc in settings:
        cfg = replace(config, norm={"mode": nc.mode, "alpha": nc.alpha})
        results[label] = run_experiment(cfg, write, base / "ablate-norm" / label.replace("=", "-"))
    return results


def format_norm_table(results: dict[str, ExperimentReport]) -> str:
    labels = list(results)
    first = next(iter(results.values()))
    head = f"{'Dataset':<12}{'H':>5} | " + " | ".join(f"{lab:>17}" for lab in labels)
    lines = [head, f"{'':<17} | " + " | ".join(f"{'MSE':>8} {'MAE':>8}" for _ in labels), "-" * len(head)]
    for h in first.horizons:
        cells = []
        for lab in labels:
            r = results[lab].result(h.horizon)
            if r is None or r.failure is not None:
                cells.append(f"{'--':>8} {'--':>8}")
            else:
                s = r.stage(r.selected_stage)
                cells.append(f"{_fmt(s.test_mse):>8} {_fmt(s.test_mae):>8}")
        lines.append(f"{first.dataset:<12}{h.horizon:>5} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def capacity_compare(config: ExperimentConfig, write: bool = True, out=None, mlp: dict | None = None
                     ) -> dict[str, ExperimentReport]:
    """Linear versus MLP temporal mapping under the same staged protocol."""
    base = Path(out if out is not None else config.out)
    key = preset_key(config.preset) or preset_key(config.dataset_name())
    if mlp is None:
        mlp = BACKBONE_PRESETS[key] if key and BACKBONE_PRESETS[key]["layers"] > 1 else BACKBONE_PRESETS["mlp"]
    variants = {"linear": {"layers": 1}, "mlp": dict(mlp)}
    results = {}
    for label, bcfg in variants.items():
        cfg = replace(config, preset=None, backbone={**config.backbone, **bcfg})
        results[label] = run_experiment(cfg, write, base / "capacity" / label)
    return results


GRID_LAYERS = (1, 2, 3, 4)
GRID_HIDDEN = (64, 128, 256, 512, 1024)


def capacity_grid(config: ExperimentConfig, horizon: int, layers=GRID_LAYERS, hidden=GRID_HIDDEN
                  ) -> list[dict]:
    """Stage 1 validation MSE for every (layers, hidden) candidate, best first."""
    series = config.load_series()
    spec = SplitSpec(config.resolved_split(), config.resolved_lookback())
    data = prepare_data(series, spec, horizon, np.dtype(config.dtype))
    seed = horizon_seed(config.seed, horizon)
    rows = []
    for n in layers:
        for hdim in (hidden if n > 1 else (0,)):
            bcfg = {**config.backbone_dict(), "layers": n}
            if n > 1:
                bcfg["hidden"] = hdim
            _, rep = run_stage1(data, BackboneConfig(spec.lookback, horizon, **bcfg), config.norm_config(),
                                config.stage_config(1), config.batch_size, seed, np.dtype(config.dtype))
            rows.append({"layers": n, "hidden": hdim if n > 1 else None,
                         "val_mse": rep.best_val_mse, "val_mae": rep.best_val_mae})
    rows.sort(key=lambda r: (r["val_mse"], r["val_mae"], r["layers"], r["hidden"] or 0))
    return rows
