"""Command line entry point: ``stair <command> ...``.

Exit status is 0 on success, 1 when a run completes with failures
(a failed horizon, a gradient check above tolerance, a metric mismatch on
re-evaluation) and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .dataio import SYNTHETIC_PRESETS, DataFormatError, SplitSpec, gen_synthetic, save_csv
from .experiment import (
    ConfigError, ExperimentConfig, ablate_norm, capacity_compare, capacity_grid, emit_report,
    format_csv, format_json, format_norm_table, format_table, load_manifest, run_experiment,
)
from .gradcheck import format_results, run_gradchecks
from .training import BackboneModel, CompositeModel, evaluate, prepare_data

log = logging.getLogger("stair")

FORMATS = ("table", "json", "csv")
_FORMATTERS = {"table": format_table, "json": format_json, "csv": format_csv}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--dataset", help="CSV path (overrides the configuration)")
    p.add_argument("--horizon", type=int, action="append", help="forecast horizon; repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root directory")
    p.add_argument("--preset", help="backbone preset (dataset name, 'linear' or 'mlp')")
    p.add_argument("--norm", choices=("alpha", "revin", "none", "full", "mean_only", "std_only"),
                   help="alpha: partial normalization with --alpha (default 0.99); revin: alpha=1")
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int, help="epochs for every stage")
    p.add_argument("--format", choices=FORMATS, default="table", help="stdout report format")
    p.add_argument("--no-write", action="store_true", help="do not write checkpoints or reports")


def build_config(args) -> ExperimentConfig:
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    if args.dataset:
        d["dataset"] = args.dataset
        d.pop("synthetic", None)
    if args.horizon:
        d["horizons"] = args.horizon
    for key in ("seed", "out", "preset"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.norm is not None or args.alpha is not None:
        norm = dict(d.get("norm", {}))
        if args.norm is not None:
            norm["mode"] = args.norm
        if args.alpha is not None:
            norm["alpha"] = args.alpha
        d["norm"] = norm
    if args.epochs is not None:
        for s in ("stage1", "stage2", "stage3"):
            d[s] = {**d.get(s, {}), "epochs": args.epochs}
    if "dataset" not in d and "synthetic" not in d:
        raise ConfigError("no dataset given: use --config or --dataset")
    return ExperimentConfig.from_dict(d)


def _print_report(report, fmt: str) -> None:
    sys.stdout.write(_FORMATTERS[fmt](report))


def _failed(report) -> bool:
    return any(h.failure is not None for h in report.horizons)


def cmd_train(args) -> int:
    cfg = build_config(args)
    report = run_experiment(cfg, write=not args.no_write)
    _print_report(report, args.format)
    if not args.no_write:
        log.info("wrote %s", Path(cfg.out) / cfg.dataset_name())
    return 1 if _failed(report) else 0


def cmd_ablate_norm(args) -> int:
    cfg = build_config(args)
    results = ablate_norm(cfg, write=not args.no_write)
    if args.format == "json":
        json.dump({k: r.to_dict() for k, r in results.items()}, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        sys.stdout.write(format_norm_table(results))
    return 1 if any(_failed(r) for r in results.values()) else 0


def cmd_capacity(args) -> int:
    cfg = build_config(args)
    if args.grid:
        rows = capacity_grid(cfg, cfg.resolved_horizons()[0])
        if args.format == "json":
            json.dump(rows, sys.stdout, indent=2)
            sys.stdout.write("\n")
        else:
            for r in rows:
                hid = "-" if r["hidden"] is None else r["hidden"]
                print(f"layers={r['layers']} hidden={hid:>4} val_mse={r['val_mse']:.4f} val_mae={r['val_mae']:.4f}")
        return 0
    results = capacity_compare(cfg, write=not args.no_write)
    for label, rep in results.items():
        print(f"[{label}]")
        _print_report(rep, args.format)
    return 1 if any(_failed(r) for r in results.values()) else 0


def cmd_eval(args) -> int:
    """Reload every checkpoint of a run and recompute its test metrics."""
    run = Path(args.run)
    cfg, report = load_manifest(run)
    series = cfg.load_series()
    spec = SplitSpec(cfg.resolved_split(), cfg.resolved_lookback())
    norm = cfg.norm_config()
    status = 0
    for h in report.horizons:
        if h.failure is not None:
            print(f"H={h.horizon}: recorded failure: {h.failure}")
            status = 1
            continue
        data = prepare_data(series, spec, h.horizon, np.dtype(cfg.dtype))
        for st in h.stages:
            ck = load_checkpoint(run / str(h.horizon) / f"stage{st.stage}.ckpt")
            model = (CompositeModel(ck.backbone, ck.residual, norm) if ck.residual is not None
                     else BackboneModel(ck.backbone, norm))
            mse, mae = evaluate(model, data.test)
            ok = abs(mse - st.test_mse) <= args.tol and abs(mae - st.test_mae) <= args.tol
            status |= 0 if ok else 1
            print(f"H={h.horizon} stage {st.stage}: mse={mse:.6f} mae={mae:.6f} "
                  f"(recorded {st.test_mse:.6f} {st.test_mae:.6f}) {'ok' if ok else 'MISMATCH'}")
    return status


def cmd_report(args) -> int:
    _, report = load_manifest(args.run)
    if args.write:
        emit_report(report, args.run, ("json", "csv", "table"))
    _print_report(report, args.format)
    return 0


def cmd_synth(args) -> int:
    if args.spec:
        from .dataio import SyntheticSpec
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        kw = {}
        for key in ("C", "T", "seed"):
            if getattr(args, key) is not None:
                kw[key] = getattr(args, key)
        spec = SYNTHETIC_PRESETS[args.preset](**kw)
    series = gen_synthetic(spec)
    save_csv(series, args.out)
    Path(args.out).with_suffix(".spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n",
                                                         encoding="utf-8")
    print(f"wrote {args.out}: T={series.T} C={series.C}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seed=args.seed)
    sys.stdout.write(format_results(results))
    return 0 if all(r.ok for r in results) else 1


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stair", description="Stagewise long-horizon forecasting.")
    ap.add_argument("--version", action="version", version=f"stair {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run all stages for every horizon")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-stages", help="train and print the per-stage table")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate-norm", help="compare none, alpha=0.95, alpha=0.99 and full normalization")
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate_norm)

    p = sub.add_parser("capacity", help="linear versus MLP mapping, or a layer/width grid")
    _add_run_options(p)
    p.add_argument("--grid", action="store_true", help="score the layer x width grid on stage 1 validation")
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("eval", help="re-evaluate the checkpoints of a finished run")
    p.add_argument("--run", required=True, help="<out>/<dataset> directory")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print or rewrite the report of a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--format", choices=FORMATS, default="table")
    p.add_argument("--write", action="store_true", help="rewrite report.{json,csv,txt}")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p.add_argument("--preset", choices=sorted(SYNTHETIC_PRESETS), default="shared")
    p.add_argument("--spec", help="JSON synthetic specification (overrides --preset)")
    p.add_argument("--C", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"stair: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
