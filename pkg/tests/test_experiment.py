import csv
import io
import json

import numpy as np
import pytest

from stair.experiment import (
    ConfigError, ExperimentConfig, ExperimentReport, HorizonResult, ablate_norm,
    capacity_compare, capacity_grid, emit_report, format_csv, format_json, format_norm_table, format_table,
    horizon_seed, load_manifest, run_experiment,
)
from stair.dataio import SplitSpec, batch_iter
from stair.metrics import compute_metrics
from stair.training import StageReport, prepare_data

FAST = {"epochs": 2, "lr": 1e-2}


def _cfg(tmp_path=None, **kw):
    d = {"synthetic": {"preset": "coupled", "T": 1000}, "norm": {"mode": "none"},
         "stage1": FAST, "stage2": FAST, "stage3": FAST}
    if tmp_path is not None:
        d["out"] = str(tmp_path)
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.mark.parametrize("bad", [
    {"dataset": "a.csv", "bogus": 1},
    {"dataset": "a.csv", "stage1": {"learning_rate": 1}},
    {"dataset": "a.csv", "synthetic": {"preset": "shared"}},
    {},
    {"dataset": "a.csv", "preset": "huge"},
    {"dataset": "a.csv", "norm": {"mode": "sometimes"}},
    {"dataset": "a.csv", "stage2": {"lr": -1}},
    {"dataset": "a.csv", "dtype": "float16"},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        ExperimentConfig.load(p)


def test_defaults_resolve():
    cfg = ExperimentConfig.from_dict({"dataset": "data/ETTh1.csv"})
    r = cfg.resolved()
    assert r["name"] == "ETTh1" and r["split"] == "ett-hourly"
    assert r["lookback"] == 96 and r["horizons"] == [96, 192, 336, 720]
    assert r["backbone"]["layers"] == 1
    assert r["norm"] == {"mode": "full", "alpha": 0.99}
    assert (r["stage1"]["lr"], r["stage2"]["lr"], r["stage3"]["lr"]) == (1e-3, 1e-5, 1e-5)
    assert r["stage2"]["anchor"] == 1e-4
    assert (r["stage3"]["hidden"], r["stage3"]["rank"], r["stage3"]["scale"]) == (32, 32, 1.0)
    assert r["batch_size"] == 64 and r["seed"] == 2026
    assert all(r[f"stage{s}"]["epochs"] == 20 and r[f"stage{s}"]["patience"] == 10 for s in (1, 2, 3))
    assert all(r[f"stage{s}"]["weight_decay"] == 1e-5 and r[f"stage{s}"]["clip_norm"] == 1.0 for s in (1, 2, 3))


@pytest.mark.parametrize("name, layers, hidden", [
    ("ETTh2", 1, None), ("ETTm1", 2, 512), ("ETTm2", 2, 512), ("weather", 2, 512),
    ("traffic", 4, 512), ("solar", 4, 512), ("electricity", 4, 1024), ("exchange_rate", 1, None),
])
def test_dataset_presets(name, layers, hidden):
    b = ExperimentConfig.from_dict({"dataset": f"{name}.csv"}).backbone_dict()
    assert b["layers"] == layers
    if hidden:
        assert b["hidden"] == hidden


def test_explicit_backbone_overrides_preset():
    cfg = ExperimentConfig.from_dict({"dataset": "ETTm1.csv", "backbone": {"hidden": 64}})
    assert cfg.backbone_dict()["layers"] == 2 and cfg.backbone_dict()["hidden"] == 64
    assert ExperimentConfig.from_dict({"dataset": "ETTm1.csv", "preset": "linear"}).backbone_dict()["layers"] == 1


def test_splits_by_name():
    assert ExperimentConfig.from_dict({"dataset": "ETTm2.csv"}).resolved_split() == "ett-minutely"
    assert ExperimentConfig.from_dict({"dataset": "weather.csv"}).resolved_split() == "ratio-7-1-2"


def test_revin_means_alpha_one():
    assert ExperimentConfig.from_dict({"dataset": "a.csv", "norm": {"mode": "revin"}}).norm_config().alpha == 1.0
    nc = ExperimentConfig.from_dict({"dataset": "a.csv", "norm": {"mode": "alpha", "alpha": 0.5}}).norm_config()
    assert (nc.mode, nc.alpha) == ("full", 0.5)


def test_data_dir_prefix(monkeypatch, tmp_path):
    cfg = ExperimentConfig.from_dict({"dataset": "ETTh1.csv"})
    monkeypatch.setenv("STAIR_DATA_DIR", str(tmp_path))
    assert cfg.dataset_path() == tmp_path / "ETTh1.csv"
    assert ExperimentConfig.from_dict({"dataset": "/abs/x.csv"}).dataset_path().as_posix() == "/abs/x.csv"


def test_hash_ignores_output_dir():
    assert _cfg(out="a").config_hash() == _cfg(out="b").config_hash()
    assert _cfg(seed=1).config_hash() != _cfg(seed=2).config_hash()


def test_horizon_seed():
    assert horizon_seed(2026, 96) == 2026 ^ 96
    assert len({horizon_seed(2026, h) for h in (96, 192, 336, 720)}) == 4


def test_shared_rule_run_shows_no_stage_gain():
    cfg = ExperimentConfig.from_dict({"synthetic": {"preset": "shared", "T": 2000}, "norm": {"mode": "none"},
                                      "stage1": {"epochs": 10, "lr": 1e-2}, "stage2": {"epochs": 5, "lr": 1e-2},
                                      "stage3": {"epochs": 5, "lr": 1e-2}})
    rep = run_experiment(cfg, write=False)
    h = rep.horizons[0]
    v = [h.stage(s).best_val_mse for s in (1, 2, 3)]
    assert max(v) / min(v) < 1.05
    assert h.selected_stage in (1, 2, 3)


def test_run_layout_and_manifest(tmp_path):
    cfg = _cfg(tmp_path, save_predictions=True)
    rep = run_experiment(cfg)
    root = tmp_path / "synthetic"
    hdir = root / "2"
    for f in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "manifest.json", "report.json",
              "stage1_test_predictions.npy"):
        assert (hdir / f).is_file(), f
    for f in ("manifest.json", "report.json", "report.csv", "report.txt", "timing.json"):
        assert (root / f).is_file(), f
    cfg2, rep2 = load_manifest(root)
    assert rep2 == rep
    assert cfg2.resolved() == cfg.resolved()
    hm = json.loads((hdir / "manifest.json").read_text())
    assert hm["seed"] == horizon_seed(cfg.seed, 2) and hm["config_hash"] == rep.config_hash


def test_saved_predictions_reproduce_metrics(tmp_path):
    cfg = _cfg(tmp_path, save_predictions=True)
    rep = run_experiment(cfg)
    data = prepare_data(cfg.load_series(), SplitSpec(cfg.resolved_split(), cfg.resolved_lookback()), 2)
    targets = np.concatenate([b.targets for b in batch_iter(data.test, 256)])
    for st in rep.horizons[0].stages:
        preds = np.load(tmp_path / "synthetic" / "2" / f"stage{st.stage}_test_predictions.npy")
        mse, mae = compute_metrics(preds, targets)
        assert abs(mse - st.test_mse) <= 1e-9 and abs(mae - st.test_mae) <= 1e-9


def test_horizon_independence():
    a = run_experiment(_cfg(horizons=[2]), write=False)
    b = run_experiment(_cfg(horizons=[3, 2]), write=False)
    assert a.result(2) == b.result(2)


def test_failed_horizon_is_recorded():
    rep = run_experiment(_cfg(horizons=[2, 100000]), write=False)
    assert rep.result(2).failure is None
    assert "ValueError" in rep.result(100000).failure
    assert "FAILED" in format_table(rep)


def _fake_report(horizons):
    hs = []
    for i, h in enumerate(horizons):
        st = [StageReport(s, [], [0.5], [0.6], 0, 0.4 - 0.01 * s + i, 0.5 - 0.01 * s + i) for s in (1, 2, 3)]
        hs.append(HorizonResult(h, st, 3))
    return ExperimentReport("d", "hash", hs)


def test_averages_need_all_four_horizons():
    assert _fake_report([96, 192, 336]).averages() is None
    avg = _fake_report([96, 192, 336, 720]).averages()
    assert avg["stage1"]["mse"] == pytest.approx(np.mean([0.39 + i for i in range(4)]))
    assert avg["selected"] == avg["stage3"]


def test_csv_schema():
    rows = list(csv.reader(io.StringIO(format_csv(_fake_report([96])))))
    assert rows[0] == ["dataset", "horizon", "stage", "mse", "mae", "val_mse", "val_mae", "best_epoch"]
    assert len(rows) == 4 and rows[1][:3] == ["d", "96", "1"]


def test_improvement_markers():
    st = [StageReport(1, [], [1], [1], 0, 0.40, 0.40), StageReport(2, [], [1], [1], 0, 0.40, 0.39),
          StageReport(3, [], [1], [1], 0, 0.41, 0.38)]
    line = format_table(ExperimentReport("d", "h", [HorizonResult(96, st, 1)])).splitlines()[2]
    cells = [c.split() for c in line.split("|")[1:4]]
    assert cells[0] == ["0.400", "0.400"]
    assert cells[1] == ["0.400", "0.390↓"]       # equal MSE gets no marker
    assert cells[2] == ["0.410", "0.380↓"]


def test_json_round_trip():
    rep = _fake_report([96, 192, 336, 720])
    assert ExperimentReport.from_dict(json.loads(format_json(rep))) == rep


def test_emit_report_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(_fake_report([96]), blocker / "sub")
    with pytest.raises(ValueError):
        emit_report(_fake_report([96]), tmp_path, "xml")


def test_norm_ablation_columns(tmp_path):
    res = ablate_norm(_cfg(tmp_path), write=False)
    assert list(res) == ["none", "alpha=0.95", "alpha=0.99", "revin"]
    assert res["revin"].horizons[0].failure is None
    header = format_norm_table(res).splitlines()[0]
    for lab in res:
        assert lab in header


def test_capacity_compare(tmp_path):
    res = capacity_compare(_cfg(tmp_path), write=False, mlp={"layers": 2, "hidden": 16})
    assert set(res) == {"linear", "mlp"}


def test_capacity_grid_is_sorted_and_deterministic():
    cfg = _cfg()
    a = capacity_grid(cfg, 2, layers=(1, 2), hidden=(8, 16))
    b = capacity_grid(cfg, 2, layers=(1, 2), hidden=(8, 16))
    assert a == b and len(a) == 3
    assert [r["val_mse"] for r in a] == sorted(r["val_mse"] for r in a)
