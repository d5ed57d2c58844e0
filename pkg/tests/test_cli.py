import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mtl_degradation.cli import RunConfig, UsageError, main
from mtl_degradation.dataprep import CellSeries, normalize, read_series_csv, write_series_csv
from mtl_degradation.evaluation import mape
from mtl_degradation.seqmodel import checkpoint

STAGE = {"lr": 3e-3, "max_epochs": 1, "batch_size": 64}
TINY = {
    "model": {"num_layers": 1, "hidden_size": 4, "input_len": 64, "output_len": 64, "in_step_cycles": 20},
    "stages": [
        {"name": "stage1", "loss_weights": [1.0, 0.0], "params": "encoder+capacity", **STAGE},
        {"name": "stage2", "loss_weights": [0.0, 1.0], "params": "resistance", **STAGE},
        {"name": "stage3", "loss_weights": [1.0, 1.0], "params": "all", **STAGE},
    ],
    "stl_stages": {"stl-cap": {"name": "stl-capacity", "loss_weights": [1.0, 0.0], **STAGE},
                   "stl-res": {"name": "stl-resistance", "loss_weights": [0.0, 1.0], **STAGE}},
    "synth": {"n_cells": 8},
    "noise_grid": [0.0, 0.01],
}


def run(*args):
    return main([str(a) for a in args])


def files(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def deterministic(d: Path) -> dict:
    volatile = {"manifest.json", "timing.json", "comparison.csv"}
    return {k: v for k, v in files(d).items() if k not in volatile}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "fleet"
    assert run("synth", "--config", cfg, "--seed", 0, "--out", data) == 0
    for mode in ("mtl", "stl-cap", "stl-res"):
        assert run("train", "--config", cfg, "--data", data, "--out", root / "models", "--mode", mode) == 0
    return {"root": root, "cfg": cfg, "data": data, "models": root / "models"}


# --- synth / prepare ----------------------------------------------------------------

def test_synth_outputs(work):
    data = work["data"]
    fleet = json.loads((data / "fleet.json").read_text())
    assert len(fleet["cells"]) == 8 and len(list((data / "series").glob("*.csv"))) == 8
    with open(data / "ground_truth.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["cell_id", "last_cycle", "knee_capacity", "knee_resistance",
                             "EOL80", "EOL65", "EOL120", "EOL130"]
    assert len(rows) == 8 and all(r["knee_capacity"] and r["EOL80"] for r in rows)
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64
    assert set(manifest["versions"]) >= {"numpy", "scipy", "python"}
    assert manifest["outputs"]["fleet.json"]


def test_synth_deterministic(work, tmp_path):
    assert run("synth", "--config", work["cfg"], "--seed", 0, "--out", tmp_path / "a") == 0
    assert deterministic(tmp_path / "a") == deterministic(work["data"])
    assert run("synth", "--config", work["cfg"], "--seed", 1, "--out", tmp_path / "b") == 0
    assert deterministic(tmp_path / "b") != deterministic(work["data"])


def test_synth_default_fleet_size():
    assert RunConfig().synth["n_cells"] == 48


def _checkups(path, dup=False):
    lines = ["cell_id,cycle,capacity_ah,resistance_mohm"]
    for cell, rate in (("A", 2e-4), ("B", 3e-4)):
        for n in range(0, 801, 100):
            lines.append(f"{cell},{n},{1.85 * (1 - rate * n - 1e-10 * n ** 3):.6f},{50 * (1 + rate * n):.6f}")
    if dup:
        lines.append("B,800,1.5,60")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_prepare(tmp_path):
    src = _checkups(tmp_path / "checkups.csv")
    assert run("prepare", "--data", src, "--out", tmp_path / "p1") == 0
    assert sorted(p.name for p in (tmp_path / "p1" / "series").iterdir()) == ["A.csv", "B.csv"]
    series = read_series_csv(tmp_path / "p1" / "series" / "A.csv")
    assert series.last_cycle == 800
    fleet = json.loads((tmp_path / "p1" / "fleet.json").read_text())
    assert fleet["r_base"] == pytest.approx(50.0)
    assert run("prepare", "--data", src, "--out", tmp_path / "p2") == 0
    assert deterministic(tmp_path / "p1") == deterministic(tmp_path / "p2")


def test_prepare_errors(tmp_path, capsys):
    assert run("prepare", "--data", tmp_path / "missing.csv", "--out", tmp_path / "o") == 2
    assert "not found" in capsys.readouterr().err
    src = _checkups(tmp_path / "dup.csv", dup=True)
    assert run("prepare", "--data", src, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "duplicated cycle" in err and "'B'" in err and "row 20" in err


# --- config handling -------------------------------------------------------------------

def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeed": 1}))
    assert run("synth", "--config", bad, "--out", tmp_path / "o") == 2
    assert "unknown config keys" in capsys.readouterr().err


@pytest.mark.parametrize("patch", [{"split_ratios": [1, 0, 1]}, {"noise_grid": [-0.1]}, {"bench_reps": 10},
                                   {"model": {"hidden_size": 0}}, {"event_truth": "x"}])
def test_invalid_config_values(patch):
    with pytest.raises(UsageError):
        RunConfig.from_dict({**TINY, **patch})


def test_bad_flags():
    assert run("train", "--mode", "nope") == 2
    assert run("frobnicate") == 2


def test_config_digest_ignores_paths():
    a = RunConfig.from_dict(TINY)
    b = RunConfig.from_dict({**TINY, "out": "elsewhere", "data": "x"})
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig.from_dict({**TINY, "seed": 3}).digest()


# --- train --------------------------------------------------------------------------------

def test_train_outputs(work):
    m = work["models"]
    with open(m / "history-mtl.csv") as fh:
        stages = [r["stage"] for r in csv.DictReader(fh)]
    assert stages == ["stage1", "stage2", "stage3"]
    with open(m / "history-stl-cap.csv") as fh:
        assert [r["stage"] for r in csv.DictReader(fh)] == ["stl-capacity"]
    model = checkpoint.load(m / "model-mtl.ckpt")
    assert model.meta["mode"] == "mtl" and set(model.meta["knee_refs"]) == {"capacity", "resistance"}
    assert len(model.meta["train_cells"]) == 4


def test_train_deterministic(work, tmp_path):
    assert run("train", "--config", work["cfg"], "--data", work["data"], "--out", tmp_path, "--mode", "mtl") == 0
    assert (tmp_path / "model-mtl.ckpt").read_bytes() == (work["models"] / "model-mtl.ckpt").read_bytes()
    assert (tmp_path / "history-mtl.csv").read_bytes() == (work["models"] / "history-mtl.csv").read_bytes()


def test_train_missing_data(tmp_path):
    assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path) == 2


# --- predict --------------------------------------------------------------------------------

def test_predict_round_trip(work, tmp_path):
    cell = work["data"] / "series" / "syn000.csv"
    assert run("predict", "--checkpoint", work["models"] / "model-mtl.ckpt", "--data", cell,
               "--at-cycle", 100, "--out", tmp_path) == 0
    pred = json.loads((tmp_path / "prediction.json").read_text())
    assert pred["present_cycle"] == 100
    cap = pred["capacity"]
    assert cap["cycles"][:2] == [120, 140] and len(cap["cycles"]) == 64
    assert {"knee_cycle", "EOL80", "EOL65"} <= set(cap) and {"EOL120", "EOL130"} <= set(pred["resistance"])
    model = checkpoint.load(work["models"] / "model-mtl.ckpt")
    series = read_series_csv(cell, q_nominal=model.meta["q_nominal"], r_base=model.meta["r_base"])
    soh = normalize(series)
    n = sum(c <= series.last_cycle for c in cap["cycles"])
    truth = series.capacity[np.asarray(cap["cycles"][:n])]
    assert mape(np.asarray(cap["capacity_ah"][:n]), truth) == pytest.approx(
        mape(np.asarray(cap["soh"][:n]), soh.soh_c[np.asarray(cap["cycles"][:n])]), rel=1e-9)


def test_predict_insufficient_history(work, tmp_path, capsys):
    cell = work["data"] / "series" / "syn000.csv"
    assert run("predict", "--checkpoint", work["models"] / "model-mtl.ckpt", "--data", cell,
               "--at-cycle", 50, "--out", tmp_path) == 2
    assert "insufficient history" in capsys.readouterr().err


def test_predict_stl(work, tmp_path):
    cell = work["data"] / "series" / "syn001.csv"
    assert run("predict", "--checkpoint", work["models"] / "model-stl-res.ckpt", "--data", cell,
               "--at-cycle", 200, "--out", tmp_path) == 0
    pred = json.loads((tmp_path / "prediction.json").read_text())
    assert "resistance" in pred and "capacity" not in pred


def test_predict_window_exceeded(work, tmp_path, capsys):
    # the tiny config holds 64 x 20 = 1280 cycles of history
    n = np.arange(2001.0)
    path = tmp_path / "long.csv"
    write_series_csv(CellSeries("long", 1.85 * (1 - 1e-4 * n), 50 * (1 + 1e-4 * n)), path)
    assert run("predict", "--checkpoint", work["models"] / "model-mtl.ckpt", "--data", path,
               "--at-cycle", 1300, "--out", tmp_path / "p") == 2
    assert "exceeds the 1280-cycle input window" in capsys.readouterr().err
    assert run("predict", "--checkpoint", work["models"] / "model-mtl.ckpt", "--data", path,
               "--at-cycle", 1280, "--out", tmp_path / "p") == 0


# --- evaluate / noise / compare ------------------------------------------------------------------

def test_evaluate_oracle_zero_report(work, tmp_path):
    cfg = tmp_path / "oracle.json"
    cfg.write_text(json.dumps({**TINY, "event_truth": "grid"}))
    assert run("evaluate", "--config", cfg, "--data", work["data"], "--out", tmp_path / "ev", "--mode", "oracle") == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())["summary"]
    for ch in ("capacity", "resistance"):
        assert len(summary[ch]) == 9
        assert all(v == 0 for v in summary[ch].values()), summary[ch]
    assert (tmp_path / "ev" / "degradation_metrics.csv").exists()


def test_evaluate_deterministic(work, tmp_path):
    args = ("evaluate", "--config", work["cfg"], "--data", work["data"], "--checkpoint",
            work["models"] / "model-mtl.ckpt")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert deterministic(tmp_path / "a") == deterministic(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"] == \
        json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]


def test_noise_sweep_grid(work, tmp_path):
    assert run("noise-sweep", "--config", work["cfg"], "--data", work["data"], "--checkpoint",
               work["models"] / "model-mtl.ckpt", "--out", tmp_path, "--noise-grid", "0,0.002,0.004,0.006,0.008,0.01") == 0
    with open(tmp_path / "noise_table.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["channel", "metric", "normal", "0.2% noise", "0.4% noise", "0.6% noise", "0.8% noise", "1% noise"]


def test_noise_grid_flag_validation(work, tmp_path):
    assert run("noise-sweep", "--data", work["data"], "--out", tmp_path, "--noise-grid", "a,b") == 2


def test_compare_table(work, tmp_path):
    m = work["models"]
    ck = ",".join(str(m / f"model-{k}.ckpt") for k in ("mtl", "stl-cap", "stl-res"))
    for out in ("a", "b"):
        assert run("compare", "--config", work["cfg"], "--data", work["data"], "--checkpoint", ck,
                   "--out", tmp_path / out) == 0
    with open(tmp_path / "a" / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "STL", "MTL"] and len(rows) == 1 + 13
    assert rows[-1][0] == "Mean computational cost [s]"
    assert deterministic(tmp_path / "a") == deterministic(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["outputs"]["timing.json"] is None and manifest["outputs"]["comparison.json"]


def test_compare_needs_three_checkpoints(work, tmp_path):
    assert run("compare", "--data", work["data"], "--checkpoint", "a,b", "--out", tmp_path) == 2


# --- gradcheck ------------------------------------------------------------------------------------

def test_gradcheck_pass(capsys):
    assert run("gradcheck", "--size", "small") == 0
    out = capsys.readouterr().out
    assert "worst coordinate" in out and out.strip().endswith("PASS")


def test_gradcheck_sign_flip_fails(capsys):
    assert run("gradcheck", "--size", "small", "--sign-flip") == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "FAILED" in captured.err


def test_gradcheck_unknown_size():
    assert run("gradcheck", "--size", "huge") == 2
