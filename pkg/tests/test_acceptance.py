"""Acceptance criteria, each at its stated tolerance.

Every test records one ``criterion N: PASS|FAIL ...`` line; the lines are
printed together at the end of the session (see ``conftest.py``). Criteria
5-8 share one desk-scale pipeline run through the command-line interface
using ``configs/desk.json``. Criterion 9 needs the real checkup extract and
runs only when ``MTL_REAL_CHECKUPS`` points at it.
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from mtl_degradation.cli import main
from mtl_degradation.dataprep import SynthParams, draw_cell_params, synth_cell, synth_fleet, synth_truth
from mtl_degradation.evaluation import eol_cycle, pearson
from mtl_degradation.kneepoint import NoKneeError, SmoothingSpec, knee_offline, max_curvature_knee
from mtl_degradation.numeric import make_rng
from mtl_degradation.seqmodel import (ModelConfig, PaddedInput, encode, forward_batch, mask_and_concat,
                                      mtl_model)
from mtl_degradation.training import MINI_CONFIG, gradient_check, masked_mae

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"
RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


def run(*args) -> int:
    return main([str(a) for a in args])


# --- 1 gradient correctness --------------------------------------------------------

def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    rep = gradient_check(MINI_CONFIG, n_params=600, seed=0)
    seconds = time.perf_counter() - t0
    ok = rep.n_checked >= 500 and rep.max_rel_error < 1e-4 and seconds < 60
    record(1, ok, f"{rep.n_checked} params, max rel err {rep.max_rel_error:.2e} (< 1e-4), {seconds:.1f} s (< 60)")
    assert ok


# --- 2 masking invariance ----------------------------------------------------------

def test_criterion_02_masking_invariance():
    cfg = ModelConfig(num_layers=2, hidden_size=8, input_len=80, output_len=6, in_step_cycles=5)
    model = mtl_model(cfg, seed=2)
    vals = np.random.default_rng(2).uniform(0.7, 1.2, (20, 2))
    other = np.random.default_rng(3).uniform(0.7, 1.2, (140, 2))

    def seq(k):
        return mask_and_concat(*[PaddedInput(np.r_[np.zeros(k), vals[:, j]], k) for j in range(2)])

    base = encode(seq(0), model)
    enc_diff = max(float(np.max(np.abs(encode(seq(k), model) - base))) for k in range(1, 51))
    # batched path: a companion sample valid from step 0 keeps every pad step
    # of the first sample inside the unrolled (masked) window
    batch_diff = 0.0
    ref = None
    for k in range(0, 51):
        T = 80 + k
        x = np.zeros((2, T, 2))
        x[0, T - 20:] = vals
        x[1] = other[-T:]
        out, _ = forward_batch(model, x, np.array([T - 20, 0]))
        if ref is None:
            ref = out
        batch_diff = max(batch_diff, *(float(np.max(np.abs(out[b][0] - ref[b][0]))) for b in out))
    pred, target = [0.9, 1.1, 0.95], [1.0, 1.0, 1.0]
    mae0 = masked_mae(pred, target, [True] * 3)
    mae_diff = max(abs(masked_mae(pred + [7.0] * k, target + [-3.0] * k, [True] * 3 + [False] * k) - mae0)
                   for k in range(1, 51))
    ok = enc_diff == 0 and batch_diff == 0 and mae_diff == 0
    record(2, ok, f"encode diff {enc_diff:g}, batched diff {batch_diff:g}, masked_mae diff {mae_diff:g} (all exactly 0)")
    assert ok


# --- 3 knee oracle agreement ---------------------------------------------------------

def test_criterion_03_knee_oracle():
    sp = SynthParams()
    rng = make_rng(0, "acceptance/knees")
    agree = 0
    for k in range(100):
        cell = synth_cell(f"k{k}", draw_cell_params(rng, sp), sp)
        y = cell.capacity if k % 2 == 0 else cell.resistance
        n = cell.cycles.astype(float)
        dense = np.linspace(0, n[-1], 20 * int(n[-1]) + 1)
        ref = max_curvature_knee(dense, np.interp(dense, n, y))
        got = knee_offline(n, y, SmoothingSpec(25)).knee_cycle
        agree += abs(got - ref) <= 0.02 * n[-1]
    line = np.arange(1000.0)
    no_knee = 0
    for detector in (lambda: knee_offline(line, 1.85 - 1e-4 * line),
                     lambda: max_curvature_knee(line, 50 + 0.02 * line)):
        try:
            detector()
        except NoKneeError:
            no_knee += 1
    ok = agree >= 95 and no_knee == 2
    record(3, ok, f"{agree}/100 curves within 2% of domain (>= 95); linear curves: {no_knee}/2 report no knee")
    assert ok


# --- 4 EOL extraction -------------------------------------------------------------------

def test_criterion_04_eol_extraction():
    worst, compared, missing = 0.0, 0, 0
    for seed in (0, 1, 2):
        for cell in synth_fleet(48, seed=seed):
            truth = synth_truth(cell, cell.r_base, max_curvature_knee)
            for name, frac, y, base, d in (("EOL80", .80, cell.capacity, cell.q_nominal, "falling"),
                                           ("EOL65", .65, cell.capacity, cell.q_nominal, "falling"),
                                           ("EOL120", 1.2, cell.resistance, cell.r_base, "rising"),
                                           ("EOL130", 1.3, cell.resistance, cell.r_base, "rising")):
                got = eol_cycle(cell.cycles, y, frac, base, d)
                ref = truth.eol[name]
                if (got is None) != (ref is None):
                    missing += 1
                elif ref is not None:
                    compared += 1
                    worst = max(worst, abs(got - ref))
    ok = worst <= 1.0 and missing == 0 and compared > 0
    record(4, ok, f"{compared} crossings, max |eol - analytic| {worst:.3g} cycles (<= 1), {missing} mismatched")
    assert ok


# --- 5-8 desk-scale pipeline -----------------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = DESK_CONFIG
    t0 = time.perf_counter()
    assert run("synth", "--config", cfg, "--out", out / "data") == 0
    for mode in ("mtl", "stl-cap", "stl-res"):
        assert run("train", "--config", cfg, "--data", out / "data", "--out", out / "models", "--mode", mode) == 0
    train_seconds = time.perf_counter() - t0
    m = out / "models"
    assert run("evaluate", "--config", cfg, "--data", out / "data", "--checkpoint", m / "model-mtl.ckpt",
               "--out", out / "eval") == 0
    assert run("noise-sweep", "--config", cfg, "--data", out / "data", "--checkpoint", m / "model-mtl.ckpt",
               "--out", out / "noise") == 0
    ck = ",".join(str(m / f"model-{k}.ckpt") for k in ("mtl", "stl-cap", "stl-res"))
    assert run("compare", "--config", cfg, "--data", out / "data", "--checkpoint", ck, "--out", out / "compare") == 0
    return {"out": out, "train_seconds": train_seconds, "total_seconds": time.perf_counter() - t0}


def _summary(desk):
    return json.loads((desk["out"] / "eval" / "summary.json").read_text())["summary"]


def test_criterion_05_end_to_end(desk):
    s = _summary(desk)
    cap, res = s["capacity"], s["resistance"]
    checks = {
        "cap MAPE": (cap["Mean curve MAPE [%]"], 5.0),
        "res MAPE": (res["Mean curve MAPE [%]"], 5.0),
        "cap knee": (cap["Median knee-point error [cycle]"], 100),
        "res knee": (res["Median knee-point error [cycle]"], 100),
        "EOL80": (cap["Median EOL80 error [cycle]"], 80),
        "EOL120": (res["Median EOL120 error [cycle]"], 80),
    }
    runtime = desk["total_seconds"]
    ok = all(v is not None and v <= lim for v, lim in checks.values()) and runtime <= 1800
    detail = ", ".join(f"{k} {v:.3g} (<= {lim})" for k, (v, lim) in checks.items())
    record(5, ok, f"{detail}; pipeline {runtime / 60:.1f} min (<= 30)")
    assert ok


def test_criterion_06_noise_shape(desk):
    with open(desk["out"] / "noise" / "noise_table.csv") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    assert header[2:] == ["normal", "0.2% noise", "0.4% noise", "0.6% noise", "0.8% noise", "1% noise"]
    parts, ok = [], True
    for row in rows[1:]:
        if row[1] != "Mean curve MAPE [%]":
            continue
        v = [float(x) for x in row[2:]]
        worst_drop = max(v[k] - v[k + 1] for k in range(len(v) - 1))
        rise = v[-1] - v[0]
        ok &= worst_drop <= 0.3 and rise < 1.5
        parts.append(f"{row[0]} {v[0]:.2f}->{v[-1]:.2f}% (rise {rise:.2f} < 1.5 pp, max drop {max(worst_drop, 0):.2f} <= 0.3)")
    record(6, ok, "; ".join(parts))
    assert ok and len(parts) == 2


def test_criterion_07_compute_cost(desk):
    t = json.loads((desk["out"] / "compare" / "timing.json").read_text())["timing"]
    mtl, cap, res = (t[k]["mean"] for k in ("mtl", "stl_capacity", "stl_resistance"))
    ratio = mtl / (cap + res)
    reps = min(t[k]["reps"] for k in t)
    ok = ratio < 0.6 and reps >= 100
    record(7, ok, f"MTL {mtl * 1e3:.2f} ms vs STL {cap * 1e3:.2f}+{res * 1e3:.2f} ms, ratio {ratio:.3f} (< 0.6), "
                  f"{reps} reps")
    assert ok


def test_criterion_08_mtl_vs_stl(desk):
    rows = {r[0]: r[1:] for r in json.loads((desk["out"] / "compare" / "comparison.json").read_text())["rows"]}
    stl_c, mtl_c = rows["Mean capacity curve MAPE [%]"]
    stl_r, mtl_r = rows["Mean resistance curve MAPE [%]"]
    ok = mtl_c <= stl_c and mtl_r <= stl_r + 0.3
    record(8, ok, f"capacity MTL {mtl_c:.3f}% vs STL {stl_c:.3f}% (<=); "
                  f"resistance MTL {mtl_r:.3f}% vs STL {stl_r:.3f}% (<= +0.3 pp)")
    assert ok


def test_training_progress_example(desk):
    """Stage-3 validation total against the stage-1 validation capacity loss."""
    with open(desk["out"] / "models" / "history-mtl.csv") as fh:
        hist = list(csv.DictReader(fh))
    s1 = min(float(r["val_loss"]) for r in hist if r["stage"] == "stage1")
    s3 = min(float(r["val_loss"]) for r in hist if r["stage"] == "stage3")
    line = f"training progress: {'PASS' if s3 <= s1 else 'FAIL'}  stage-3 val total {s3:.5f} vs stage-1 val capacity {s1:.5f}"
    RESULTS.append(line)
    print(line)
    assert s3 <= s1


# --- 9 real data (optional) --------------------------------------------------------------------

@pytest.mark.skipif(not os.environ.get("MTL_REAL_CHECKUPS"), reason="set MTL_REAL_CHECKUPS to the 48-cell checkup CSV")
def test_criterion_09_real_data(tmp_path):
    src = Path(os.environ["MTL_REAL_CHECKUPS"])
    assert run("prepare", "--data", src, "--out", tmp_path / "data") == 0
    for mode in ("mtl",):
        assert run("train", "--data", tmp_path / "data", "--out", tmp_path / "models", "--mode", mode) == 0
    assert run("evaluate", "--data", tmp_path / "data", "--checkpoint", tmp_path / "models" / "model-mtl.ckpt",
               "--out", tmp_path / "eval") == 0
    s = json.loads((tmp_path / "eval" / "summary.json").read_text())["summary"]
    cap, res = s["capacity"]["Mean curve MAPE [%]"], s["resistance"]["Mean curve MAPE [%]"]
    fleet = json.loads((tmp_path / "data" / "fleet.json").read_text())
    r100, eol130 = [], []
    from mtl_degradation.dataprep import read_series_csv
    for cid in fleet["cells"]:
        cell = read_series_csv(tmp_path / "data" / "series" / f"{cid}.csv", cid, r_base=fleet["r_base"])
        e = eol_cycle(cell.cycles, cell.resistance, 1.3, fleet["r_base"], "rising")
        if e is not None and cell.last_cycle >= 100:
            r100.append(cell.resistance[100 - cell.first_cycle])
            eol130.append(e)
    rho = pearson(r100, eol130)
    ok = 1.5 <= cap <= 4.5 and 0.8 <= res <= 2.5 and abs(rho + 0.37) <= 0.02
    record(9, ok, f"capacity MAPE {cap:.2f}% in [1.5, 4.5], resistance {res:.2f}% in [0.8, 2.5], rho {rho:.3f} (-0.37 +- 0.02)")
    assert ok


# --- 10 determinism -----------------------------------------------------------------------------

TINY = {
    "model": {"num_layers": 1, "hidden_size": 4, "input_len": 64, "output_len": 64, "in_step_cycles": 20},
    "stages": [
        {"name": "stage1", "lr": 3e-3, "max_epochs": 2, "batch_size": 64, "loss_weights": [1.0, 0.0],
         "params": "encoder+capacity", "input_noise": 0.005},
        {"name": "stage2", "lr": 3e-3, "max_epochs": 2, "batch_size": 64, "loss_weights": [0.0, 1.0],
         "params": "resistance", "input_noise": 0.005},
        {"name": "stage3", "lr": 3e-4, "max_epochs": 2, "batch_size": 64, "loss_weights": [1.0, 1.0],
         "params": "all", "input_noise": 0.005},
    ],
    "stl_stages": {
        "stl-cap": {"name": "stl-capacity", "lr": 3e-3, "max_epochs": 2, "batch_size": 64, "loss_weights": [1.0, 0.0]},
        "stl-res": {"name": "stl-resistance", "lr": 3e-3, "max_epochs": 2, "batch_size": 64, "loss_weights": [0.0, 1.0]},
    },
    "synth": {"n_cells": 10},
    "noise_grid": [0.0, 0.004, 0.01],
}


def _pipeline(root: Path, cfg: Path) -> dict:
    d, m = root / "data", root / "models"
    steps = [("synth", "--out", d)]
    steps += [("train", "--data", d, "--out", m, "--mode", mode) for mode in ("mtl", "stl-cap", "stl-res")]
    ck = ",".join(str(m / f"model-{k}.ckpt") for k in ("mtl", "stl-cap", "stl-res"))
    steps += [
        ("predict", "--checkpoint", m / "model-mtl.ckpt", "--data", d / "series" / "syn000.csv", "--at-cycle", 200,
         "--out", root / "predict"),
        ("evaluate", "--data", d, "--checkpoint", m / "model-mtl.ckpt", "--out", root / "eval"),
        ("noise-sweep", "--data", d, "--checkpoint", m / "model-mtl.ckpt", "--out", root / "noise"),
        ("compare", "--data", d, "--checkpoint", ck, "--out", root / "compare"),
    ]
    for cmd, *args in steps:
        assert run(cmd, "--config", cfg, "--seed", 11, *args) == 0, cmd
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        if p.name in ("timing.json", "comparison.csv"):
            continue  # measured seconds
        if p.name == "manifest.json":
            man = json.loads(p.read_text())
            out[rel] = json.dumps([man["config_sha256"], man["outputs"], man["seed"]], sort_keys=True).encode()
        else:
            out[rel] = p.read_bytes()
    return out


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    a = _pipeline(tmp_path / "a", cfg)
    b = _pipeline(tmp_path / "b", cfg)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ckpts = sum(k.endswith(".ckpt") for k in a)
    ok = not differing and ckpts == 3 and len(a) > 20
    record(10, ok, f"{len(a)} files compared ({ckpts} checkpoints), {len(differing)} differ {differing[:3]}")
    assert ok
