"""Command-line entry point: ``python3 -m mtl_degradation <command> ...``.

Every command writes into ``--out`` together with ``manifest.json`` (config
hash, seed, library versions, output checksums). Exit codes: 0 success,
1 computation failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dataprep import (DataError, SynthParams, fleet_r_base, group_by_cell, interpolate_pchip,
                       load_checkups, normalize, read_series_csv, synth_fleet, synth_truth, with_r_base,
                       write_series_csv)
from .evaluation import (EVENT_TRUTH, ONLINE_SMOOTHING, COMPARISON_ROWS, EolThresholds, ModelForecaster, OracleForecaster,
                         benchmark_mtl_stl, compare_mtl_stl, degradation_metrics, eol_cycle, knee_references,
                         noise_sweep, noise_table, progression_eval, write_json, write_table_csv)
from .kneepoint import KneeError, knee_online, max_curvature_knee
from .numeric import RegularizationSpec
from .seqmodel import ModelConfig, ModelError, mtl_model, predict, stl_model, stl_predict
from .seqmodel import checkpoint as ckpt
from .seqmodel.model import MIN_HISTORY_CYCLES
from .training import (MINI_CONFIG, MTL_STAGES, STL_CAPACITY_STAGE, STL_RESISTANCE_STAGE, SplitSpec, StageConfig,
                       TrainingError, gradient_check, history_rows, sample_set, split_with_r_base, train_multistage,
                       train_stl)

log = logging.getLogger("mtl_degradation")

MODES = ("mtl", "stl-cap", "stl-res")
VOLATILE = ("timing.json", "comparison.csv")


class UsageError(Exception):
    """Bad flags, config or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration

def _stage_from(d: dict) -> StageConfig:
    d = dict(d)
    if "loss_weights" in d:
        d["loss_weights"] = tuple(d["loss_weights"])
    return StageConfig(**d)


@dataclass
class RunConfig:
    """Experiment configuration. Defaults are the full-scale reference schedules."""

    data: str | None = None
    out: str = "runs/default"
    checkpoint: str | None = None
    seed: int = 0
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    stages: list = field(default_factory=lambda: [s.to_dict() for s in MTL_STAGES])
    stl_stages: dict = field(default_factory=lambda: {"stl-cap": STL_CAPACITY_STAGE.to_dict(),
                                                      "stl-res": STL_RESISTANCE_STAGE.to_dict()})
    regularization: dict = field(default_factory=lambda: asdict(RegularizationSpec()))
    split_ratios: list = field(default_factory=lambda: [6, 2, 2])
    noise_grid: list = field(default_factory=lambda: [0.0, 0.002, 0.004, 0.006, 0.008, 0.01])
    thresholds: dict = field(default_factory=lambda: asdict(EolThresholds()))
    synth: dict = field(default_factory=lambda: {"n_cells": 48})
    checkpoints: dict = field(default_factory=dict)  # mode -> path, for compare
    bench_reps: int = 100
    bench_present_cycle: int = 300
    event_truth: str = "curve"

    # validated views
    def model_config(self, channels: int = 2) -> ModelConfig:
        return ModelConfig(**{**self.model, "input_channels": channels})

    def stage_configs(self) -> tuple[StageConfig, ...]:
        return tuple(_stage_from(s) for s in self.stages)

    def stl_stage(self, mode: str) -> StageConfig:
        return _stage_from(self.stl_stages[mode])

    def reg(self) -> RegularizationSpec:
        return RegularizationSpec(**self.regularization)

    def eol(self) -> EolThresholds:
        return EolThresholds(**self.thresholds)

    def split(self) -> SplitSpec:
        return SplitSpec(tuple(int(r) for r in self.split_ratios), self.seed)

    def synth_params(self) -> tuple[int, SynthParams]:
        d = dict(self.synth)
        n = int(d.pop("n_cells", 48))
        return n, SynthParams(**d)

    def validate(self) -> "RunConfig":
        try:
            self.model_config()
            if len(self.stages) != 3:
                raise ValueError("the multi-task schedule needs exactly 3 stages")
            self.stage_configs()
            for m in ("stl-cap", "stl-res"):
                self.stl_stage(m)
            self.reg()
            self.eol()
            if len(self.split_ratios) != 3 or min(self.split_ratios) < 1:
                raise ValueError("split_ratios must be 3 positive integers")
            if any(not float(s) >= 0 for s in self.noise_grid):
                raise ValueError("noise_grid entries must be >= 0")
            self.synth_params()
            if self.bench_reps < 100:
                raise ValueError("bench_reps must be >= 100")
            if self.event_truth not in EVENT_TRUTH:
                raise ValueError(f"event_truth must be one of {EVENT_TRUTH}")
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that determines results (paths excluded)."""
        d = self.to_dict()
        for k in ("data", "out", "checkpoint", "checkpoints"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise UsageError("config file must contain a JSON object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# I/O helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    # files holding measured seconds are listed without a checksum
    files = [p for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"]
    outputs = {p.relative_to(out).as_posix(): (None if p.name in VOLATILE else _sha256(p)) for p in files}
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"mtl_degradation": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    write_json(manifest, out / "manifest.json")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def load_fleet(data_dir) -> list:
    """Series CSVs plus ``fleet.json`` written by ``prepare`` or ``synth``."""
    d = _require(data_dir, "--data")
    if d.is_file():
        raise UsageError(f"--data must be a series directory written by 'prepare' or 'synth', got file {d}")
    fleet_file = d / "fleet.json"
    if not fleet_file.exists():
        raise UsageError(f"{d} has no fleet.json; run 'prepare' or 'synth' first")
    fleet = json.loads(fleet_file.read_text())
    cells = [read_series_csv(d / "series" / f"{cid}.csv", cid, fleet["q_nominal"], fleet["r_base"])
             for cid in fleet["cells"]]
    return cells


def _write_fleet(out: Path, cells: list, r_base: float) -> None:
    sdir = out / "series"
    sdir.mkdir(parents=True, exist_ok=True)
    for c in cells:
        write_series_csv(c, sdir / f"{c.cell_id}.csv")
    write_json({"cells": [c.cell_id for c in cells], "r_base": r_base,
                "q_nominal": cells[0].q_nominal}, out / "fleet.json")


def _splits(cfg: RunConfig, cells):
    return split_with_r_base(cells, cfg.split())


def _load_model(path, what="--checkpoint"):
    return ckpt.load(_require(path, what))


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(cfg: RunConfig) -> Path:
    src = _require(cfg.data, "--data")
    groups = group_by_cell(load_checkups(src))
    cells = [interpolate_pchip(recs) for _, recs in sorted(groups.items())]
    r_base = fleet_r_base(cells)
    cells = with_r_base(cells, r_base)
    out = _out_dir(cfg)
    _write_fleet(out, cells, r_base)
    write_manifest(out, "prepare", cfg)
    log.info("prepared %d cells, r_base %.4f mOhm", len(cells), r_base)
    return out


def cmd_synth(cfg: RunConfig) -> Path:
    n, sp = cfg.synth_params()
    cells = synth_fleet(n, cfg.seed, sp)
    out = _out_dir(cfg)
    _write_fleet(out, cells, cells[0].r_base)
    # resistance EOLs relative to the training-split r_base, as evaluation uses
    r_base = _splits(cfg, cells)[0][0].r_base if len(cells) >= 5 else cells[0].r_base
    names = ("EOL80", "EOL65", "EOL120", "EOL130")
    rows = []
    for c in cells:
        t = synth_truth(c, r_base, max_curvature_knee)
        rows.append([c.cell_id, c.last_cycle, t.knee_capacity, t.knee_resistance] + [t.eol[k] for k in names])
    write_table_csv(rows, ("cell_id", "last_cycle", "knee_capacity", "knee_resistance") + names,
                    out / "ground_truth.csv")
    write_manifest(out, "synth", cfg)
    log.info("synthesized %d cells", n)
    return out


def cmd_train(cfg: RunConfig, mode: str) -> Path:
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}, got {mode!r}")
    cells = load_fleet(cfg.data)
    train, val, _ = _splits(cfg, cells)
    reg = cfg.reg()
    if mode == "mtl":
        mc = cfg.model_config(2)
        model = mtl_model(mc, cfg.seed, reg)
    else:
        mc = cfg.model_config(1)
        model = stl_model("capacity" if mode == "stl-cap" else "resistance", mc, cfg.seed, reg)
    tr, va = sample_set(train, mc), sample_set(val, mc)
    log.info("train %d samples / val %d samples", len(tr), len(va))

    def progress(r):
        log.info("%s epoch %d train %.6f val %.6f", r.stage, r.epoch, r.train_loss, r.val_loss)

    if mode == "mtl":
        model, history = train_multistage(model, tr, va, cfg.stage_configs(), reg, cfg.seed, callback=progress)
    else:
        model, history = train_stl(model, tr, va, cfg.stl_stage(mode), reg, cfg.seed, callback=progress)
    model.meta.update({"mode": mode, "r_base": train[0].r_base, "q_nominal": train[0].q_nominal,
                       "knee_refs": knee_references(train), "train_cells": [c.cell_id for c in train]})
    out = _out_dir(cfg)
    ckpt.save(model, out / f"model-{mode}.ckpt")
    write_table_csv([[r[k] for k in ("epoch", "stage", "train_loss", "val_loss", "lr")]
                     for r in history_rows(history)],
                    ("epoch", "stage", "train_loss", "val_loss", "lr"), out / f"history-{mode}.csv")
    write_manifest(out, f"train --mode {mode}", cfg)
    return out


def _events(cycles, curve, channel, base, refs, thr: EolThresholds) -> dict:
    ev = {}
    if refs is not None and len(curve) >= 3:
        try:
            ev["knee_cycle"] = knee_online(cycles, curve, refs[channel], ONLINE_SMOOTHING)
        except KneeError:
            ev["knee_cycle"] = None
    direction = "falling" if channel == "capacity" else "rising"
    for name, frac in thr.for_channel(channel):
        ev[name] = eol_cycle(cycles, curve, frac, base, direction)
    return ev


def cmd_predict(cfg: RunConfig, at_cycle: int) -> Path:
    model = _load_model(cfg.checkpoint)
    src = _require(cfg.data, "--data")
    if at_cycle is None:
        raise UsageError("--at-cycle is required")
    if at_cycle < MIN_HISTORY_CYCLES:
        raise UsageError(f"insufficient history: {at_cycle} cycles < {MIN_HISTORY_CYCLES}")
    meta = model.meta
    if "r_base" not in meta:
        raise UsageError("checkpoint lacks fleet metadata (r_base); was it written by 'train'?")
    cell = read_series_csv(src, None, meta["q_nominal"], meta["r_base"])
    if at_cycle > model.config.max_history_cycles:
        raise UsageError(f"--at-cycle {at_cycle} exceeds the {model.config.max_history_cycles}-cycle input window")
    if at_cycle > cell.last_cycle:
        raise UsageError(f"--at-cycle {at_cycle} is beyond the series end ({cell.last_cycle})")
    soh = normalize(cell)
    hc, hr = soh.soh_c[:at_cycle + 1], soh.soh_r[:at_cycle + 1]
    step = model.config.out_step_cycles
    refs = meta.get("knee_refs")
    thr = cfg.eol()
    result = {"cell_id": cell.cell_id, "present_cycle": at_cycle, "mode": meta.get("mode")}
    channels = {}
    if model.is_multitask:
        p = predict(hc, hr, model)
        channels["capacity"], channels["resistance"] = p.capacity, p.resistance
    else:
        br = model.branches[0]
        channels[br] = stl_predict(hc if br == "capacity" else hr, model)
    for ch, y in channels.items():
        base = meta["q_nominal"] if ch == "capacity" else meta["r_base"]
        cyc = at_cycle + step * np.arange(1, len(y) + 1)
        phys = y * base
        unit = "capacity_ah" if ch == "capacity" else "resistance_mohm"
        result[ch] = {"cycles": cyc.tolist(), unit: phys.tolist(), "soh": y.tolist(),
                      **_events(cyc.astype(float), phys, ch, base, refs, thr)}
    out = _out_dir(cfg)
    write_json(result, out / "prediction.json")
    write_manifest(out, "predict", cfg, {"at_cycle": at_cycle})
    return out


def _forecaster(cfg: RunConfig, mode: str, test):
    if mode == "oracle":
        mc = cfg.model_config(2)
        return OracleForecaster({c.cell_id: normalize(c) for c in test}, mc), None
    if mode == "stl":
        cap = _load_model(cfg.checkpoints.get("stl-cap"), "stl-cap checkpoint")
        res = _load_model(cfg.checkpoints.get("stl-res"), "stl-res checkpoint")
        return ModelForecaster(cap, res), cap.meta
    model = _load_model(cfg.checkpoint)
    if not model.is_multitask:
        raise UsageError("evaluate expects an MTL checkpoint (use --mode stl with stl checkpoints)")
    return ModelForecaster(model), model.meta


def _refs(meta, train):
    if meta is not None and "knee_refs" in meta:
        return meta["knee_refs"]
    return knee_references(train)


def cmd_evaluate(cfg: RunConfig, mode: str = "mtl") -> Path:
    cells = load_fleet(cfg.data)
    train, _, test = _splits(cfg, cells)
    fc, meta = _forecaster(cfg, mode, test)
    report = progression_eval(fc, test, cfg.eol(), _refs(meta, train), event_truth=cfg.event_truth)
    out = _out_dir(cfg)
    report.write_csv(out / "positions.csv")
    report.write_json(out / "summary.json")
    for ch in ("capacity", "resistance"):
        prog = report.progression(ch)
        write_table_csv([[r[k] for k in ("present_cycle", "n", "mean", "median", "max", "p5", "p95")] for r in prog],
                        ("present_cycle", "n", "mean", "median", "max", "p5", "p95"), out / f"progression-{ch}.csv")
    deg = degradation_metrics(test, cfg.eol())
    deg.write_csv(out / "degradation_metrics.csv", out / "degradation_correlation.csv")
    write_manifest(out, f"evaluate --mode {mode}", cfg)
    return out


def cmd_noise_sweep(cfg: RunConfig, mode: str = "mtl") -> Path:
    cells = load_fleet(cfg.data)
    train, _, test = _splits(cfg, cells)
    fc, meta = _forecaster(cfg, mode, test)
    reports = noise_sweep(fc, test, cfg.noise_grid, cfg.seed, cfg.eol(), _refs(meta, train), cfg.event_truth)
    out = _out_dir(cfg)
    rows = noise_table(reports)
    write_table_csv(rows[1:], rows[0], out / "noise_table.csv")
    write_json({f"{s:g}": r.to_json_dict() for s, r in reports.items()}, out / "noise_sweep.json")
    write_manifest(out, "noise-sweep", cfg)
    return out


def cmd_compare(cfg: RunConfig) -> Path:
    cells = load_fleet(cfg.data)
    train, _, test = _splits(cfg, cells)
    paths = dict(cfg.checkpoints)
    if cfg.checkpoint:
        parts = cfg.checkpoint.split(",")
        if len(parts) != 3:
            raise UsageError("compare: --checkpoint takes MTL,STL-CAP,STL-RES paths separated by commas")
        paths.update(zip(MODES, parts))
    mtl = _load_model(paths.get("mtl"), "mtl checkpoint")
    cap = _load_model(paths.get("stl-cap"), "stl-cap checkpoint")
    res = _load_model(paths.get("stl-res"), "stl-res checkpoint")
    refs = _refs(mtl.meta, train)
    rm = progression_eval(ModelForecaster(mtl), test, cfg.eol(), refs, event_truth=cfg.event_truth)
    rs = progression_eval(ModelForecaster(cap, res), test, cfg.eol(), refs, event_truth=cfg.event_truth)
    bench_cell = max(test, key=lambda c: c.last_cycle)
    present = min(cfg.bench_present_cycle, bench_cell.last_cycle)
    timing = benchmark_mtl_stl(mtl, cap, res, bench_cell, present, cfg.bench_reps)
    rows = compare_mtl_stl(rm, rs, rs, timing)
    out = _out_dir(cfg)
    write_table_csv(rows, ("metric", "STL", "MTL"), out / "comparison.csv")
    # measured seconds vary run to run; the accuracy rows alone are deterministic
    write_json({"rows": [list(r) for r in rows[:len(COMPARISON_ROWS)]]}, out / "comparison.json")
    write_json({"timing": timing, "row": list(rows[-1])}, out / "timing.json")
    write_manifest(out, "compare", cfg)
    return out


def cmd_gradcheck(cfg: RunConfig, size: str = "small", sign_flip: bool = False) -> bool:
    if size != "small":
        raise UsageError("only --size small is supported")
    report = gradient_check(MINI_CONFIG, seed=cfg.seed, sign_flip=sign_flip)
    for line in report.lines():
        print(line)
    return report.passed


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--data", help="input data (checkup CSV for prepare, series directory otherwise, "
                                       "series CSV for predict)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mtl_degradation",
                                description="Battery degradation forecasting experiments (MTL and STL models).")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="interpolate checkup data into per-cycle series")
    sub.add_parser("synth", parents=[common], help="write a seeded synthetic fleet and its ground truth")
    t = sub.add_parser("train", parents=[common], help="train an MTL or STL model")
    t.add_argument("--mode", choices=MODES, default="mtl")
    pr = sub.add_parser("predict", parents=[common], help="forecast one cell from its first N cycles")
    pr.add_argument("--at-cycle", type=int, required=True)
    for name, text in (("evaluate", "error report over test-cell lifetimes"),
                       ("noise-sweep", "error report per input noise level")):
        e = sub.add_parser(name, parents=[common], help=text)
        e.add_argument("--mode", choices=("mtl", "stl", "oracle"), default="mtl")
        if name == "noise-sweep":
            e.add_argument("--noise-grid", help="comma-separated noise fractions, e.g. 0,0.002,0.01")
    sub.add_parser("compare", parents=[common], help="MTL vs STL accuracy and compute table")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--size", default="small")
    g.add_argument("--sign-flip", action="store_true", help=argparse.SUPPRESS)
    return p


def _parse_grid(text: str) -> list:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--noise-grid: {exc}") from exc
    if not grid:
        raise UsageError("--noise-grid is empty")
    return grid


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    for k in ("seed", "data", "out", "checkpoint"):
        v = getattr(args, k, None)
        if v is not None:
            over[k] = v
    if getattr(args, "noise_grid", None):
        over["noise_grid"] = _parse_grid(args.noise_grid)
    return replace(cfg, **over).validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "prepare":
            cmd_prepare(cfg)
        elif cmd == "synth":
            cmd_synth(cfg)
        elif cmd == "train":
            cmd_train(cfg, args.mode)
        elif cmd == "predict":
            cmd_predict(cfg, args.at_cycle)
        elif cmd == "evaluate":
            cmd_evaluate(cfg, args.mode)
        elif cmd == "noise-sweep":
            cmd_noise_sweep(cfg, args.mode)
        elif cmd == "compare":
            cmd_compare(cfg)
        elif cmd == "gradcheck":
            if not cmd_gradcheck(cfg, args.size, args.sign_flip):
                print("gradient check FAILED", file=sys.stderr)
                return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, TrainingError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
