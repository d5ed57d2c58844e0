"""Desk-scale end-to-end experiment through the command-line interface.

Synthesizes a fleet, trains the multi-task model and both single-task
baselines, then writes the evaluation, noise-sweep and comparison reports.

    python3 scripts/run_desk_pipeline.py --out runs/desk [--config configs/desk.json] [--seed 0]
"""
import argparse
import csv
import json
import sys
import time
from pathlib import Path

from mtl_degradation.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def step(*args) -> None:
    t0 = time.perf_counter()
    code = cli([str(a) for a in args])
    print(f"[{time.perf_counter() - t0:7.1f} s] {args[0]} -> exit {code}", flush=True)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.json")
    ap.add_argument("--out", default=ROOT / "runs" / "desk")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    out, common = Path(a.out), ("--config", a.config, "--seed", a.seed)
    data, models = out / "data", out / "models"
    step("synth", *common, "--out", data)
    for mode in ("mtl", "stl-cap", "stl-res"):
        step("train", *common, "--data", data, "--out", models, "--mode", mode, "-v")
    mtl = models / "model-mtl.ckpt"
    step("evaluate", *common, "--data", data, "--checkpoint", mtl, "--out", out / "evaluate")
    step("noise-sweep", *common, "--data", data, "--checkpoint", mtl, "--out", out / "noise")
    ck = ",".join(str(models / f"model-{m}.ckpt") for m in ("mtl", "stl-cap", "stl-res"))
    step("compare", *common, "--data", data, "--checkpoint", ck, "--out", out / "compare")

    summary = json.loads((out / "evaluate" / "summary.json").read_text())["summary"]
    for ch, rows in summary.items():
        print(f"\n{ch}")
        for k, v in rows.items():
            print(f"  {k:<36} {v:.4g}" if isinstance(v, float) else f"  {k:<36} {v}")
    for name in ("noise/noise_table.csv", "compare/comparison.csv"):
        print(f"\n{name}")
        with open(out / name) as fh:
            for row in csv.reader(fh):
                print("  " + " | ".join(_fmt(x) for x in row))


def _fmt(x: str) -> str:
    try:
        return f"{float(x):.4g}"
    except ValueError:
        return x

if __name__ == "__main__":
    main()
