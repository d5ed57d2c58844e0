"""Curve-MAPE progression over life from an ``evaluate`` output directory.

    python3 scripts/error_progression.py runs/desk/evaluate
"""
import argparse
from pathlib import Path

from mtl_degradation.evaluation import MetricsReport


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("evaluate_dir")
    a = ap.parse_args()
    report = MetricsReport.read_csv(Path(a.evaluate_dir) / "positions.csv")
    for ch in ("capacity", "resistance"):
        best, worst = report.best_worst(ch)
        print(f"\n{ch}: best cell {best}, worst cell {worst}")
        print(f"{'present':>8} {'n':>4} {'mean %':>8} {'median %':>9} {'p95 %':>7} {'max %':>7}")
        for r in report.progression(ch):
            print(f"{r['present_cycle']:>8} {r['n']:>4} {r['mean']:8.3f} {r['median']:9.3f} {r['p95']:7.3f} {r['max']:7.3f}")


if __name__ == "__main__":
    main()
