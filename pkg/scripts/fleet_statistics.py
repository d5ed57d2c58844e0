"""Knee and end-of-life statistics of a fleet and their pairwise Pearson correlations.

    python3 scripts/fleet_statistics.py [--data DIR] [--cells 48] [--seed 0] [--out DIR]

Without ``--data`` a seeded synthetic fleet is used.
"""
import argparse
from pathlib import Path

import numpy as np

from mtl_degradation.cli import load_fleet
from mtl_degradation.dataprep import synth_fleet
from mtl_degradation.evaluation import METRIC_COLUMNS, degradation_metrics


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", help="series directory written by 'prepare' or 'synth'")
    ap.add_argument("--cells", type=int, default=48)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write degradation_metrics.csv and degradation_correlation.csv here")
    a = ap.parse_args()
    cells = load_fleet(a.data) if a.data else synth_fleet(a.cells, a.seed)
    table = degradation_metrics(cells)
    for col in METRIC_COLUMNS:
        v = np.array([r[col] for r in table.rows if r[col] is not None], dtype=float)
        print(f"{col:<9} n={v.size:<3} mean {v.mean():9.3f}  std {v.std():8.3f}  min {v.min():9.3f}  max {v.max():9.3f}")
    if table.correlation is None:
        print(table.note)
    else:
        print("\nPearson correlation")
        print(" " * 9 + "".join(f"{c:>9}" for c in METRIC_COLUMNS))
        for name, row in zip(METRIC_COLUMNS, table.correlation):
            print(f"{name:<9}" + "".join(f"{x:9.2f}" for x in row))
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "degradation_metrics.csv", out / "degradation_correlation.csv")


if __name__ == "__main__":
    main()
