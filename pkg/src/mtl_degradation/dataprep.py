"""Checkup ingestion, per-cycle interpolation, SOH normalization, noise, synthetic fleets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .numeric import make_rng

Q_NOMINAL_AH = 1.85
CHECKUP_HEADER = ("cell_id", "cycle", "capacity_ah", "resistance_mohm")
SERIES_HEADER = ("cycle", "capacity_ah", "resistance_mohm")


class DataError(ValueError):
    def __init__(self, message: str, cell_id: str | None = None, row: int | None = None):
        where = []
        if cell_id is not None:
            where.append(f"cell {cell_id!r}")
        if row is not None:
            where.append(f"row {row}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.cell_id = cell_id
        self.row = row


@dataclass(frozen=True)
class CheckupRecord:
    cell_id: str
    cycle: int
    capacity: float  # Ah
    resistance: float  # mOhm


@dataclass
class CellSeries:
    """Per-cycle capacity [Ah] and resistance [mOhm], cycles 0..L."""

    cell_id: str
    capacity: np.ndarray
    resistance: np.ndarray
    q_nominal: float = Q_NOMINAL_AH
    r_base: float | None = None
    first_cycle: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        self.resistance = np.asarray(self.resistance, dtype=np.float64)
        if self.capacity.shape != self.resistance.shape or self.capacity.ndim != 1:
            raise DataError("capacity and resistance series must be 1-D and equally long", self.cell_id)
        if not (np.all(np.isfinite(self.capacity)) and np.all(np.isfinite(self.resistance))):
            raise DataError("non-finite values in series", self.cell_id)
        if np.any(self.capacity <= 0) or np.any(self.resistance <= 0):
            raise DataError("series values must be positive", self.cell_id)

    @property
    def cycles(self) -> np.ndarray:
        return self.first_cycle + np.arange(len(self.capacity))

    @property
    def last_cycle(self) -> int:
        return self.first_cycle + len(self.capacity) - 1

    def truncated(self, last_cycle: int) -> "CellSeries":
        n = last_cycle - self.first_cycle + 1
        return replace(self, capacity=self.capacity[:n].copy(), resistance=self.resistance[:n].copy())


@dataclass
class SohSeries:
    cell_id: str
    soh_c: np.ndarray
    soh_r: np.ndarray
    q_nominal: float
    r_base: float

    @property
    def cycles(self) -> np.ndarray:
        return np.arange(len(self.soh_c))


@dataclass(frozen=True)
class NoiseSpec:
    sigma_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_fraction >= 0:
            raise ValueError("sigma_fraction must be >= 0")


# ---------------------------------------------------------------------------
# ingestion

def load_checkups(path) -> list[CheckupRecord]:
    """Read the checkup CSV; records come back grouped by cell, cycles ascending.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    records: dict[str, list[CheckupRecord]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CHECKUP_HEADER:
            raise DataError(f"expected header {','.join(CHECKUP_HEADER)}", row=1)
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"expected 4 fields, got {len(row)}", row=rowno)
            cell = row[0].strip()
            try:
                cyc_f = float(row[1])
                cap = float(row[2])
                res = float(row[3])
            except ValueError:
                raise DataError("malformed number", cell, rowno) from None
            if not cell:
                raise DataError("empty cell_id", row=rowno)
            if cyc_f != int(cyc_f) or cyc_f < 0:
                raise DataError("cycle must be a non-negative integer", cell, rowno)
            if not (np.isfinite(cap) and np.isfinite(res)) or cap <= 0 or res <= 0:
                raise DataError("capacity and resistance must be positive", cell, rowno)
            rec = CheckupRecord(cell, int(cyc_f), cap, res)
            prev = records.setdefault(cell, [])
            if prev and rec.cycle == prev[-1].cycle:
                raise DataError(f"duplicated cycle {rec.cycle}", cell, rowno)
            if prev and rec.cycle < prev[-1].cycle:
                raise DataError(f"cycles not increasing ({rec.cycle} after {prev[-1].cycle})", cell, rowno)
            prev.append(rec)
    return [r for cell in sorted(records) for r in records[cell]]


def group_by_cell(records: list[CheckupRecord]) -> dict[str, list[CheckupRecord]]:
    out: dict[str, list[CheckupRecord]] = {}
    for r in records:
        out.setdefault(r.cell_id, []).append(r)
    return out


def interpolate_pchip(checkups: list[CheckupRecord], q_nominal: float = Q_NOMINAL_AH) -> CellSeries:
    """Shape-preserving cubic Hermite interpolation at every integer cycle.

    The series spans the first to the last checkup; nothing is extrapolated.
    """
    if len(checkups) < 3:
        raise DataError("PCHIP needs at least 3 checkups", checkups[0].cell_id if checkups else None)
    cell = checkups[0].cell_id
    x = np.array([c.cycle for c in checkups], dtype=np.float64)
    if np.any(np.diff(x) <= 0):
        raise DataError("checkup cycles must be strictly increasing", cell)
    grid = np.arange(int(x[0]), int(x[-1]) + 1, dtype=np.float64)
    cap = PchipInterpolator(x, [c.capacity for c in checkups])(grid)
    res = PchipInterpolator(x, [c.resistance for c in checkups])(grid)
    # exact at knots
    knots = (x - x[0]).astype(int)
    cap[knots] = [c.capacity for c in checkups]
    res[knots] = [c.resistance for c in checkups]
    return CellSeries(cell, cap, res, q_nominal, first_cycle=int(x[0]))


def fleet_r_base(cells: list[CellSeries]) -> float:
    """Mean initial resistance over ``cells`` (pass the training cells only)."""
    if not cells:
        raise DataError("r_base needs at least one cell")
    return float(np.mean([c.resistance[0] for c in cells]))


def with_r_base(cells: list[CellSeries], r_base: float) -> list[CellSeries]:
    return [replace(c, r_base=r_base) for c in cells]


def normalize(series: CellSeries, r_base: float | None = None) -> SohSeries:
    r_base = series.r_base if r_base is None else r_base
    if r_base is None or not r_base > 0:
        raise DataError("r_base must be positive", series.cell_id)
    return SohSeries(series.cell_id, series.capacity / series.q_nominal, series.resistance / r_base,
                     series.q_nominal, r_base)


def denormalize(soh: SohSeries) -> CellSeries:
    return CellSeries(soh.cell_id, soh.soh_c * soh.q_nominal, soh.soh_r * soh.r_base,
                      soh.q_nominal, soh.r_base)


def add_noise(series: CellSeries, spec: NoiseSpec) -> CellSeries:
    """Zero-mean Gaussian noise with sigma = fraction of each channel's initial value."""
    if spec.sigma_fraction == 0:
        return replace(series, capacity=series.capacity.copy(), resistance=series.resistance.copy())
    rng = make_rng(spec.seed, f"noise/{series.cell_id}")
    n = len(series.capacity)
    cap = series.capacity + rng.normal(0.0, spec.sigma_fraction * series.capacity[0], n)
    res = series.resistance + rng.normal(0.0, spec.sigma_fraction * series.resistance[0], n)
    return replace(series, capacity=cap, resistance=res)


# ---------------------------------------------------------------------------
# series cache I/O

def write_series_csv(series: CellSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for cyc, q, r in zip(series.cycles, series.capacity, series.resistance):
            w.writerow([int(cyc), repr(float(q)), repr(float(r))])


def read_series_csv(path, cell_id: str | None = None, q_nominal: float = Q_NOMINAL_AH,
                    r_base: float | None = None) -> CellSeries:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SERIES_HEADER:
            raise DataError(f"expected header {','.join(SERIES_HEADER)}", row=1)
        rows = [r for r in reader if r]
    try:
        arr = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        raise DataError("malformed number in series file") from None
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
        raise DataError("series file must have 3 columns and at least one row")
    cycles = arr[:, 0].astype(int)
    if np.any(np.diff(cycles) != 1):
        raise DataError("series cycles must be consecutive integers")
    return CellSeries(cell_id or path.stem, arr[:, 1], arr[:, 2], q_nominal, r_base, first_cycle=int(cycles[0]))


# ---------------------------------------------------------------------------
# synthetic fleet

@dataclass(frozen=True)
class SynthParams:
    """Per-cell parameters are drawn around these centres.

    capacity   q(n) = Q0 (1 - a n - b (exp(n / tau) - 1))
    resistance r(n) = R0 (1 + c n + d (exp(n / tau_r) - 1))

    A shared per-cell ageing factor ``exp(ageing_spread * z)``, ``z ~ N(0, 1)``,
    stretches both trajectories so early slopes carry information about the
    knee. Resistance parameters follow the capacity ones with a smaller
    independent ``coupling_jitter`` so both channels reach end of test together.
    """

    q0: float = Q_NOMINAL_AH
    q0_spread: float = 0.006
    r0: float = 50.0
    r0_spread: float = 0.015
    a: float = 1.6e-4
    b: float = 2.0e-3
    tau: float = 156.0
    c: float = 1.4e-4
    d: float = 1.75e-3
    tau_r: float = 156.0
    ageing_spread: float = 0.16
    jitter: float = 0.03
    coupling_jitter: float = 0.01
    soh_c_stop: float = 0.6
    soh_r_stop: float = 1.35
    max_cycles: int = 4000


@dataclass
class SynthTruth:
    cell_id: str
    params: dict
    knee_capacity: float | None
    knee_resistance: float | None
    eol: dict  # name -> analytic crossing cycle (float) or None


def _synth_cap(n, p):
    return p["q0"] * (1.0 - p["a"] * n - p["b"] * np.expm1(n / p["tau"]))


def _synth_res(n, p):
    return p["r0"] * (1.0 + p["c"] * n + p["d"] * np.expm1(n / p["tau_r"]))


def draw_cell_params(rng: np.random.Generator, sp: SynthParams) -> dict:
    z = rng.standard_normal()
    life = np.exp(sp.ageing_spread * z)  # > 1 means longer life
    ja, jb, jt = 1.0 + sp.jitter * rng.standard_normal(3)
    kc, kd, kt = 1.0 + sp.coupling_jitter * rng.standard_normal(3)
    return {
        "q0": sp.q0 * (1.0 + sp.q0_spread * rng.standard_normal()),
        "r0": sp.r0 * (1.0 + sp.r0_spread * rng.standard_normal()),
        "a": sp.a / life * ja,
        "b": sp.b * jb,
        "tau": sp.tau * life * jt,
        "c": sp.c / life * ja * kc,
        "d": sp.d * jb * kd,
        "tau_r": sp.tau_r * life * jt * kt,
    }


def analytic_crossing(fn, level: float, lo: float, hi: float) -> float | None:
    """First n in [lo, hi] where fn(n) - level changes sign (fn monotone)."""
    f_lo, f_hi = fn(lo) - level, fn(hi) - level
    if f_lo == 0:
        return lo
    if np.sign(f_lo) == np.sign(f_hi):
        return None
    return float(brentq(lambda n: fn(n) - level, lo, hi, xtol=1e-10, rtol=1e-14, maxiter=200))


def synth_cell(cell_id: str, p: dict, sp: SynthParams) -> CellSeries:
    n = np.arange(sp.max_cycles + 1, dtype=np.float64)
    cap = _synth_cap(n, p)
    res = _synth_res(n, p)
    if np.any(np.diff(cap) > 0) or np.any(np.diff(res) < 0):
        raise DataError("non-physical synthetic parameters (non-monotone curve)", cell_id)
    stop = (cap / sp.q0 < sp.soh_c_stop) | (res / sp.r0 > sp.soh_r_stop)
    if not stop.any():
        raise DataError("synthetic cell does not reach end of test within max_cycles", cell_id)
    last = int(np.argmax(stop))
    if last < 200 or cap[0] <= 0:
        raise DataError("non-physical synthetic parameters (lifetime too short)", cell_id)
    return CellSeries(cell_id, cap[:last + 1], res[:last + 1], Q_NOMINAL_AH, meta={"params": p})


def synth_fleet(n_cells: int = 48, seed: int = 0, params: SynthParams | None = None) -> list[CellSeries]:
    """Seeded synthetic fleet; ``r_base`` is set to the fleet-mean initial resistance."""
    if n_cells < 1:
        raise DataError("n_cells must be >= 1")
    sp = params or SynthParams()
    rng = make_rng(seed, "synth_fleet")
    cells = [synth_cell(f"syn{k:03d}", draw_cell_params(rng, sp), sp) for k in range(n_cells)]
    return with_r_base(cells, fleet_r_base(cells))


def synth_truth(cell: CellSeries, r_base: float, knee_oracle) -> SynthTruth:
    """Ground truth: analytic EOL crossings and brute-force knee on the dense analytic curve.

    ``knee_oracle(x, y) -> cycle`` is the maximum-curvature search.
    """
    p = cell.meta["params"]
    last = float(cell.last_cycle)
    capf = lambda n: _synth_cap(n, p)  # noqa: E731
    resf = lambda n: _synth_res(n, p)  # noqa: E731
    eol = {
        "EOL80": analytic_crossing(capf, 0.80 * cell.q_nominal, 0.0, last),
        "EOL65": analytic_crossing(capf, 0.65 * cell.q_nominal, 0.0, last),
        "EOL120": analytic_crossing(resf, 1.20 * r_base, 0.0, last),
        "EOL130": analytic_crossing(resf, 1.30 * r_base, 0.0, last),
    }
    dense = np.linspace(0.0, last, 20 * int(last) + 1)

    def knee(fn):
        try:
            return float(knee_oracle(dense, fn(dense)))
        except ValueError:  # no knee on a straight curve
            return None
    return SynthTruth(cell.cell_id, p, knee(capf), knee(resf), eol)
