"""Metrics and experiment protocols: MAPE/MAE, EOL extraction, error
progressions over a cell's life, noise sweeps, MTL vs STL comparison and
fleet-level degradation statistics."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataprep import CellSeries, NoiseSpec, SohSeries, add_noise, normalize
from .kneepoint import KneeError, SmoothingSpec, knee_offline, knee_online
from .seqmodel import ModelConfig, Seq2SeqModel, forward_batch, predict, stl_predict
from .training import SAMPLE_STRIDE_CYCLES, make_sample, present_positions, stack_samples

CHANNELS = ("capacity", "resistance")
NOISE_GRID = (0.0, 0.002, 0.004, 0.006, 0.008, 0.01)
KNEE_SMOOTHING = SmoothingSpec(25)  # per-cycle curves
ONLINE_SMOOTHING = SmoothingSpec(1)  # 20-cycle output grid


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EolThresholds:
    cap_first: float = 0.80
    cap_second: float = 0.65
    res_first: float = 1.20
    res_second: float = 1.30

    def __post_init__(self):
        if not self.cap_second < self.cap_first:
            raise ValueError("cap_second must be below cap_first")
        if not self.res_second > self.res_first:
            raise ValueError("res_second must be above res_first")

    def for_channel(self, channel: str) -> tuple[tuple[str, float], tuple[str, float]]:
        """((name, fraction) first life, (name, fraction) second life)."""
        if channel == "capacity":
            return (_eol_name(self.cap_first), self.cap_first), (_eol_name(self.cap_second), self.cap_second)
        return (_eol_name(self.res_first), self.res_first), (_eol_name(self.res_second), self.res_second)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for ch in CHANNELS for n, _ in self.for_channel(ch))


def _eol_name(fraction: float) -> str:
    return f"EOL{round(fraction * 100)}"


def _direction(channel: str) -> str:
    return "falling" if channel == "capacity" else "rising"


# ---------------------------------------------------------------------------
# point metrics

def mape(pred, truth) -> float:
    """Mean absolute percentage error in percent."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    if np.any(t == 0):
        raise ValueError("truth contains zero entries")
    return float(np.mean(np.abs(p - t) / np.abs(t)) * 100.0)


def mae(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("pred and truth must be non-empty and equally long")
    return float(np.mean(np.abs(p - t)))


def eol_cycle(cycles, values, threshold_fraction: float, base: float, direction: str = "falling") -> float | None:
    """First crossing of ``threshold_fraction * base``, linearly interpolated.

    Returns ``None`` when the curve never reaches the threshold. A curve that
    starts past the threshold crosses at its first cycle.
    """
    x = np.asarray(cycles, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("cycles and values must be 1-D and equally long")
    if direction not in ("falling", "rising"):
        raise ValueError(f"direction must be 'falling' or 'rising', got {direction!r}")
    level = threshold_fraction * base
    past = y <= level if direction == "falling" else y >= level
    if not past.any():
        return None
    k = int(np.argmax(past))
    if k == 0:
        return float(x[0])
    y0, y1 = y[k - 1], y[k]
    return float(x[k - 1] + (level - y0) / (y1 - y0) * (x[k] - x[k - 1]))


def pearson(x, y) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if a.size < 2:
        raise ValueError("need at least 2 points")
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if sa == 0 or sb == 0:
        raise ValueError("zero variance")
    return float(np.clip((a @ b) / (sa * sb), -1.0, 1.0))


def physical(soh: SohSeries, channel: str) -> np.ndarray:
    return soh.soh_c * soh.q_nominal if channel == "capacity" else soh.soh_r * soh.r_base


def _base(soh: SohSeries, channel: str) -> float:
    return soh.q_nominal if channel == "capacity" else soh.r_base


# ---------------------------------------------------------------------------
# knee references and ground truth events

def knee_references(cells: list[CellSeries], spec: SmoothingSpec = KNEE_SMOOTHING) -> dict:
    """Median offline knee gradient per channel (physical units per cycle)."""
    grads = {ch: [] for ch in CHANNELS}
    for cell in cells:
        soh = normalize(cell)
        for ch in CHANNELS:
            try:
                grads[ch].append(knee_offline(cell.cycles, physical(soh, ch), spec).knee_gradient)
            except KneeError:
                continue
    out = {}
    for ch, g in grads.items():
        if not g:
            raise EvaluationError(f"no reference cell has a {ch} knee")
        out[ch] = float(np.median(g))
    return out


@dataclass(frozen=True)
class CellEvents:
    """Knee and EOL cycles of a full curve (None when absent)."""

    knee: dict
    eol: dict


def true_events(soh: SohSeries, thresholds: EolThresholds, spec: SmoothingSpec = KNEE_SMOOTHING) -> CellEvents:
    knee, eol = {}, {}
    for ch in CHANNELS:
        y = physical(soh, ch)
        try:
            knee[ch] = knee_offline(soh.cycles, y, spec).knee_cycle
        except KneeError:
            knee[ch] = None
        for name, frac in thresholds.for_channel(ch):
            eol[name] = eol_cycle(soh.cycles, y, frac, _base(soh, ch), _direction(ch))
    return CellEvents(knee, eol)


# ---------------------------------------------------------------------------
# forecasters: map a (possibly noisy) normalized history to SOH trajectories

class ModelForecaster:
    """Batched one-shot forecasts from an MTL model or a pair of STL models."""

    def __init__(self, capacity: Seq2SeqModel, resistance: Seq2SeqModel | None = None, chunk: int = 256):
        if resistance is None:
            if not capacity.is_multitask:
                raise EvaluationError("a single model must be multi-task")
            self.models = (capacity,)
        else:
            if capacity.branches != ("capacity",) or resistance.branches != ("resistance",):
                raise EvaluationError("expected a capacity STL model and a resistance STL model")
            if capacity.config.output_len != resistance.config.output_len or \
                    capacity.config.out_step_cycles != resistance.config.out_step_cycles:
                raise EvaluationError("STL models disagree on the output grid")
            self.models = (capacity, resistance)
        self.config = capacity.config
        self.chunk = chunk

    def forecast(self, history: SohSeries, presents: list[int]) -> dict:
        samples = [make_sample(history.soh_c, history.soh_r, p, self.config) for p in presents]
        data = stack_samples(samples)
        out = {}
        for model in self.models:
            x = data.channels(model.branches)
            parts = []
            for s in range(0, len(data), self.chunk):
                sl = slice(s, s + self.chunk)
                parts.append(forward_batch(model, x[sl], data.valid_from[sl])[0])
            for br in model.branches:
                out[br] = np.concatenate([p[br] for p in parts])
        return out


class OracleForecaster:
    """Returns the clean ground truth; a perfect model for pipeline identity checks."""

    def __init__(self, truth: dict, config: ModelConfig):
        self.truth = truth  # cell_id -> SohSeries
        self.config = config

    def forecast(self, history: SohSeries, presents: list[int]) -> dict:
        soh = self.truth[history.cell_id]
        step, n = self.config.out_step_cycles, self.config.output_len
        out = {}
        for ch, y in (("capacity", soh.soh_c), ("resistance", soh.soh_r)):
            idx = np.asarray(presents)[:, None] + step * np.arange(1, n + 1)[None, :]
            out[ch] = y[np.minimum(idx, len(y) - 1)]
        return out


# ---------------------------------------------------------------------------
# reports

SUMMARY_ROWS = {
    "capacity": ("Mean curve MAPE [%]", "Max curve MAPE [%]", "Median curve MAPE [%]",
                 "Mean curve MAE [mAh]", "Max curve MAE [mAh]", "Median curve MAE [mAh]",
                 "Median knee-point error [cycle]", "Median EOL80 error [cycle]", "Median EOL65 error [cycle]"),
    "resistance": ("Mean curve MAPE [%]", "Max curve MAPE [%]", "Median curve MAPE [%]",
                   "Mean curve MAE [mΩ]", "Max curve MAE [mΩ]", "Median curve MAE [mΩ]",
                   "Median knee-point error [cycle]", "Median EOL120 error [cycle]", "Median EOL130 error [cycle]"),
}

RECORD_FIELDS = ("cell_id", "present_cycle", "channel", "n_points", "mape", "mae",
                 "knee_error", "eol_first_error", "eol_second_error")


@dataclass(frozen=True)
class PositionRecord:
    """Errors of one channel's forecast at one present cycle of one cell.

    Cycle errors are absolute and fractional; ``None`` when the true event is
    absent or already in the past at ``present_cycle``.
    """

    cell_id: str
    present_cycle: int
    channel: str
    n_points: int
    mape: float
    mae: float  # mAh for capacity, mΩ for resistance
    knee_error: float | None
    eol_first_error: float | None
    eol_second_error: float | None


def _stats(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "mean": None, "median": None, "max": None, "p5": None, "p95": None}
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)), "max": float(v.max()),
            "p5": float(np.percentile(v, 5)), "p95": float(np.percentile(v, 95))}


def _round_cycles(x):
    return None if x is None else int(round(x))


@dataclass
class MetricsReport:
    records: list[PositionRecord]
    timing: dict = field(default_factory=dict)  # label -> mean seconds per prediction

    def channel(self, ch: str) -> list[PositionRecord]:
        return [r for r in self.records if r.channel == ch]

    def stats(self, ch: str, metric: str) -> dict:
        return _stats(getattr(r, metric) for r in self.channel(ch))

    def summary(self) -> dict:
        """Summary rows per channel. Cycle errors are rounded to whole cycles."""
        out = {}
        for ch in CHANNELS:
            rows = self.channel(ch)
            if not rows:
                continue
            m, a = self.stats(ch, "mape"), self.stats(ch, "mae")
            names = SUMMARY_ROWS[ch]
            vals = (m["mean"], m["max"], m["median"], a["mean"], a["max"], a["median"],
                    _round_cycles(self.stats(ch, "knee_error")["median"]),
                    _round_cycles(self.stats(ch, "eol_first_error")["median"]),
                    _round_cycles(self.stats(ch, "eol_second_error")["median"]))
            out[ch] = dict(zip(names, vals))
        return out

    def progression(self, ch: str) -> list[dict]:
        """MAPE distribution per present cycle (error progression over life)."""
        by = {}
        for r in self.channel(ch):
            by.setdefault(r.present_cycle, []).append(r.mape)
        return [{"present_cycle": p, **_stats(v)} for p, v in sorted(by.items())]

    def cell_means(self, ch: str) -> dict:
        by = {}
        for r in self.channel(ch):
            by.setdefault(r.cell_id, []).append(r.mape)
        return {c: float(np.mean(v)) for c, v in sorted(by.items())}

    def best_worst(self, ch: str) -> tuple[str, str]:
        """Cells with the lowest and highest lifetime-mean curve MAPE."""
        means = self.cell_means(ch)
        return min(means, key=means.get), max(means, key=means.get)

    def to_json_dict(self) -> dict:
        d = {"summary": self.summary(), "timing": dict(sorted(self.timing.items()))}
        d["distribution"] = {ch: {m: self.stats(ch, m) for m in ("mape", "mae", "knee_error", "eol_first_error",
                                                                 "eol_second_error")}
                             for ch in CHANNELS if self.channel(ch)}
        d["best_worst"] = {ch: dict(zip(("best", "worst"), self.best_worst(ch))) for ch in CHANNELS
                           if self.channel(ch)}
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_FIELDS)
            for r in self.records:
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                            for v in (getattr(r, f) for f in RECORD_FIELDS)])

    def write_json(self, path) -> None:
        write_json(self.to_json_dict(), path)

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        recs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                def f(k):
                    return None if row[k] == "" else float(row[k])
                recs.append(PositionRecord(row["cell_id"], int(row["present_cycle"]), row["channel"],
                                           int(row["n_points"]), f("mape"), f("mae"), f("knee_error"),
                                           f("eol_first_error"), f("eol_second_error")))
        return cls(recs)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# protocols

EVENT_TRUTH = ("curve", "grid")


def _event_error(pred_cycles, pred_curve, true_cycle, present, finder):
    """|predicted - true| for an event inside the forecast window (first to
    last forecast cycle, after ``present``); a missed event is placed at the
    window end."""
    if true_cycle is None or not max(present, pred_cycles[0]) <= true_cycle <= pred_cycles[-1]:
        return None
    got = finder(pred_cycles, pred_curve)
    if got is None:
        got = float(pred_cycles[-1])
    return abs(got - true_cycle)


def evaluate_cell(forecaster, truth: SohSeries, history: SohSeries | None = None,
                  thresholds: EolThresholds = EolThresholds(), knee_refs: dict | None = None,
                  stride: int = SAMPLE_STRIDE_CYCLES, event_truth: str = "curve") -> list[PositionRecord]:
    """Per-position error records for one cell.

    ``history`` supplies the model inputs (defaults to ``truth``; the noise
    sweep passes a noisy copy). Errors are always measured against ``truth``.

    Event errors count only events inside the forecast window. With
    ``event_truth="curve"`` the true events come from the full per-cycle
    curve (offline knee, per-cycle EOL crossing). ``"grid"`` applies the
    forecast-side detectors to the truth sampled on the forecast grid, which
    isolates forecast error from detector and grid bias.
    """
    if event_truth not in EVENT_TRUTH:
        raise ValueError(f"event_truth must be one of {EVENT_TRUTH}, got {event_truth!r}")
    history = truth if history is None else history
    step = forecaster.config.out_step_cycles
    last = truth.cycles[-1]
    # positions where a forecast is defined: a full history window and a future target
    presents = [p for p in present_positions(int(last), stride)
                if p + step <= last and p <= forecaster.config.max_history_cycles]
    if not presents:
        return []
    preds = forecaster.forecast(history, presents)
    events = true_events(truth, thresholds)
    records = []
    for k, p in enumerate(presents):
        n = min((int(last) - p) // step, forecaster.config.output_len)
        cyc = p + step * np.arange(1, n + 1, dtype=np.float64)
        for ch in CHANNELS:
            if ch not in preds:
                continue
            base = _base(truth, ch)
            y_true = physical(truth, ch)[p + step * np.arange(1, n + 1)]
            y_pred = preds[ch][k, :n] * base
            scale = 1000.0 if ch == "capacity" else 1.0  # Ah -> mAh

            def error(finder, curve_truth):
                true_cycle = curve_truth if event_truth == "curve" else finder(cyc, y_true)
                return _event_error(cyc, y_pred, true_cycle, p, finder)

            knee_err = None
            if knee_refs is not None and n >= 3:
                def find_knee(x, y, ref=knee_refs[ch]):
                    try:
                        return knee_online(x, y, ref, ONLINE_SMOOTHING)
                    except KneeError:
                        return None
                knee_err = error(find_knee, events.knee[ch])
            eol_err = []
            for name, frac in thresholds.for_channel(ch):
                def find_eol(x, y, frac=frac, ch=ch, base=base):
                    return eol_cycle(x, y, frac, base, _direction(ch))
                eol_err.append(error(find_eol, events.eol[name]))
            records.append(PositionRecord(truth.cell_id, p, ch, n, mape(y_pred, y_true),
                                          mae(y_pred, y_true) * scale, knee_err, *eol_err))
    return records


def progression_eval(forecaster, cells: list[CellSeries], thresholds: EolThresholds = EolThresholds(),
                     knee_refs: dict | None = None, noise: NoiseSpec | None = None,
                     stride: int = SAMPLE_STRIDE_CYCLES, event_truth: str = "curve") -> MetricsReport:
    """Forecast every test cell at present cycles 100, 120, ... and collect errors.

    With ``noise`` the Gaussian perturbation is applied to the model inputs
    only; targets stay clean.
    """
    if isinstance(forecaster, Seq2SeqModel):
        forecaster = ModelForecaster(forecaster)
    records = []
    for cell in cells:
        truth = normalize(cell)
        hist = None if noise is None else normalize(add_noise(cell, noise))
        records += evaluate_cell(forecaster, truth, hist, thresholds, knee_refs, stride, event_truth)
    if not records:
        raise EvaluationError("no evaluable positions in the given cells")
    return MetricsReport(records)


def noise_sweep(forecaster, cells: list[CellSeries], sigma_grid=NOISE_GRID, seed: int = 0,
                thresholds: EolThresholds = EolThresholds(), knee_refs: dict | None = None,
                event_truth: str = "curve") -> dict:
    """``progression_eval`` per noise level; every level uses the same seed."""
    sigmas = [float(s) for s in sigma_grid]
    if any(not s >= 0 for s in sigmas):
        raise ValueError("noise levels must be >= 0")
    return {s: progression_eval(forecaster, cells, thresholds, knee_refs, NoiseSpec(s, seed), event_truth=event_truth)
            for s in sigmas}


def noise_table(reports: dict) -> list[list]:
    """Rows ``[channel, metric, value@sigma0, value@sigma1, ...]``."""
    sigmas = list(reports)
    summaries = [reports[s].summary() for s in sigmas]
    rows = [["channel", "metric"] + [f"{s * 100:g}% noise" if s else "normal" for s in sigmas]]
    for ch in CHANNELS:
        for name in SUMMARY_ROWS[ch]:
            rows.append([ch, name] + [sm.get(ch, {}).get(name) for sm in summaries])
    return rows


# ---------------------------------------------------------------------------
# MTL vs STL

def _timing_stats(t: np.ndarray) -> dict:
    return {"mean": float(t.mean()), "median": float(np.median(t)), "std": float(t.std()), "reps": int(t.size)}


def time_calls(fn, reps: int = 100, warmup: int = 5) -> dict:
    """Wall time per call of ``fn()`` over ``reps`` warm repetitions."""
    return time_interleaved({"fn": fn}, reps, warmup)["fn"]


def time_interleaved(fns: dict, reps: int = 100, warmup: int = 5) -> dict:
    """Per-call wall time of each function in ``fns``, calling them round-robin
    so slow drifts in machine speed affect all of them alike."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    t = {k: np.empty(reps) for k in fns}
    for r in range(reps):
        for k, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            t[k][r] = time.perf_counter() - t0
    return {k: _timing_stats(v) for k, v in t.items()}


def benchmark_mtl_stl(mtl: Seq2SeqModel, stl_cap: Seq2SeqModel, stl_res: Seq2SeqModel, cell: CellSeries,
                      present: int, reps: int = 100) -> dict:
    """Per-prediction wall time including input preprocessing (resampling, padding, masking)."""
    soh = normalize(cell)
    hc, hr = soh.soh_c[:present + 1], soh.soh_r[:present + 1]
    return time_interleaved({
        "mtl": lambda: predict(hc, hr, mtl),
        "stl_capacity": lambda: stl_predict(hc, stl_cap),
        "stl_resistance": lambda: stl_predict(hr, stl_res),
    }, reps)


COMPARISON_ROWS = (
    ("Mean capacity curve MAPE [%]", "capacity", "Mean curve MAPE [%]"),
    ("Median capacity curve MAPE [%]", "capacity", "Median curve MAPE [%]"),
    ("Max capacity curve MAPE [%]", "capacity", "Max curve MAPE [%]"),
    ("Median capacity knee-point error [cycle]", "capacity", "Median knee-point error [cycle]"),
    ("Median EOL80 error [cycle]", "capacity", "Median EOL80 error [cycle]"),
    ("Median EOL65 error [cycle]", "capacity", "Median EOL65 error [cycle]"),
    ("Mean resistance curve MAPE [%]", "resistance", "Mean curve MAPE [%]"),
    ("Median resistance curve MAPE [%]", "resistance", "Median curve MAPE [%]"),
    ("Max resistance curve MAPE [%]", "resistance", "Max curve MAPE [%]"),
    ("Median resistance knee-point error [cycle]", "resistance", "Median knee-point error [cycle]"),
    ("Median EOL120 error [cycle]", "resistance", "Median EOL120 error [cycle]"),
    ("Median EOL130 error [cycle]", "resistance", "Median EOL130 error [cycle]"),
)
COST_ROW = "Mean computational cost [s]"


def _positions(report: MetricsReport, ch: str) -> list:
    return sorted((r.cell_id, r.present_cycle) for r in report.channel(ch))


def compare_mtl_stl(mtl: MetricsReport, stl_cap: MetricsReport, stl_res: MetricsReport,
                    timing: dict | None = None) -> list[tuple[str, object, object]]:
    """Comparison ``(row, stl, mtl)`` triples (13 rows with timing)."""
    if _positions(mtl, "capacity") != _positions(stl_cap, "capacity") or \
            _positions(mtl, "resistance") != _positions(stl_res, "resistance"):
        raise EvaluationError("MTL and STL reports cover different cells or positions")
    sm, sc, sr = mtl.summary(), stl_cap.summary(), stl_res.summary()
    rows = []
    for label, ch, key in COMPARISON_ROWS:
        stl = (sc if ch == "capacity" else sr)[ch][key]
        rows.append((label, stl, sm[ch][key]))
    if timing is not None:
        rows.append((COST_ROW, timing["stl_capacity"]["mean"] + timing["stl_resistance"]["mean"],
                     timing["mtl"]["mean"]))
    return rows


def write_table_csv(rows, header, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])


# ---------------------------------------------------------------------------
# fleet degradation statistics

METRIC_COLUMNS = ("CapKneeX", "CapKneeY", "ResKneeX", "ResKneeY", "EOL80", "EOL65", "EOL120", "EOL130")


@dataclass
class DegradationTable:
    rows: list[dict]  # cell_id + METRIC_COLUMNS (None when absent)
    correlation: np.ndarray | None  # (8, 8) pairwise rho, NaN where undefined
    note: str = ""

    def write_csv(self, table_path, corr_path=None) -> None:
        write_table_csv([[r["cell_id"]] + [r[c] for c in METRIC_COLUMNS] for r in self.rows],
                        ("cell_id",) + METRIC_COLUMNS, table_path)
        if corr_path is not None and self.correlation is not None:
            write_table_csv([[a] + [None if np.isnan(v) else float(v) for v in row]
                             for a, row in zip(METRIC_COLUMNS, self.correlation)],
                            ("metric",) + METRIC_COLUMNS, corr_path)


def degradation_metrics(cells: list[CellSeries], thresholds: EolThresholds = EolThresholds(),
                        spec: SmoothingSpec = KNEE_SMOOTHING) -> DegradationTable:
    """Knee cycles/values and the four EOLs per cell, plus the pairwise Pearson matrix."""
    rows = []
    for cell in cells:
        soh = normalize(cell)
        row = {"cell_id": cell.cell_id}
        for ch, tag in (("capacity", "Cap"), ("resistance", "Res")):
            try:
                k = knee_offline(cell.cycles, physical(soh, ch), spec)
                row[f"{tag}KneeX"], row[f"{tag}KneeY"] = k.knee_cycle, k.knee_value
            except KneeError:
                row[f"{tag}KneeX"] = row[f"{tag}KneeY"] = None
        ev = true_events(soh, thresholds, spec)
        for name in thresholds.names:
            row[name] = ev.eol[name]
        rows.append(row)
    if len(rows) < 2:
        return DegradationTable(rows, None, "correlation undefined for fewer than 2 cells")
    m = len(METRIC_COLUMNS)
    corr = np.full((m, m), np.nan)
    for i, a in enumerate(METRIC_COLUMNS):
        for j, b in enumerate(METRIC_COLUMNS):
            pairs = [(r[a], r[b]) for r in rows if r.get(a) is not None and r.get(b) is not None]
            if len(pairs) >= 2:
                try:
                    corr[i, j] = pearson(*map(list, zip(*pairs)))
                except ValueError:
                    pass
    return DegradationTable(rows, corr)


__all__ = [
    "EolThresholds", "mape", "mae", "eol_cycle", "pearson", "knee_references", "true_events", "CellEvents",
    "ModelForecaster", "OracleForecaster", "PositionRecord", "MetricsReport", "evaluate_cell",
    "progression_eval", "noise_sweep", "noise_table", "time_calls", "time_interleaved", "benchmark_mtl_stl", "compare_mtl_stl",
    "degradation_metrics", "DegradationTable", "NOISE_GRID", "SUMMARY_ROWS", "COMPARISON_ROWS", "METRIC_COLUMNS",
    "EvaluationError", "EVENT_TRUTH", "write_json", "write_table_csv",
]
