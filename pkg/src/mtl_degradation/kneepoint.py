"""Knee detection on degradation curves.

Offline: normalize both axes to [0, 1], flip into concave-increasing form and
take the argmax of ``y - x`` (kneedle). Online: the first cycle at which the
smoothed gradient magnitude of a predicted curve reaches a reference knee
gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_WINDOW_CYCLES = 25


class KneeError(ValueError):
    pass


class NoKneeError(KneeError):
    pass


@dataclass(frozen=True)
class SmoothingSpec:
    window: int = 25  # half-width in samples

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")

    @classmethod
    def for_spacing(cls, step_cycles: float, window_cycles: float = DEFAULT_WINDOW_CYCLES) -> "SmoothingSpec":
        return cls(int(round(window_cycles / step_cycles)))


@dataclass(frozen=True)
class KneeResult:
    knee_cycle: float
    knee_value: float
    knee_gradient: float


def smooth(curve, spec: SmoothingSpec) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically near the ends."""
    y = np.asarray(curve, dtype=np.float64)
    w = spec.window
    n = len(y)
    if n <= 2 * w:
        raise KneeError(f"curve of length {n} too short for window {w}")
    if w == 0:
        return y.copy()
    cs = np.concatenate([[0.0], np.cumsum(y)])
    i = np.arange(n)
    half = np.minimum(np.minimum(i, n - 1 - i), w)
    return (cs[i + half + 1] - cs[i - half]) / (2 * half + 1)


def _orientation(yn: np.ndarray, xn: np.ndarray) -> tuple[bool, bool]:
    """(increasing, concave) of a normalized curve."""
    increasing = yn[-1] >= yn[0]
    chord = yn[0] + (yn[-1] - yn[0]) * xn
    concave = float(np.mean(yn - chord)) > 0
    return increasing, concave


def _to_canonical(xn, yn):
    increasing, concave = _orientation(yn, xn)
    flip_x = increasing != concave
    flip_y = not concave
    xc = 1.0 - xn if flip_x else xn
    yc = 1.0 - yn if flip_y else yn
    return xc, yc


def knee_offline(cycles, values, spec: SmoothingSpec = SmoothingSpec(), monotone_tol: float = 0.02,
                 min_height: float = 1e-6) -> KneeResult:
    """Kneedle on a (smoothed) degradation curve.

    Raises :class:`NoKneeError` for a straight or flat curve and
    :class:`KneeError` when the smoothed curve is not monotone within
    ``monotone_tol`` of its range.
    """
    x = np.asarray(cycles, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise KneeError("cycles and values must be 1-D and equally long")
    ys = smooth(y, spec)
    if len(ys) < 10:
        raise KneeError("need at least 10 points")
    span = ys.max() - ys.min()
    if span <= 0 or x[-1] == x[0]:
        raise NoKneeError("flat curve has no knee")
    # largest retracement against the overall trend, relative to the range
    trend = np.sign(ys[-1] - ys[0]) * ys
    if np.max(np.maximum.accumulate(trend) - trend) > monotone_tol * span:
        raise KneeError("curve is not monotone after smoothing")
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (ys - ys.min()) / span
    xc, yc = _to_canonical(xn, yn)
    diff = yc - xc
    best = diff.max()
    if best <= min_height:
        raise NoKneeError("curve has no knee (straight line)")
    cand = np.flatnonzero(diff == best)
    k = int(cand[np.argmin(x[cand])])  # earliest cycle on ties
    grad = np.gradient(ys, x)
    return KneeResult(float(x[k]), float(ys[k]), float(grad[k]))


def knee_online(cycles, values, reference_gradient: float, spec: SmoothingSpec = SmoothingSpec(1)) -> float:
    """First cycle at which |smoothed gradient| reaches ``|reference_gradient|``.

    Linear interpolation between grid points. Raises :class:`NoKneeError`
    if the threshold is never reached.
    """
    x = np.asarray(cycles, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if len(x) < 2 or x.shape != y.shape:
        raise KneeError("need matching cycles and values with at least 2 points")
    ys = smooth(y, spec) if len(y) > 2 * spec.window else y
    g = np.abs(np.gradient(ys, x))
    thr = abs(reference_gradient)
    hit = np.flatnonzero(g >= thr)
    if hit.size == 0:
        raise NoKneeError("no knee in horizon")
    k = int(hit[0])
    if k == 0:
        return float(x[0])
    g0, g1 = g[k - 1], g[k]
    frac = (thr - g0) / (g1 - g0) if g1 != g0 else 1.0
    return float(x[k - 1] + frac * (x[k] - x[k - 1]))


def max_curvature_knee(cycles, values, min_curvature: float = 1e-6) -> float:
    """Brute-force oracle: argmax of curvature of the curve on [0, 1]-normalized axes.

    Intended for densely sampled smooth curves; derivatives by finite
    differences. Raises :class:`NoKneeError` when the peak curvature is below
    ``min_curvature`` (a straight line).
    """
    x = np.asarray(cycles, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / (y.max() - y.min())
    d1 = np.gradient(yn, xn)
    d2 = np.gradient(d1, xn)
    kappa = np.abs(d2) / (1.0 + d1 * d1) ** 1.5
    # one-sided second differences at the ends are unreliable
    kappa[:2] = kappa[-2:] = -np.inf
    k = int(np.argmax(kappa))
    if not kappa[k] > min_curvature:
        raise NoKneeError("curve has no knee (zero curvature)")
    return float(x[k])
