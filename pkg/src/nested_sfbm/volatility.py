"""Volatility measurement and pre-processing.

Two measurement routes feed the calibration: realized quadratic variation
from fine-grid returns (synthetic panels) and the Garman-Klass range
estimator from daily OHLC bars (empirical data).  Both produce per-period
variance series that are floored away from zero, logged, and then pushed
through the rank Gaussianization that the moment fits assume.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

# values below this fraction of the median positive value are raised to the
# floor and counted; downstream logs stay finite
FLOOR_RATIO = 1e-12

VOL_KINDS = ("realized_qv", "garman_klass", "proxy")

_GK_RANGE_COEF = 0.5
_GK_BODY_COEF = 2.0 * math.log(2.0) - 1.0


@dataclass(frozen=True)
class OhlcBar:
    """One daily bar; prices must satisfy low <= min(o,c) <= max(o,c) <= high."""

    date: object
    open: float
    high: float
    low: float
    close: float

    def __post_init__(self):
        o, h, l, c = (float(self.open), float(self.high),
                      float(self.low), float(self.close))
        if min(o, h, l, c) <= 0.0:
            raise ValueError("%s: prices must be positive" % (self.date,))
        if not (l <= min(o, c) and max(o, c) <= h):
            raise ValueError(
                "%s: OHLC ordering violated (o=%g h=%g l=%g c=%g)"
                % (self.date, o, h, l, c)
            )
        for name, v in (("open", o), ("high", h), ("low", l), ("close", c)):
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class VolSeries:
    """Per-period variance estimates on scale delta, strictly positive.

    floored_count records how many raw values sat below the floor; it feeds
    the calibration diagnostics.
    """

    values: np.ndarray
    delta: float
    kind: str
    floored_count: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 2:
            raise ValueError("need a 1-D series of length >= 2")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
            raise ValueError("values must be finite and strictly positive")
        if self.kind not in VOL_KINDS:
            raise ValueError("kind must be one of %s" % (VOL_KINDS,))
        if not self.delta > 0.0:
            raise ValueError("delta must be positive")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "floored_count", int(self.floored_count))

    def __len__(self):
        return self.values.size

    def log_values(self) -> np.ndarray:
        return np.log(self.values)


@dataclass(frozen=True)
class GaussianizedSeries:
    """Rank-Gaussianized log series, standardized to zero mean, unit variance.

    ranks keeps the (average-tie) rank map for audit; input_mean/input_std
    preserve the location and scale of the raw log series that the
    standardization throws away.
    """

    values: np.ndarray
    source: object
    ranks: np.ndarray
    input_mean: float
    input_std: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.flags.writeable = False
        ranks = np.asarray(self.ranks, dtype=float)
        ranks.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "ranks", ranks)

    def __len__(self):
        return self.values.size


def _apply_floor(raw) -> tuple:
    vals = np.asarray(raw, dtype=float)
    positive = vals[vals > 0.0]
    scale = float(np.median(positive)) if positive.size else 1.0
    eps = FLOOR_RATIO * scale
    mask = vals < eps
    return np.where(mask, eps, vals), int(mask.sum())


def realized_qv(panel, selector) -> VolSeries:
    """Per-period quadratic variation of one fine return series.

    selector picks the series: a stock row index, the string 'factor', a
    basket result carrying .values, or a raw fine-grid return array.
    """
    s = panel.subdivisions
    if s < 2:
        raise ValueError("realized_qv needs at least 2 subdivisions per period")
    n_fine = panel.fine_returns.shape[1]
    if isinstance(selector, (int, np.integer)):
        if not 0 <= selector < panel.fine_returns.shape[0]:
            raise ValueError("stock index %d out of range" % selector)
        series = panel.fine_returns[int(selector)]
    elif isinstance(selector, str):
        if selector != "factor":
            raise ValueError("unknown selector %r" % selector)
        series = panel.factor_returns
    else:
        series = np.asarray(getattr(selector, "values", selector), dtype=float)
        if series.ndim != 1 or series.size == 0:
            raise ValueError("selection is empty or not a 1-D series")
        if series.size != n_fine:
            raise ValueError("series length %d does not match the panel" % series.size)
    qv = np.square(series).reshape(-1, s).sum(axis=1)
    floored, count = _apply_floor(qv)
    return VolSeries(values=floored, delta=panel.delta, kind="realized_qv",
                     floored_count=count)


def garman_klass_single(bar: OhlcBar) -> float:
    """0.5 ln^2(high/low) - (2 ln 2 - 1) ln^2(close/open) for one bar."""
    hl = math.log(bar.high / bar.low)
    co = math.log(bar.close / bar.open)
    return _GK_RANGE_COEF * hl * hl - _GK_BODY_COEF * co * co


def garman_klass(bars, delta: float = 1.0) -> VolSeries:
    """Daily variance series from validated OHLC bars."""
    raw = [garman_klass_single(b) for b in bars]
    floored, count = _apply_floor(raw)
    return VolSeries(values=floored, delta=delta, kind="garman_klass",
                     floored_count=count)


def gaussianize(log_values, source=None) -> GaussianizedSeries:
    """Map a log-volatility series onto standard normal quantiles by rank.

    Ranks use average tie handling and the plotting position rank/(n+1),
    which keeps the inverse CDF finite at the extremes; the result is then
    standardized to zero mean and unit variance.  Requires at least 30
    observations and a non-degenerate input.
    """
    y = np.asarray(getattr(log_values, "values", log_values), dtype=float)
    if y.ndim != 1:
        raise ValueError("need a 1-D series")
    n = y.size
    if n < 30:
        raise ValueError("need at least 30 observations, got %d" % n)
    if not np.all(np.isfinite(y)):
        raise ValueError("input contains non-finite values")
    if np.all(y == y[0]):
        raise ValueError("degenerate input: all values equal")
    ranks = rankdata(y, method="average")
    mapped = norm.ppf(ranks / (n + 1.0))
    mapped = (mapped - mapped.mean()) / mapped.std()
    return GaussianizedSeries(
        values=mapped,
        source=source,
        ranks=ranks,
        input_mean=float(y.mean()),
        input_std=float(y.std()),
    )


def hurst_by_moment_scaling(series, q_list=(0.5, 1.0, 1.5, 2.0), lag_list=None) -> float:
    """Scaling-exponent estimate of the Hurst index from absolute moments.

    For each q the log of m(q, tau) = mean |X(t+tau) - X(t)|^q is regressed
    on log tau; for Gaussian increments m(q, tau) scales like tau^(qH), so
    the estimate pools slope(q)/q over q.  Lags default to powers of two up
    to an eighth of the series length.  A negative pooled slope (nothing
    scales, e.g. white noise) clamps to 0 with a warning.
    """
    x = np.asarray(getattr(series, "values", series), dtype=float)
    if x.ndim != 1:
        raise ValueError("need a 1-D series")
    n = x.size
    if lag_list is None:
        lag_list = []
        lag = 1
        while lag <= n // 8:
            lag_list.append(lag)
            lag *= 2
    lag_list = sorted(int(l) for l in lag_list)
    if len(lag_list) < 3:
        raise ValueError("need at least 3 lags to fit a scaling exponent")
    if lag_list[0] < 1 or lag_list[-1] >= n:
        raise ValueError("lags must lie in [1, len(series))")

    log_lags = np.log(np.asarray(lag_list, dtype=float))
    per_q = []
    for q in q_list:
        moments = np.array(
            [np.mean(np.abs(x[lag:] - x[:-lag]) ** q) for lag in lag_list]
        )
        if np.any(moments <= 0.0):
            raise ValueError("degenerate series: vanishing increment moments")
        slope = np.polyfit(log_lags, np.log(moments), 1)[0]
        per_q.append(slope / q)
    per_q = np.asarray(per_q)

    center = float(per_q.mean())
    spread = float(per_q.max() - per_q.min())
    if center > 0.02 and spread > 0.25 * center:
        warnings.warn(
            "moment slopes disagree across q by %.3f around %.3f; "
            "the scaling law is suspect" % (spread, center)
        )
    if center < 0.0:
        warnings.warn(
            "no increment scaling detected (pooled slope %.4f); clamping to 0"
            % center
        )
        return 0.0
    return center
