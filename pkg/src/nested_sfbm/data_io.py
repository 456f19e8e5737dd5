"""Daily-bar ingestion and the synthetic OHLC round trip.

One CSV file per ticker, header ``date,open,high,low,close`` (extra columns
are ignored, the filename stem is the ticker).  load_ohlc_dir aligns a
directory of such files on their common dates and returns close-to-close
log returns next to per-bar Garman-Klass variance series, which is exactly
the input shape of run_calibration_from_daily.

The other direction, export_ohlc_dir, writes a return panel plus target
per-period variances as OHLC files whose Garman-Klass values reload
bit-exact.  high and low are placed symmetrically around the geometric
mid of open and close, widened just enough that the range term reproduces
the requested variance; prices are serialized with repr() so the text
round trip does not move a single bit.
"""

import csv
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .volatility import OhlcBar, VolSeries, garman_klass

OHLC_COLUMNS = ("date", "open", "high", "low", "close")
MISSING_MAX = 0.05
_GK_BODY_COEF = 2.0 * math.log(2.0) - 1.0


class DataError(ValueError):
    """Unusable input data: missing files, empty joins, bad directories."""


@dataclass(frozen=True)
class OhlcFile:
    """Parsed bars of one ticker plus the log of skipped rows."""

    ticker: str
    path: str
    bars: tuple
    errors: tuple = ()

    def __post_init__(self):
        bars = tuple(self.bars)
        for prev, cur in zip(bars, bars[1:]):
            if cur.date <= prev.date:
                raise ValueError(
                    "%s: dates must be strictly increasing (%s after %s)"
                    % (self.ticker, cur.date, prev.date)
                )
        object.__setattr__(self, "bars", bars)
        object.__setattr__(self, "errors", tuple(str(e) for e in self.errors))

    def dates(self) -> tuple:
        return tuple(b.date for b in self.bars)


@dataclass(frozen=True)
class OhlcPanel:
    """Inner-joined daily panel: returns row i and gk[i] belong to tickers[i].

    dates holds the return dates (the joined calendar minus its first
    session); returns are close-to-close log returns over the joined
    calendar, so a calendar gap is spanned by one return.
    """

    tickers: tuple
    dates: tuple
    returns: np.ndarray
    gk: tuple
    files: tuple
    excluded: tuple = ()

    def __post_init__(self):
        ret = np.asarray(self.returns, dtype=float)
        if ret.ndim != 2:
            raise ValueError("returns must be a 2-D array")
        if ret.shape[0] != len(self.tickers):
            raise ValueError("one return row per ticker")
        if ret.shape[1] != len(self.dates):
            raise ValueError("one return column per date")
        if len(self.gk) != len(self.tickers):
            raise ValueError("one GK series per ticker")
        for g in self.gk:
            if len(g) != ret.shape[1]:
                raise ValueError("GK series length must match the dates")
        ret = ret.copy()
        ret.flags.writeable = False
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "returns", ret)
        object.__setattr__(self, "gk", tuple(self.gk))
        object.__setattr__(self, "files", tuple(self.files))
        object.__setattr__(self, "excluded", tuple(self.excluded))

    @property
    def n_tickers(self):
        return len(self.tickers)

    @property
    def n_periods(self):
        return len(self.dates)


def _parse_date(text):
    return date.fromisoformat(text.strip())


def read_ohlc_csv(path, ticker=None) -> OhlcFile:
    """Parse one ticker file; malformed rows are logged and skipped.

    A row is malformed when a field is missing or non-numeric, a price
    violates the OHLC ordering, or its date does not advance the last
    accepted one.  A missing or incomplete header is not recoverable and
    raises DataError.
    """
    path = Path(path)
    if ticker is None:
        ticker = path.stem
    bars, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("%s: empty file" % path)
        names = [h.strip().lower() for h in header]
        try:
            cols = [names.index(c) for c in OHLC_COLUMNS]
        except ValueError:
            raise DataError(
                "%s: header must contain %s, got %r"
                % (path, ",".join(OHLC_COLUMNS), ",".join(names))
            ) from None
        for lineno, row in enumerate(reader, start=2):
            try:
                d = _parse_date(row[cols[0]])
                bar = OhlcBar(d, *(float(row[c]) for c in cols[1:]))
            except (ValueError, IndexError) as exc:
                errors.append("line %d: %s" % (lineno, exc))
                continue
            if bars and d <= bars[-1].date:
                errors.append(
                    "line %d: date %s does not advance %s" % (lineno, d, bars[-1].date)
                )
                continue
            bars.append(bar)
    return OhlcFile(ticker=ticker, path=str(path), bars=tuple(bars),
                    errors=tuple(errors))


def _in_range(bars, start, end):
    out = bars
    if start is not None:
        out = [b for b in out if b.date >= start]
    if end is not None:
        out = [b for b in out if b.date <= end]
    return tuple(out)


def load_ohlc_dir(path, start=None, end=None, min_files=3) -> OhlcPanel:
    """Load every *.csv in a directory and align the tickers on shared dates.

    Tickers missing more than 5% of the union calendar inside the date
    range are excluded and listed in the result, as are unparsable files.
    Needs at least min_files parsable files and at least two usable
    tickers whose date intersection spans three or more sessions.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError("%s is not a directory" % root)
    if isinstance(start, str):
        start = _parse_date(start)
    if isinstance(end, str):
        end = _parse_date(end)
    paths = sorted(root.glob("*.csv"))
    if not paths:
        raise DataError("no CSV files under %s" % root)

    parsed, excluded = [], []
    for p in paths:
        try:
            f = read_ohlc_csv(p)
        except (OSError, DataError) as exc:
            excluded.append((p.stem, str(exc)))
            continue
        bars = _in_range(f.bars, start, end)
        if len(bars) < 2:
            excluded.append((f.ticker, "only %d rows in the date range" % len(bars)))
            continue
        parsed.append(OhlcFile(f.ticker, f.path, bars, f.errors))
    if len(parsed) < min_files:
        raise DataError(
            "need at least %d parsable files, found %d" % (min_files, len(parsed))
        )

    calendar = set()
    for f in parsed:
        calendar.update(f.dates())
    n_sessions = len(calendar)
    kept = []
    for f in parsed:
        missing = 1.0 - len(f.bars) / n_sessions
        if missing > MISSING_MAX:
            excluded.append(
                (f.ticker,
                 "missing %.1f%% of %d sessions" % (100.0 * missing, n_sessions))
            )
        else:
            kept.append(f)
    if len(kept) < 2:
        raise DataError(
            "only %d usable tickers after exclusions (%s)"
            % (len(kept), "; ".join("%s: %s" % e for e in excluded))
        )

    joined = set(kept[0].dates())
    for f in kept[1:]:
        joined &= set(f.dates())
    joined = sorted(joined)
    if len(joined) < 3:
        raise DataError("date intersection has only %d sessions" % len(joined))

    returns = np.empty((len(kept), len(joined) - 1))
    gk = []
    for i, f in enumerate(kept):
        by_date = {b.date: b for b in f.bars}
        bars = [by_date[d] for d in joined]
        closes = np.array([b.close for b in bars])
        returns[i] = np.diff(np.log(closes))
        gk.append(garman_klass(bars[1:], delta=1.0))
    return OhlcPanel(
        tickers=tuple(f.ticker for f in kept),
        dates=tuple(joined[1:]),
        returns=returns,
        gk=tuple(gk),
        files=tuple(kept),
        excluded=tuple(excluded),
    )


def trading_dates(start, count) -> tuple:
    """count consecutive weekdays beginning at the first weekday >= start."""
    if isinstance(start, str):
        start = _parse_date(start)
    out, d = [], start
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return tuple(out)


def ohlc_bars_from_returns(returns, variances, dates, start_price=100.0) -> tuple:
    """Bars whose close-to-close log returns and Garman-Klass variances
    encode the given series.

    The first bar is a flat session at the start price so that every
    return has a prior close; each later bar opens at the previous close
    and brackets open/close with the high/low width that makes the
    Garman-Klass value equal the requested variance.  When a return is so
    large that even the tightest admissible bracket (high/low equal to
    open/close) sits above the target, the bracket collapses onto
    open/close and the bar reports (1/2 - (2 ln 2 - 1)) r^2 instead of the
    requested value; reloading still reproduces whatever was written.
    """
    r = np.asarray(returns, dtype=float)
    v = np.asarray(variances, dtype=float)
    if r.ndim != 1 or r.shape != v.shape:
        raise ValueError("returns and variances must be matching 1-D arrays")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v)) and np.all(v > 0)):
        raise ValueError("returns must be finite and variances positive")
    if len(dates) != r.size + 1:
        raise ValueError("need %d dates for %d returns" % (r.size + 1, r.size))
    if not (start_price > 0 and math.isfinite(start_price)):
        raise ValueError("start_price must be positive and finite")

    closes = start_price * np.exp(np.cumsum(r))
    opens = np.concatenate(([start_price], closes[:-1]))
    width = np.sqrt(2.0 * v + 2.0 * _GK_BODY_COEF * r * r)
    mid = np.sqrt(opens * closes)
    highs = np.maximum(mid * np.exp(0.5 * width), np.maximum(opens, closes))
    lows = np.minimum(mid * np.exp(-0.5 * width), np.minimum(opens, closes))

    p0 = float(start_price)
    bars = [OhlcBar(dates[0], p0, p0, p0, p0)]
    for t in range(r.size):
        bars.append(OhlcBar(dates[t + 1], float(opens[t]), float(highs[t]),
                            float(lows[t]), float(closes[t])))
    return tuple(bars)


def write_ohlc_csv(path, bars) -> None:
    """repr() prices and ISO dates so that reparsing is bit-exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(OHLC_COLUMNS)
        for b in bars:
            writer.writerow([b.date.isoformat(), repr(b.open), repr(b.high),
                             repr(b.low), repr(b.close)])


def export_ohlc_dir(out_dir, tickers, returns, variances,
                    start="2016-01-04", start_price=100.0) -> dict:
    """Write one OHLC file per ticker; returns {ticker: path}.

    returns and variances are n_tickers x n_periods; all tickers share one
    weekday calendar so a reload joins with zero drops.
    """
    ret = np.asarray(returns, dtype=float)
    var = np.asarray(variances, dtype=float)
    if ret.ndim != 2 or ret.shape != var.shape:
        raise ValueError("returns and variances must be matching 2-D arrays")
    if len(tickers) != ret.shape[0]:
        raise ValueError("one ticker per row")
    for t in tickers:
        if not t or not str(t).replace("_", "").replace("-", "").isalnum():
            raise ValueError("ticker %r is not a usable filename" % (t,))
    if len(set(tickers)) != len(tickers):
        raise ValueError("tickers must be distinct")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    dates = trading_dates(start, ret.shape[1] + 1)
    paths = {}
    for i, t in enumerate(tickers):
        bars = ohlc_bars_from_returns(ret[i], var[i], dates, start_price)
        p = root / ("%s.csv" % t)
        write_ohlc_csv(p, bars)
        paths[str(t)] = str(p)
    return paths
