"""Tests for OHLC ingestion and the synthetic export round trip."""

from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nested_sfbm.data_io import (
    DataError,
    OhlcFile,
    OhlcPanel,
    export_ohlc_dir,
    load_ohlc_dir,
    ohlc_bars_from_returns,
    read_ohlc_csv,
    trading_dates,
    write_ohlc_csv,
)
from nested_sfbm.volatility import OhlcBar, garman_klass


def write_rows(path, rows, header="date,open,high,low,close"):
    lines = [header] + rows
    path.write_text("\n".join(lines) + "\n")


def flat_rows(dates, price=100.0):
    p = repr(float(price))
    return ["%s,%s,%s,%s,%s" % (d, p, p, p, p) for d in dates]


class TestReadOhlcCsv:
    def test_parses_clean_file(self, tmp_path):
        p = tmp_path / "ab.csv"
        write_rows(p, ["2020-01-02,100.0,104.0,98.0,101.0",
                       "2020-01-03,101.0,103.0,99.0,102.0"])
        f = read_ohlc_csv(p)
        assert f.ticker == "ab"
        assert f.dates() == (date(2020, 1, 2), date(2020, 1, 3))
        assert f.errors == ()

    def test_extra_columns_and_case_ignored(self, tmp_path):
        p = tmp_path / "x.csv"
        write_rows(p, ["2020-01-02,100.0,104.0,98.0,101.0,55100"],
                   header="Date,Open,High,Low,Close,Volume")
        assert len(read_ohlc_csv(p).bars) == 1

    def test_missing_header_column_raises(self, tmp_path):
        p = tmp_path / "x.csv"
        write_rows(p, ["2020-01-02,100.0,104.0,98.0"],
                   header="date,open,high,low")
        with pytest.raises(DataError, match="header must contain"):
            read_ohlc_csv(p)

    def test_empty_file_raises(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("")
        with pytest.raises(DataError, match="empty file"):
            read_ohlc_csv(p)

    @pytest.mark.parametrize(
        "row",
        [
            "not-a-date,100.0,104.0,98.0,101.0",
            "2020-01-03,100.0,104.0,-98.0,101.0",   # negative price
            "2020-01-03,100.0,99.0,98.0,98.5",      # high below open
            "2020-01-03,100.0,104.0",               # short row
            "2020-01-03,100.0,abc,98.0,101.0",
        ],
    )
    def test_malformed_rows_logged_and_skipped(self, tmp_path, row):
        p = tmp_path / "x.csv"
        write_rows(p, ["2020-01-02,100.0,104.0,98.0,101.0", row,
                       "2020-01-06,101.0,103.0,99.0,102.0"])
        f = read_ohlc_csv(p)
        assert len(f.bars) == 2
        assert len(f.errors) == 1
        assert f.errors[0].startswith("line 3:")

    def test_non_advancing_date_logged_and_skipped(self, tmp_path):
        p = tmp_path / "x.csv"
        write_rows(p, ["2020-01-03,100.0,104.0,98.0,101.0",
                       "2020-01-03,101.0,103.0,99.0,102.0",
                       "2020-01-02,101.0,103.0,99.0,102.0",
                       "2020-01-06,101.0,103.0,99.0,102.0"])
        f = read_ohlc_csv(p)
        assert f.dates() == (date(2020, 1, 3), date(2020, 1, 6))
        assert len(f.errors) == 2
        assert all("does not advance" in e for e in f.errors)

    def test_explicit_ticker_overrides_stem(self, tmp_path):
        p = tmp_path / "x.csv"
        write_rows(p, ["2020-01-02,100.0,104.0,98.0,101.0"])
        assert read_ohlc_csv(p, ticker="YY").ticker == "YY"


class TestOhlcFileValidation:
    def test_rejects_non_increasing_dates(self):
        b1 = OhlcBar(date(2020, 1, 3), 100.0, 101.0, 99.0, 100.5)
        b2 = OhlcBar(date(2020, 1, 2), 100.0, 101.0, 99.0, 100.5)
        with pytest.raises(ValueError, match="strictly increasing"):
            OhlcFile(ticker="t", path="t.csv", bars=(b1, b2))


class TestLoadOhlcDir:
    def setup_panel(self, tmp_path, n_files=3, n_days=10):
        dates = trading_dates("2020-01-02", n_days)
        for i in range(n_files):
            rows = ["%s,100.0,10%d.0,99.0,100.%d" % (d, 1 + i, 1 + i)
                    for d in dates]
            write_rows(tmp_path / ("t%d.csv" % i), rows)
        return dates

    def test_full_alignment_zero_drops(self, tmp_path):
        dates = self.setup_panel(tmp_path)
        panel = load_ohlc_dir(tmp_path)
        assert panel.tickers == ("t0", "t1", "t2")
        assert panel.excluded == ()
        assert panel.n_periods == len(dates) - 1
        assert panel.dates == dates[1:]
        # identical closes per ticker: every return is exactly zero
        assert np.all(panel.returns == 0.0)

    def test_gk_matches_direct_computation(self, tmp_path):
        self.setup_panel(tmp_path)
        panel = load_ohlc_dir(tmp_path)
        f = panel.files[0]
        direct = garman_klass(f.bars[1:], delta=1.0)
        assert np.array_equal(panel.gk[0].values, direct.values)

    def test_sparse_ticker_excluded_and_listed(self, tmp_path):
        dates = self.setup_panel(tmp_path, n_files=3, n_days=40)
        # a fourth ticker missing 10% of the calendar
        keep = [d for i, d in enumerate(dates) if i % 10 != 0]
        write_rows(tmp_path / "t3.csv", flat_rows(keep))
        panel = load_ohlc_dir(tmp_path)
        assert panel.tickers == ("t0", "t1", "t2")
        assert len(panel.excluded) == 1
        ticker, reason = panel.excluded[0]
        assert ticker == "t3"
        assert "missing 10.0% of 40 sessions" in reason

    def test_bad_header_file_excluded_not_fatal(self, tmp_path):
        self.setup_panel(tmp_path, n_files=3)
        write_rows(tmp_path / "bad.csv", ["2020-01-02,1.0"], header="a,b")
        panel = load_ohlc_dir(tmp_path)
        assert panel.n_tickers == 3
        assert panel.excluded[0][0] == "bad"
        assert "header" in panel.excluded[0][1]

    def test_too_few_parsable_files_raises(self, tmp_path):
        self.setup_panel(tmp_path, n_files=2)
        with pytest.raises(DataError, match="at least 3 parsable"):
            load_ohlc_dir(tmp_path)

    def test_min_files_override(self, tmp_path):
        self.setup_panel(tmp_path, n_files=2)
        assert load_ohlc_dir(tmp_path, min_files=2).n_tickers == 2

    def test_too_many_exclusions_raises(self, tmp_path):
        dates = trading_dates("2020-01-02", 40)
        write_rows(tmp_path / "a.csv", flat_rows(dates))
        for name in ("b", "c"):
            keep = [d for i, d in enumerate(dates) if i % 10 != 0]
            write_rows(tmp_path / ("%s.csv" % name), flat_rows(keep))
        with pytest.raises(DataError, match="only 1 usable tickers"):
            load_ohlc_dir(tmp_path)

    def test_date_range_filter(self, tmp_path):
        dates = self.setup_panel(tmp_path, n_days=20)
        panel = load_ohlc_dir(tmp_path, start=dates[5], end=dates[14])
        assert panel.dates[0] == dates[6]
        assert panel.dates[-1] == dates[14]
        assert panel.n_periods == 9

    def test_date_range_accepts_strings(self, tmp_path):
        dates = self.setup_panel(tmp_path, n_days=20)
        panel = load_ohlc_dir(tmp_path, start=str(dates[5]), end=str(dates[14]))
        assert panel.n_periods == 9

    def test_empty_directory_raises(self, tmp_path):
        with pytest.raises(DataError, match="no CSV files"):
            load_ohlc_dir(tmp_path)

    def test_missing_directory_raises(self, tmp_path):
        with pytest.raises(DataError, match="not a directory"):
            load_ohlc_dir(tmp_path / "nope")

    def test_calendar_gap_spanned_by_one_return(self, tmp_path):
        dates = trading_dates("2020-01-02", 30)
        # t0 and t1 share the full calendar except one mid-table session
        # (3.3% missing, under the cap); a third full ticker keeps the
        # parsable-file count at three
        gap = [d for i, d in enumerate(dates) if i != 4]
        prices = [100.0 * (1.01 ** i) for i in range(len(gap))]
        for name in ("t0", "t1"):
            rows = ["%s,%r,%r,%r,%r" % (d, p, p * 1.01, p * 0.99, p)
                    for d, p in zip(gap, prices)]
            write_rows(tmp_path / ("%s.csv" % name), rows)
        write_rows(tmp_path / "t2.csv", flat_rows(dates))
        panel = load_ohlc_dir(tmp_path)
        assert panel.n_periods == len(gap) - 1
        assert panel.returns[0] == pytest.approx(np.log(1.01), rel=1e-12)


class TestTradingDates:
    def test_weekdays_only(self):
        dates = trading_dates("2020-01-01", 30)
        assert len(dates) == 30
        assert all(d.weekday() < 5 for d in dates)

    def test_starts_at_first_weekday(self):
        # 2020-01-04 is a Saturday
        assert trading_dates("2020-01-04", 1)[0] == date(2020, 1, 6)

    def test_consecutive(self):
        dates = trading_dates("2020-01-06", 10)
        # Monday start, two full weeks: one weekend jump in nine gaps
        gaps = [(b - a).days for a, b in zip(dates, dates[1:])]
        assert gaps.count(3) == 1 and gaps.count(1) == 8


class TestRoundTrip:
    # the bracket collapses onto open/close once the width falls below
    # the body, i.e. when 2 v < (1 - 2 (2 ln 2 - 1)) r^2
    CLAMP_COEF = 1.0 - 2.0 * (2.0 * np.log(2.0) - 1.0)

    def test_gk_reloads_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        r = 0.005 * rng.standard_normal(200)
        v = 1e-4 * np.exp(0.3 * rng.standard_normal(200))
        assert np.all(2.0 * v > self.CLAMP_COEF * r * r)  # nothing clamps
        dates = trading_dates("2020-01-02", 201)
        bars = ohlc_bars_from_returns(r, v, dates)
        write_ohlc_csv(tmp_path / "t.csv", bars)
        f = read_ohlc_csv(tmp_path / "t.csv")
        assert f.errors == ()
        gk = garman_klass(f.bars[1:], delta=1.0)
        # text round trip moves no bits relative to the in-memory bars
        assert np.array_equal(gk.values, garman_klass(bars[1:], 1.0).values)
        assert gk.values == pytest.approx(v, rel=1e-12)
        closes = np.array([b.close for b in f.bars])
        assert np.diff(np.log(closes)) == pytest.approx(r, abs=1e-12)

    def test_export_then_load_full_panel(self, tmp_path):
        rng = np.random.default_rng(6)
        r = 0.005 * rng.standard_normal((4, 150))
        v = 2e-4 * np.exp(0.4 * rng.standard_normal((4, 150)))
        paths = export_ohlc_dir(tmp_path / "d", ["AA", "BB", "CC", "DD"], r, v)
        assert sorted(paths) == ["AA", "BB", "CC", "DD"]
        panel = load_ohlc_dir(tmp_path / "d")
        assert panel.tickers == ("AA", "BB", "CC", "DD")
        assert panel.excluded == ()
        assert panel.n_periods == 150
        for i in range(4):
            assert panel.gk[i].values == pytest.approx(v[i], rel=1e-12)
        assert panel.returns == pytest.approx(r, abs=1e-10)

    def test_oversized_return_clamps_but_stays_consistent(self, tmp_path):
        # r^2 far above the variance target: the bracket collapses onto
        # open/close and the written bar reports the clamp floor
        # (1/2 - (2 ln 2 - 1)) r^2 instead; reload is still exact
        r = np.array([0.0, 0.5, 0.0])
        v = np.array([1e-4, 1e-4, 1e-4])
        dates = trading_dates("2020-01-02", 4)
        bars = ohlc_bars_from_returns(r, v, dates)
        assert bars[2].high == max(bars[2].open, bars[2].close)
        write_ohlc_csv(tmp_path / "t.csv", bars)
        f = read_ohlc_csv(tmp_path / "t.csv")
        gk = garman_klass(f.bars[1:], delta=1.0)
        assert gk.values[0] == pytest.approx(v[0], rel=1e-12)
        assert gk.values[2] == pytest.approx(v[2], rel=1e-12)
        floor = 0.5 * self.CLAMP_COEF * r[1] ** 2
        assert gk.values[1] == pytest.approx(floor, rel=1e-12)
        assert np.array_equal(gk.values, garman_klass(bars[1:], 1.0).values)

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.floats(-0.05, 0.05), min_size=3, max_size=24),
        st.integers(0, 2**31 - 1),
    )
    def test_round_trip_property(self, returns, seed):
        r = np.asarray(returns)
        rng = np.random.default_rng(seed)
        v = 1e-3 * np.exp(rng.uniform(-1.0, 1.0, r.size))
        dates = trading_dates("2021-03-01", r.size + 1)
        bars = ohlc_bars_from_returns(r, v, dates)
        gk = garman_klass(bars[1:], delta=1.0)
        closes = np.array([b.close for b in bars])
        assert np.diff(np.log(closes)) == pytest.approx(r, abs=1e-12)
        # bars comfortably away from the clamp boundary must hit the
        # target; clamped ones report the floor 0.5 * CLAMP_COEF * r^2
        hit = self.CLAMP_COEF * r * r < 2.0 * v * (1.0 - 1e-9)
        assert gk.values[hit] == pytest.approx(v[hit], rel=1e-9)
        floor = 0.5 * self.CLAMP_COEF * r * r
        assert np.all(gk.values <= np.maximum(v, floor) * (1.0 + 1e-9))


class TestExportValidation:
    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="matching 2-D"):
            export_ohlc_dir(tmp_path, ["A"], np.zeros((1, 5)), np.ones((1, 4)))

    def test_nonpositive_variance(self, tmp_path):
        with pytest.raises(ValueError, match="variances positive"):
            export_ohlc_dir(tmp_path, ["A"], np.zeros((1, 5)), np.zeros((1, 5)))

    def test_bad_ticker_name(self, tmp_path):
        with pytest.raises(ValueError, match="usable filename"):
            export_ohlc_dir(tmp_path, ["a/b"], np.zeros((1, 5)), np.ones((1, 5)))
        with pytest.raises(ValueError, match="usable filename"):
            export_ohlc_dir(tmp_path, [""], np.zeros((1, 5)), np.ones((1, 5)))

    def test_duplicate_tickers(self, tmp_path):
        with pytest.raises(ValueError, match="distinct"):
            export_ohlc_dir(tmp_path, ["A", "A"],
                            np.zeros((2, 5)), np.ones((2, 5)))

    def test_ticker_count_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="one ticker per row"):
            export_ohlc_dir(tmp_path, ["A"], np.zeros((2, 5)), np.ones((2, 5)))

    def test_bad_date_count(self):
        with pytest.raises(ValueError, match="need 6 dates"):
            ohlc_bars_from_returns(np.zeros(5), np.ones(5),
                                   trading_dates("2020-01-02", 5))

    def test_bad_start_price(self):
        dates = trading_dates("2020-01-02", 4)
        with pytest.raises(ValueError, match="start_price"):
            ohlc_bars_from_returns(np.zeros(3), np.ones(3), dates,
                                   start_price=0.0)


class TestOhlcPanelValidation:
    def make(self, **kw):
        gk_args = dict(values=np.ones(2), delta=1.0, kind="garman_klass")
        from nested_sfbm.volatility import VolSeries
        args = dict(
            tickers=("a", "b"),
            dates=(date(2020, 1, 3), date(2020, 1, 6)),
            returns=np.zeros((2, 2)),
            gk=(VolSeries(**gk_args), VolSeries(**gk_args)),
            files=(),
        )
        args.update(kw)
        return OhlcPanel(**args)

    def test_valid(self):
        assert self.make().n_tickers == 2

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError, match="one return row"):
            self.make(returns=np.zeros((3, 2)))

    def test_column_count_mismatch(self):
        with pytest.raises(ValueError, match="one return column"):
            self.make(returns=np.zeros((2, 3)))

    def test_gk_count_mismatch(self):
        with pytest.raises(ValueError, match="one GK series"):
            self.make(gk=())

    def test_returns_read_only(self):
        p = self.make()
        with pytest.raises(ValueError):
            p.returns[0, 0] = 1.0
