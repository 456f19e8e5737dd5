"""Seeded experiment drivers emitting JSON summaries and plot-ready CSV.

Each experiment id reruns one of the package's standard studies:

  stocks_vs_index        per-stock vs index Hurst histograms on synthetic
                         panels
  index_vs_factor_H      estimated index Hurst against the factor Hurst it
                         was generated with
  convergence_in_N       index and calibrated factor Hurst as the panel
                         width N grows
  idio_recovery          histograms of recovered idiosyncratic Hurst
                         exponents
  empirical_factor_vs_Ns factor Hurst from random ticker subsets of an
                         OHLC directory, against the subset size
  empirical_idio         idiosyncratic Hurst distribution from an OHLC
                         directory, proxy and external factor modes

Desk-scale defaults keep a full run in the minutes range; the paper_scale
override restores the heavyweight grids (2^15 periods at 2^8 subdivisions)
and is hours of compute.  Results are reproducible from (spec, seed): every
random draw is keyed by the spec seed plus structural indices, so thread
counts and completion order cannot change a bundle.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import DataError, load_ohlc_dir
from .gmm import GmmConfig, feasible_q, fit_hurst, fit_hurst_multi_lagset
from .pipeline import (
    FactorSource,
    _scrub_nonfinite,
    estimate_beta,
    factor_qv_proxy,
    run_calibration,
    run_calibration_from_daily,
)
from .simulate import IndexSpec, NestedModelSpec, build_index, sample_beta_sigma, simulate_panel
from .theory import SfbmParams
from .volatility import gaussianize, realized_qv

EXPERIMENT_IDS = (
    "stocks_vs_index",
    "index_vs_factor_H",
    "convergence_in_N",
    "idio_recovery",
    "empirical_factor_vs_Ns",
    "empirical_idio",
)

_SCALES = {
    False: {"label": "desk", "n_periods": 2 ** 13, "subdivisions": 2 ** 6,
            "max_stocks": 128, "lag_trials": 5},
    True: {"label": "paper", "n_periods": 2 ** 15, "subdivisions": 2 ** 8,
           "max_stocks": 512, "lag_trials": 20},
}
_MAX_DRAWS = 200
SCHEMA_VERSION = 1


def _as_bool(key, x):
    if isinstance(x, bool):
        return x
    raise ValueError("override %s must be a boolean, got %r" % (key, x))


def _as_int(key, x):
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
        raise ValueError("override %s must be an integer, got %r" % (key, x))
    return int(x)


def _as_float(key, x):
    if isinstance(x, bool) or not isinstance(x, (int, float, np.integer, np.floating)):
        raise ValueError("override %s must be a number, got %r" % (key, x))
    return float(x)


def _as_str(key, x):
    if not isinstance(x, str):
        raise ValueError("override %s must be a string, got %r" % (key, x))
    return x


def _list_of(cast):
    def inner(key, x):
        if not isinstance(x, (list, tuple)) or len(x) == 0:
            raise ValueError("override %s must be a non-empty list, got %r" % (key, x))
        return tuple(cast(key, v) for v in x)
    return inner


_as_int_list = _list_of(_as_int)
_as_float_list = _list_of(_as_float)


def _scaled(key):
    return lambda sc: sc[key]


_SYNTH_COMMON = {
    "paper_scale": (_as_bool, False),
    "n_periods": (_as_int, _scaled("n_periods")),
    "subdivisions": (_as_int, _scaled("subdivisions")),
    "horizon_periods": (_as_int, 0),
    "n_draws": (_as_int, 20),
    "threads": (_as_int, 0),
    "lags_q": (_as_int, 32),
}

_EMPIRICAL_COMMON = {
    "paper_scale": (_as_bool, False),
    "threads": (_as_int, 0),
    "data_dir": (_as_str, ""),
    "start": (_as_str, ""),
    "end": (_as_str, ""),
    "index_ticker": (_as_str, "INDEX"),
}

_SCHEMAS = {
    "stocks_vs_index": {
        **_SYNTH_COMMON,
        "n_draws": (_as_int, lambda sc: 20 if sc["label"] == "desk" else 50),
        "n_stocks": (_as_int, 100),
        "h": (_as_float, 0.11),
        "h_idio": (_as_float, 0.01),
        "lam_sq": (_as_float, 0.0025),
        "lam_i_sq": (_as_float, 0.0025),
        "gamma": (_as_float, 0.2),
    },
    "index_vs_factor_H": {
        **_SYNTH_COMMON,
        "n_stocks": (_as_int, lambda sc: 64 if sc["label"] == "desk" else 200),
        "h_grid": (_as_float_list, (0.05, 0.08, 0.11, 0.14, 0.18, 0.22, 0.26, 0.30)),
        "h_idio": (_as_float, 0.01),
        "lam_sq": (_as_float, 0.001),
        "lam_i_sq": (_as_float, 0.001),
        "gamma": (_as_float, 0.01),
    },
    "convergence_in_N": {
        **_SYNTH_COMMON,
        "n_grid": (_as_int_list, (4, 8, 16, 32, 64, 128)),
        "h_list": (_as_float_list, (0.08, 0.11)),
        "h_idio": (_as_float, 0.01),
        "lam_sq": (_as_float, 0.001),
        "lam_i_sq": (_as_float, 0.001),
        "gamma": (_as_float, 0.01),
    },
    "idio_recovery": {
        **_SYNTH_COMMON,
        "n_draws": (_as_int, 1),
        "n_stocks": (_as_int, lambda sc: 64 if sc["label"] == "desk" else 300),
        "h": (_as_float, 0.1),
        "h_idio_list": (_as_float_list, (0.03, 0.07)),
        "lam_sq": (_as_float, 0.01),
        "lam_i_sq": (_as_float, 0.01),
        "gamma": (_as_float, 0.1),
    },
    "empirical_factor_vs_Ns": {
        **_EMPIRICAL_COMMON,
        "ns_grid": (_as_int_list, (4, 8, 16, 32, 64, 128)),
        "n_combos": (_as_int, 20),
        "lag_trials": (_as_int, _scaled("lag_trials")),
        "q_low": (_as_int, 28),
        "q_high": (_as_int, 40),
    },
    "empirical_idio": {
        **_EMPIRICAL_COMMON,
        "lags_q": (_as_int, 32),
    },
}


def _check_bounds(experiment, p, scale):
    def need(cond, msg):
        if not cond:
            raise ValueError(msg)

    label = scale["label"]
    if "n_periods" in p:
        cap = scale["n_periods"]
        need(4 <= p["n_periods"] <= cap,
             "n_periods=%d violates the %s-scale bound %d%s"
             % (p["n_periods"], label, cap,
                "" if label == "paper" else " (set paper_scale = true for %d)"
                % _SCALES[True]["n_periods"]))
        cap = scale["subdivisions"]
        need(1 <= p["subdivisions"] <= cap,
             "subdivisions=%d violates the %s-scale bound %d"
             % (p["subdivisions"], label, cap))
        need(0 <= p["horizon_periods"] <= p["n_periods"],
             "horizon_periods=%d must lie in [0, n_periods=%d]"
             % (p["horizon_periods"], p["n_periods"]))
        need(1 <= p["n_draws"] <= _MAX_DRAWS,
             "n_draws=%d violates the bound %d" % (p["n_draws"], _MAX_DRAWS))
        need(8 <= p["lags_q"] <= 48,
             "lags_q=%d must lie in [8, 48]" % p["lags_q"])
    cap = scale["max_stocks"]
    for n in (p.get("n_stocks"),) if "n_stocks" in p else ():
        need(3 <= n <= cap,
             "n_stocks=%d violates the %s-scale bound %d" % (n, label, cap))
    for n in p.get("n_grid", ()):
        need(3 <= n <= cap,
             "n_grid entry %d violates the %s-scale bound %d" % (n, label, cap))
    for key in ("h", "h_idio"):
        if key in p:
            need(0.0 < p[key] < 0.5, "%s=%g must lie in (0, 0.5)" % (key, p[key]))
    for key in ("h_grid", "h_list", "h_idio_list"):
        for h in p.get(key, ()):
            need(0.0 < h < 0.5, "%s entry %g must lie in (0, 0.5)" % (key, h))
    for key in ("lam_sq", "lam_i_sq"):
        if key in p:
            need(p[key] > 0.0, "%s must be positive" % key)
    if "n_combos" in p:
        need(1 <= p["n_combos"] <= 100, "n_combos=%d violates the bound 100" % p["n_combos"])
        need(1 <= p["lag_trials"] <= 40,
             "lag_trials=%d violates the bound 40" % p["lag_trials"])
        need(8 <= p["q_low"] <= p["q_high"] <= 48,
             "lag exponents must satisfy 8 <= q_low <= q_high <= 48, got [%d, %d]"
             % (p["q_low"], p["q_high"]))
    if "lags_q" in p:
        need(8 <= p["lags_q"] <= 48, "lags_q=%d must lie in [8, 48]" % p["lags_q"])


def _resolve(experiment, overrides):
    schema = _SCHEMAS[experiment]
    unknown = sorted(set(overrides) - set(schema))
    if unknown:
        raise ValueError(
            "unknown override %s for %s; allowed keys: %s"
            % (", ".join(unknown), experiment, ", ".join(sorted(schema)))
        )
    paper = _as_bool("paper_scale", overrides.get("paper_scale", False))
    scale = _SCALES[paper]
    params = {}
    for key, (cast, default) in schema.items():
        if key in overrides:
            params[key] = cast(key, overrides[key])
        else:
            params[key] = default(scale) if callable(default) else default
    _check_bounds(experiment, params, scale)
    return params


@dataclass(frozen=True)
class ExperimentSpec:
    """One reproducible experiment run: id, overrides, seed, output dir.

    Overrides are validated against the experiment's schema at
    construction; the resolved parameter set (defaults filled in, bounds
    checked) is available as .params.
    """

    experiment: str
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_IDS:
            raise ValueError(
                "unknown experiment %r; choose from %s"
                % (self.experiment, ", ".join(EXPERIMENT_IDS))
            )
        if not isinstance(self.overrides, dict):
            raise ValueError("overrides must be a dict")
        params = _resolve(self.experiment, self.overrides)
        object.__setattr__(self, "overrides", dict(self.overrides))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "params", params)


def resolve_threads(requested=0) -> int:
    """Positive request wins; else NESTED_SFBM_THREADS; else 1."""
    if requested and requested > 0:
        return int(requested)
    env = os.environ.get("NESTED_SFBM_THREADS", "").strip()
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ValueError("NESTED_SFBM_THREADS must be an integer, got %r" % env) from None


def _map_keyed(fn, keys, threads):
    """Apply fn over keys, optionally on a thread pool; output order follows
    keys, never completion order."""
    keys = list(keys)
    if threads > 1 and len(keys) > 1:
        out = {}
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futures = {ex.submit(fn, k): k for k in keys}
            for fut in as_completed(futures):
                out[futures[fut]] = fut.result()
    else:
        out = {k: fn(k) for k in keys}
    return [out[k] for k in keys]


def _finite(values):
    return np.asarray([v for v in values if v is not None and math.isfinite(v)], float)


def _stats(values) -> dict:
    values = list(values)
    v = _finite(values)
    if v.size == 0:
        return {"n": 0, "n_failed": len(values), "mean": math.nan,
                "median": math.nan, "sd": math.nan}
    return {
        "n": int(v.size),
        "n_failed": int(len(values) - v.size),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
    }


def _mean_ci(values):
    v = _finite(values)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return m, m - 1.96 * se, m + 1.96 * se

def _hist_rows(values, bins=12):
    v = _finite(values)
    if v.size == 0:
        return []
    counts, edges = np.histogram(v, bins=bins)
    return [
        (float(0.5 * (edges[k] + edges[k + 1])), float(counts[k]),
         float(counts[k]), float(counts[k]))
        for k in range(counts.size)
    ]


def _tag(x):
    return ("%g" % x).replace(".", "p").replace("-", "m")


def _model_spec(p, h, h_idio, betas) -> NestedModelSpec:
    n = len(betas)
    length = p["n_periods"]
    horizon = float(p["horizon_periods"] or length)
    return NestedModelSpec(
        n_stocks=n,
        betas=tuple(betas),
        sigmas=(1.0,) * n,
        gammas=(p["gamma"],) * n,
        factor_mode=SfbmParams(h, p["lam_sq"], horizon),
        idio_modes=(SfbmParams(h_idio, p["lam_i_sq"], horizon),) * n,
        n_periods=length,
        subdivisions=p["subdivisions"],
        allow_long_sample=horizon < length,
    )


def index_hurst(panel, members=None, q=32):
    """GMM Hurst fit of the equal-weight basket over the given members."""
    if members is None:
        members = tuple(range(panel.n_stocks))
    members = tuple(members)
    idx = build_index(panel, IndexSpec(members=members,
                                       weights=(1.0 / len(members),) * len(members)))
    qv = realized_qv(panel, idx)
    gauss = gaussianize(np.log(qv.values), source=qv)
    cfg = GmmConfig(q=feasible_q(len(qv), q))
    return fit_hurst(gauss.values * gauss.input_std, cfg, qv.delta)


def _run_stocks_vs_index(seed, p):
    threads = resolve_threads(p["threads"])
    gmm = GmmConfig(q=p["lags_q"])

    def one(d):
        betas, _ = sample_beta_sigma(p["n_stocks"], seed=(seed, 71, d))
        panel = simulate_panel(_model_spec(p, p["h"], p["h_idio"], betas), (seed, 11, d))
        report = run_calibration(panel, gmm=gmm)
        idx = index_hurst(panel, q=p["lags_q"])
        return (idx.hurst_hat,
                tuple(f.hurst_hat for f in report.idio_fits),
                report.factor_fit.hurst_hat)

    outs = _map_keyed(one, range(p["n_draws"]), threads)
    index_h = [o[0] for o in outs]
    stock_h = [h for o in outs for h in o[1]]
    factor_h = [o[2] for o in outs]
    results = {
        "h": p["h"],
        "h_idio": p["h_idio"],
        "index": _stats(index_h),
        "stocks": _stats(stock_h),
        "factor": _stats(factor_h),
    }
    tables = {
        "index_hist.csv": _hist_rows(index_h),
        "stock_hist.csv": _hist_rows(stock_h),
    }
    return results, tables, [], {}


def _run_index_vs_factor_h(seed, p):
    threads = resolve_threads(p["threads"])

    def one(key):
        j, d = key
        h = p["h_grid"][j]
        betas, _ = sample_beta_sigma(p["n_stocks"], seed=(seed, 71, j, d))
        panel = simulate_panel(_model_spec(p, h, p["h_idio"], betas), (seed, 11, j, d))
        return index_hurst(panel, q=p["lags_q"]).hurst_hat

    keys = [(j, d) for j in range(len(p["h_grid"])) for d in range(p["n_draws"])]
    outs = dict(zip(keys, _map_keyed(one, keys, threads)))
    rows, points = [], []
    for j, h in enumerate(p["h_grid"]):
        ests = [outs[(j, d)] for d in range(p["n_draws"])]
        mean, lo, hi = _mean_ci(ests)
        rows.append((float(h), mean, lo, hi))
        points.append({"h": float(h), "mean": mean, "ci_low": lo, "ci_high": hi,
                       "n": len(ests)})
    gaps = [abs(pt["mean"] - pt["h"]) for pt in points if math.isfinite(pt["mean"])]
    results = {"points": points,
               "max_abs_gap": max(gaps) if gaps else math.nan}
    return results, {"index_vs_h.csv": rows}, [], {}


def _run_convergence_in_n(seed, p):
    threads = resolve_threads(p["threads"])
    gmm = GmmConfig(q=p["lags_q"])

    def one(key):
        i, j, d = key
        h, n = p["h_list"][i], p["n_grid"][j]
        betas, _ = sample_beta_sigma(n, seed=(seed, 71, i, j, d))
        panel = simulate_panel(_model_spec(p, h, p["h_idio"], betas), (seed, 11, i, j, d))
        report = run_calibration(panel, gmm=gmm)
        idx = index_hurst(panel, q=p["lags_q"])
        return idx.hurst_hat, report.factor_fit.hurst_hat

    keys = [(i, j, d)
            for i in range(len(p["h_list"]))
            for j in range(len(p["n_grid"]))
            for d in range(p["n_draws"])]
    outs = dict(zip(keys, _map_keyed(one, keys, threads)))
    results, tables = [], {}
    for i, h in enumerate(p["h_list"]):
        idx_rows, fac_rows, points = [], [], []
        for j, n in enumerate(p["n_grid"]):
            idx_ests = [outs[(i, j, d)][0] for d in range(p["n_draws"])]
            fac_ests = [outs[(i, j, d)][1] for d in range(p["n_draws"])]
            im, ilo, ihi = _mean_ci(idx_ests)
            fm, flo, fhi = _mean_ci(fac_ests)
            idx_rows.append((float(n), im, ilo, ihi))
            fac_rows.append((float(n), fm, flo, fhi))
            points.append({"n": int(n),
                           "index_mean": im, "index_ci": [ilo, ihi],
                           "factor_mean": fm, "factor_ci": [flo, fhi]})
        results.append({"h": float(h), "points": points})
        tables["index_vs_N_%s.csv" % _tag(h)] = idx_rows
        tables["factor_vs_N_%s.csv" % _tag(h)] = fac_rows
    return {"curves": results}, tables, [], {}


def _run_idio_recovery(seed, p):
    threads = resolve_threads(p["threads"])
    gmm = GmmConfig(q=p["lags_q"])

    def one(key):
        i, d = key
        betas, _ = sample_beta_sigma(p["n_stocks"], seed=(seed, 71, i, d))
        panel = simulate_panel(_model_spec(p, p["h"], p["h_idio_list"][i], betas),
                               (seed, 11, i, d))
        report = run_calibration(panel, gmm=gmm)
        return tuple(f.hurst_hat for f in report.idio_fits)

    keys = [(i, d) for i in range(len(p["h_idio_list"])) for d in range(p["n_draws"])]
    outs = dict(zip(keys, _map_keyed(one, keys, threads)))
    results, tables = [], {}
    for i, h_idio in enumerate(p["h_idio_list"]):
        pooled = [h for d in range(p["n_draws"]) for h in outs[(i, d)]]
        entry = {"h_idio": float(h_idio)}
        entry.update(_stats(pooled))
        results.append(entry)
        tables["idio_hist_%s.csv" % _tag(h_idio)] = _hist_rows(pooled)
    return {"curves": results}, tables, [], {}


def _load_empirical(p):
    if not p["data_dir"]:
        raise DataError("empirical experiments need a data_dir override")
    return load_ohlc_dir(p["data_dir"], p["start"] or None, p["end"] or None)


def _log_vol_input(qv):
    gauss = gaussianize(np.log(qv.values), source=qv)
    return gauss.values * gauss.input_std


def _run_empirical_factor_vs_ns(seed, p):
    threads = resolve_threads(p["threads"])
    panel = _load_empirical(p)
    warnings, notes = [], {}
    pool = [i for i, t in enumerate(panel.tickers) if t != p["index_ticker"]]
    q_cap = feasible_q(panel.n_periods, p["q_high"])
    q_hi = min(p["q_high"], q_cap)
    q_lo = min(p["q_low"], q_hi)
    if (q_lo, q_hi) != (p["q_low"], p["q_high"]):
        notes["q_bounds_clamped"] = ("only %d periods; lag exponents clamped to [%d, %d]"
                                     % (panel.n_periods, q_lo, q_hi))
    notes["lag_trials"] = p["lag_trials"]
    if p["lag_trials"] < 20:
        notes["lag_trials_label"] = ("inner lag-set loop shrunk to %d at desk scale"
                                     % p["lag_trials"])

    sizes = []
    for ns in p["ns_grid"]:
        used = min(ns, len(pool))
        if used < ns:
            warnings.append("N_s=%d exceeds the %d available tickers; using %d"
                            % (ns, len(pool), used))
        if used < 3:
            warnings.append("N_s=%d skipped: fewer than 3 usable tickers" % ns)
            continue
        sizes.append((ns, used))

    def one(key):
        j, c = key
        ns, used = sizes[j]
        rng = np.random.default_rng((seed, 5, ns, c))
        members = sorted(rng.choice(len(pool), size=used, replace=False).tolist())
        rows = [pool[m] for m in members]
        beta = estimate_beta(panel.returns[rows])
        fq = factor_qv_proxy([panel.gk[i] for i in rows], beta)
        fit = fit_hurst_multi_lagset(
            _log_vol_input(fq), delta=1.0, n_trials=p["lag_trials"],
            q_bounds=(q_lo, q_hi), seed=(seed, 6, ns, c),
        )
        return fit.hurst_mean

    keys = [(j, c) for j in range(len(sizes)) for c in range(p["n_combos"])]
    outs = dict(zip(keys, _map_keyed(one, keys, threads)))
    rows, points = [], []
    for j, (ns, used) in enumerate(sizes):
        means = [outs[(j, c)] for c in range(p["n_combos"])]
        mean, lo, hi = _mean_ci(means)
        rows.append((float(ns), mean, lo, hi))
        points.append({"ns": int(ns), "ns_used": int(used), "mean": mean,
                       "ci_low": lo, "ci_high": hi, "n_combos": p["n_combos"]})

    results = {"points": points, "index_hurst": None}
    if p["index_ticker"] in panel.tickers:
        i = panel.tickers.index(p["index_ticker"])
        fit = fit_hurst_multi_lagset(
            _log_vol_input(panel.gk[i]), delta=1.0, n_trials=p["lag_trials"],
            q_bounds=(q_lo, q_hi), seed=(seed, 6, 0, 0),
        )
        results["index_hurst"] = fit.hurst_mean
    else:
        warnings.append("index ticker %r not in the data; no reference line"
                        % p["index_ticker"])
    return results, {"factor_vs_ns.csv": rows}, warnings, notes


def _run_empirical_idio(seed, p):
    threads = resolve_threads(p["threads"])
    panel = _load_empirical(p)
    warnings = []
    stock_rows = [i for i, t in enumerate(panel.tickers) if t != p["index_ticker"]]
    if len(stock_rows) < 3:
        raise DataError("need at least 3 stock tickers besides the index")
    daily = panel.returns[stock_rows]
    qvs = [panel.gk[i] for i in stock_rows]
    gmm = GmmConfig(q=p["lags_q"])

    def idio_stats(report):
        hs = [f.hurst_hat for f in report.idio_fits]
        out = _stats(hs)
        out["factor_hurst"] = report.factor_fit.hurst_hat
        out["n_flagged"] = sum(1 for f in report.idio_fits if f.flags)
        return out, hs

    proxy_report = run_calibration_from_daily(daily, qvs, gmm=gmm, n_threads=threads)
    proxy_stats, proxy_h = idio_stats(proxy_report)
    results = {"modes": {"proxy": proxy_stats, "external": None},
               "proxy_vs_index_corr": None}
    tables = {"idio_hist_proxy.csv": _hist_rows(proxy_h)}

    if p["index_ticker"] in panel.tickers:
        i = panel.tickers.index(p["index_ticker"])
        index_qv = panel.gk[i]
        ext_report = run_calibration_from_daily(
            daily, qvs, FactorSource(mode="external", series=index_qv),
            gmm=gmm, n_threads=threads,
        )
        ext_stats, ext_h = idio_stats(ext_report)
        results["modes"]["external"] = ext_stats
        tables["idio_hist_external.csv"] = _hist_rows(ext_h)
        proxy_qv = factor_qv_proxy(qvs, proxy_report.beta_hat)
        corr = np.corrcoef(np.log(proxy_qv.values), np.log(index_qv.values))[0, 1]
        results["proxy_vs_index_corr"] = float(corr)
    else:
        warnings.append("index ticker %r not in the data; external mode skipped"
                        % p["index_ticker"])
    return results, tables, warnings, {}


_RUNNERS = {
    "stocks_vs_index": _run_stocks_vs_index,
    "index_vs_factor_H": _run_index_vs_factor_h,
    "convergence_in_N": _run_convergence_in_n,
    "idio_recovery": _run_idio_recovery,
    "empirical_factor_vs_Ns": _run_empirical_factor_vs_ns,
    "empirical_idio": _run_empirical_idio,
}

_XY_HEADER = ("x", "y", "y_lo", "y_hi")


def _write_xy_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(_XY_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run one experiment and return its bundle.

    The bundle embeds the spec, seed, resolved parameters and code version
    and is byte-for-byte reproducible: it carries no timestamps, and worker
    threads only change wall time.  With spec.out_dir set, the bundle is
    written as summary.json next to one plot-ready CSV per figure panel
    (columns x, y, y_lo, y_hi).
    """
    from . import __version__

    results, tables, warnings, notes = _RUNNERS[spec.experiment](spec.seed, spec.params)
    bundle = _scrub_nonfinite({
        "schema_version": SCHEMA_VERSION,
        "experiment": spec.experiment,
        "seed": spec.seed,
        "code_version": __version__,
        "scale": "paper" if spec.params.get("paper_scale") else "desk",
        "parameters": spec.params,
        "results": results,
        "warnings": list(warnings),
        "notes": notes,
        "files": sorted(tables),
        "tables": {name: [list(map(float, r)) for r in rows]
                   for name, rows in sorted(tables.items())},
    })
    if spec.out_dir:
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            _write_xy_csv(out / name, rows)
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(bundle, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    return bundle
