"""Command-line front end.

Five subcommands: simulate (model config to a panel CSV), calibrate (panel
CSV or OHLC directory to a calibration report), theory (closed-form
evaluations from flags), experiment (experiment config to a result
bundle), gk (OHLC directory to a Garman-Klass CSV).

Config files are TOML (schema version 1).  A simulate config mirrors
spec_to_dict: top-level n_stocks/betas/sigmas/gammas/n_periods/
subdivisions plus [factor] and [idio] tables with hurst/intermittency_sq/
horizon; scalars broadcast across stocks.  A calibrate config holds an
[input] table (kind = "panel_csv" or "ohlc_dir", path, optional start/end/
subdivisions/delta) and optional gmm/regime settings.  An experiment
config names the experiment and carries an [overrides] table.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure
(the message names the calibration step when one is known).  The
NESTED_SFBM_THREADS environment variable supplies the --threads default.
"""

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
import toml

from .data_io import DataError, load_ohlc_dir
from .experiments import ExperimentSpec, EXPERIMENT_IDS, resolve_threads, run_experiment
from .gmm import GmmConfig
from .pipeline import (
    CalibrationError,
    FactorSource,
    run_calibration,
    run_calibration_from_daily,
)
from .simulate import (
    CONFIG_VERSION,
    ReturnsPanel,
    panel_to_csv,
    simulate_panel,
    spec_from_dict,
    spec_to_dict,
)
from .theory import (
    SfbmParams,
    c_upsilon,
    check_regime,
    g_h,
    g_tilde_h,
    small_intermittency_V,
    small_intermittency_W,
)
from .volatility import VolSeries


class ConfigError(Exception):
    """Bad or missing configuration: maps to exit code 2."""


def _load_toml(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config file %s does not exist" % p)
    try:
        doc = toml.load(p)
    except (toml.TomlDecodeError, OSError) as exc:
        raise ConfigError("cannot parse %s: %s" % (p, exc)) from exc
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("unsupported config version %r in %s" % (version, p))
    return doc


def _gmm_from_flags(args, doc=None) -> GmmConfig:
    q = args.lags_q
    if q is None and doc is not None:
        q = doc.get("gmm", {}).get("q")
    try:
        return GmmConfig(q=int(q)) if q is not None else GmmConfig()
    except (TypeError, ValueError) as exc:
        raise ConfigError("bad lag exponent: %s" % exc) from exc


def _factor_source(text) -> FactorSource:
    if text is None or text == "proxy":
        return FactorSource()
    if not text.startswith("external:"):
        raise ConfigError(
            "--factor-source must be 'proxy' or 'external:<csv>', got %r" % text
        )
    path = Path(text[len("external:"):])
    if not path.is_file():
        raise DataError("external factor series %s does not exist" % path)
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            cell = row[-1].strip()
            try:
                values.append(float(cell))
            except ValueError:
                if not values:
                    continue  # header line
                raise DataError("%s: non-numeric value %r" % (path, cell)) from None
    if len(values) < 2:
        raise DataError("%s holds %d values; need at least 2" % (path, len(values)))
    try:
        series = VolSeries(values=np.asarray(values), delta=1.0, kind="garman_klass")
    except ValueError as exc:
        raise DataError("%s: %s" % (path, exc)) from exc
    return FactorSource(mode="external", series=series)


def _read_panel_csv(path, subdivisions, delta) -> ReturnsPanel:
    p = Path(path)
    if not p.is_file():
        raise DataError("panel file %s does not exist" % p)
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "time" or header[1] != "f":
            raise DataError("%s: expected a header time,f,x_1,..." % p)
        n = len(header) - 2
        if n < 1:
            raise DataError("%s: no stock columns" % p)
        fac, stocks = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise DataError("%s line %d: %s" % (p, lineno, exc)) from None
            if len(vals) != n + 1:
                raise DataError("%s line %d: expected %d columns" % (p, lineno, n + 2))
            fac.append(vals[0])
            stocks.append(vals[1:])
    fine = np.asarray(stocks).T
    try:
        return ReturnsPanel(
            fine_returns=fine,
            factor_returns=np.asarray(fac),
            delta=delta,
            subdivisions=subdivisions,
            provenance="empirical",
        )
    except ValueError as exc:
        raise DataError("%s: %s" % (p, exc)) from exc


def _emit(args, text, filename):
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / filename
        target.write_text(text, encoding="utf-8")
        print(target)
    else:
        sys.stdout.write(text)


def _cmd_simulate(args):
    doc = _load_toml(args.config)
    try:
        spec = spec_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("bad model config: %s" % exc) from exc
    aggregation = doc.get("aggregation", "fine")
    if aggregation not in ("fine", "daily"):
        raise ConfigError("aggregation must be 'fine' or 'daily'")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    panel = simulate_panel(spec, seed)
    buf = io.StringIO()
    panel_to_csv(panel, buf, aggregation=aggregation)
    _emit(args, buf.getvalue(), "panel.csv")
    if args.out:
        meta = {"version": CONFIG_VERSION, "seed": seed, "spec": spec_to_dict(spec)}
        meta_path = Path(args.out) / "spec.json"
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
        print(meta_path)
    return 0


def _cmd_calibrate(args):
    doc = _load_toml(args.config)
    inp = doc.get("input")
    if not isinstance(inp, dict) or "kind" not in inp or "path" not in inp:
        raise ConfigError("config needs an [input] table with kind and path")
    gmm = _gmm_from_flags(args, doc)
    source = _factor_source(args.factor_source)
    threads = resolve_threads(args.threads or 0)
    regime_tau = doc.get("regime_tau")

    kind = inp["kind"]
    if kind == "ohlc_dir":
        panel = load_ohlc_dir(inp["path"], inp.get("start"), inp.get("end"))
        report = run_calibration_from_daily(
            panel.returns, panel.gk, source, gmm,
            regime_tau=regime_tau, n_threads=threads,
        )
        tickers = panel.tickers
    elif kind == "panel_csv":
        try:
            subdivisions = int(inp.get("subdivisions", 1))
            delta = float(inp.get("delta", 1.0))
        except (TypeError, ValueError) as exc:
            raise ConfigError("bad input table: %s" % exc) from exc
        panel = _read_panel_csv(inp["path"], subdivisions, delta)
        report = run_calibration(panel, source, gmm,
                                 regime_tau=regime_tau, n_threads=threads)
        tickers = None
    else:
        raise ConfigError("input kind must be 'ohlc_dir' or 'panel_csv', got %r" % kind)

    if args.format == "csv":
        buf = io.StringIO()
        report.stock_table_csv(buf, tickers=tickers)
        _emit(args, buf.getvalue(), "report.csv")
    else:
        doc = report.to_json_dict()
        if tickers is not None:
            doc["tickers"] = list(tickers)
        _emit(args, json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n",
              "report.json")
    return 0


def _mode_from_flag(key, vals):
    try:
        return SfbmParams(hurst=vals[0], intermittency_sq=vals[1], horizon=vals[2])
    except (IndexError, ValueError) as exc:
        raise ConfigError("bad %s mode: %s" % (key, exc)) from exc


def _cmd_theory(args):
    evaluations = []
    try:
        if args.gh:
            evaluations.append({"op": "g_h", "args": args.gh,
                                "value": g_h(*args.gh)})
        if args.gtilde:
            evaluations.append({"op": "g_tilde_h", "args": args.gtilde,
                                "value": g_tilde_h(*args.gtilde)})
        if args.cupsilon:
            h, lam_sq, horizon, delta, tau = args.cupsilon
            params = SfbmParams(hurst=h, intermittency_sq=lam_sq, horizon=horizon)
            evaluations.append({"op": "c_upsilon", "args": args.cupsilon,
                                "value": c_upsilon(params, delta, tau)})
        if args.w is not None or args.v is not None:
            if not args.mode:
                raise ConfigError("--w/--v need at least one --mode WEIGHT,H,LAMSQ,T")
            modes = [(m[0], _mode_from_flag("--mode", m[1:])) for m in args.mode]
            if args.w is not None:
                tau, delta = args.w
                evaluations.append({"op": "small_intermittency_W",
                                    "args": [tau, delta],
                                    "value": small_intermittency_W(modes, tau, delta)})
            if args.v is not None:
                tau, delta = args.v
                evaluations.append({"op": "small_intermittency_V",
                                    "args": [tau, delta],
                                    "value": small_intermittency_V(modes, tau, delta)})
        if args.regime:
            path, tau, delta = args.regime
            doc = _load_toml(path)
            try:
                model = spec_from_dict(doc)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("bad model config: %s" % exc) from exc
            rep = check_regime(model, float(tau), float(delta))
            evaluations.append({
                "op": "check_regime",
                "args": [str(path), float(tau), float(delta)],
                "value": {
                    "gamma_ok": rep.gamma_ok,
                    "beta_ok": rep.beta_ok,
                    "subindex_ok": rep.subindex_ok,
                    "gamma_margin": list(rep.gamma_margin),
                    "beta_upper_margin": list(rep.beta_upper_margin),
                    "subindex_lhs": rep.subindex_lhs,
                    "notes": list(rep.notes),
                },
            })
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not evaluations:
        raise ConfigError("nothing to evaluate; pass --gh/--gtilde/--cupsilon/--w/--v/--regime")
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["op", "value"])
        for e in evaluations:
            value = e["value"]
            writer.writerow([e["op"], repr(value) if isinstance(value, float)
                             else json.dumps(value, sort_keys=True)])
        _emit(args, buf.getvalue(), "theory.csv")
    else:
        _emit(args, json.dumps(evaluations, indent=2, sort_keys=True) + "\n",
              "theory.json")
    return 0


def _cmd_experiment(args):
    doc = _load_toml(args.config)
    if "experiment" not in doc:
        raise ConfigError("config needs an experiment id (one of %s)"
                          % ", ".join(EXPERIMENT_IDS))
    overrides = doc.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("[overrides] must be a table")
    overrides = dict(overrides)
    if args.paper_scale:
        overrides["paper_scale"] = True
    if args.threads:
        overrides["threads"] = args.threads
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out_dir = args.out or doc.get("out")
    try:
        spec = ExperimentSpec(experiment=doc["experiment"], overrides=overrides,
                              seed=seed, out_dir=out_dir)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bundle = run_experiment(spec)
    if out_dir:
        print(Path(out_dir) / "summary.json")
        for name in bundle["files"]:
            print(Path(out_dir) / name)
    else:
        sys.stdout.write(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_gk(args):
    panel = load_ohlc_dir(args.dir, args.start, args.end)
    lines = ["date," + ",".join(panel.tickers)]
    for t, d in enumerate(panel.dates):
        lines.append(d.isoformat() + ","
                     + ",".join(repr(float(g.values[t])) for g in panel.gk))
    _emit(args, "\n".join(lines) + "\n", "gk.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nested-sfbm",
        description="Simulation and calibration toolkit for nested "
                    "stationary log-fBM factor models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="model config to a panel CSV")
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("calibrate", help="panel CSV or OHLC dir to a report")
    common(p)
    p.add_argument("--factor-source", default="proxy",
                   help="'proxy' or 'external:<csv>'")
    p.add_argument("--lags-Q", dest="lags_q", type=int, default=None)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("theory", help="closed-form evaluations")
    p.add_argument("--gh", nargs=2, type=float, metavar=("H", "Z"))
    p.add_argument("--gtilde", nargs=2, type=float, metavar=("H", "Z"))
    p.add_argument("--cupsilon", nargs=5, type=float,
                   metavar=("H", "LAMSQ", "T", "DELTA", "TAU"))
    p.add_argument("--w", nargs=2, type=float, metavar=("TAU", "DELTA"))
    p.add_argument("--v", nargs=2, type=float, metavar=("TAU", "DELTA"))
    p.add_argument("--mode", action="append", nargs=4, type=float,
                   metavar=("WEIGHT", "H", "LAMSQ", "T"))
    p.add_argument("--regime", nargs=3, metavar=("CONFIG", "TAU", "DELTA"))
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=_cmd_theory)

    p = sub.add_parser("experiment", help="experiment config to a result bundle")
    common(p)
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--paper-scale", action="store_true",
                   help="restore the heavyweight grids")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("gk", help="OHLC dir to a Garman-Klass CSV")
    p.add_argument("dir")
    p.add_argument("--start", default=None)
    p.add_argument("--end", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_gk)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except DataError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except CalibrationError as exc:
        print("numerical failure at %s" % exc, file=sys.stderr)
        return 4
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
