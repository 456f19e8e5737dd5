"""End-to-end calibration of the nested factor model.

Five steps: estimate betas from the daily covariance, proxy the factor
quadratic variation through the beta-weighted stock QVs (or take an
externally supplied series), fit (H, lambda^2) of the factor log-vol,
extract per-stock residual QVs, then per stock regress out the factor
log-vol to get gamma and fit the idiosyncratic (H_i, lambda_i^2).

Scale bookkeeping: Hurst fits run on gaussianized series rescaled back to
the raw log-QV standard deviation, so lambda^2 estimates land in physical
units while the marginals the GMM sees are Gaussian.  gamma is the OLS
slope between gaussianized log-vols times the ratio of their raw standard
deviations, which is Cov/Var in the original log scale.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .gmm import GmmConfig, HurstFit, empirical_autocov, feasible_q, fit_hurst
from .theory import H_MIN, RegimeReport, SfbmParams, check_regime
from .volatility import (
    GaussianizedSeries,
    VolSeries,
    _apply_floor,
    gaussianize,
    realized_qv,
)

BETA_TOL = 1e-10
BETA_MAX_ITER = 500
GAMMA_CORRECTION_CAP = 10.0
_LAMBDA_FLOOR = 1e-12


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _scrub_nonfinite(obj):
    if isinstance(obj, dict):
        return {k: _scrub_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_scrub_nonfinite(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return _json_float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class CalibrationError(RuntimeError):
    """A pipeline step failed; carries the step index and whatever
    diagnostics the earlier steps produced."""

    def __init__(self, step, message, diagnostics=None):
        super().__init__("step %d: %s" % (step, message))
        self.step = step
        self.diagnostics = dict(diagnostics or {})


class BetaConvergenceError(RuntimeError):
    """Power iteration did not reach tolerance; carries the last iterate."""

    def __init__(self, last_beta, residual, iterations):
        super().__init__(
            "beta fit did not converge in %d iterations (residual %.3e)"
            % (iterations, residual)
        )
        self.last_beta = last_beta
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class FactorSource:
    """Where the factor volatility series comes from.

    proxy: built from the panel per Step 2.  external: a supplied
    per-period VolSeries (for instance Garman-Klass of the index), aligned
    to the panel's period grid.
    """

    mode: str = "proxy"
    series: VolSeries = None

    def __post_init__(self):
        if self.mode not in ("proxy", "external"):
            raise ValueError("mode must be 'proxy' or 'external'")
        if self.mode == "external" and self.series is None:
            raise ValueError("external mode needs a series")
        if self.mode == "proxy" and self.series is not None:
            raise ValueError("proxy mode takes no series")


@dataclass(frozen=True)
class CalibrationReport:
    beta_hat: np.ndarray
    factor_fit: HurstFit
    gamma_hat: np.ndarray
    idio_fits: tuple
    sigma_hat: np.ndarray
    regime: RegimeReport
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.beta_hat)
        if not (len(self.gamma_hat) == len(self.idio_fits) == len(self.sigma_hat) == n):
            raise ValueError("per-stock fields must share one length")

    @property
    def n_stocks(self):
        return len(self.beta_hat)

    def to_json_dict(self) -> dict:
        return _scrub_nonfinite({
            "beta": [float(b) for b in self.beta_hat],
            "sigma": [float(s) for s in self.sigma_hat],
            "gamma": [float(g) for g in self.gamma_hat],
            "factor": self.factor_fit.to_json_dict(),
            "idio": [f.to_json_dict() for f in self.idio_fits],
            "regime": {
                "gamma_margin": self.regime.gamma_margin,
                "beta_upper_margin": self.regime.beta_upper_margin,
                "subindex_lhs": self.regime.subindex_lhs,
                "subindex_threshold": self.regime.subindex_threshold,
                "satisfied": self.regime.satisfied,
                "notes": list(self.regime.notes),
            },
            "diagnostics": self.diagnostics,
        })

    def stock_table_csv(self, fileobj, tickers=None):
        if tickers is None:
            tickers = ["x_%d" % (i + 1) for i in range(self.n_stocks)]
        fileobj.write("ticker,beta,sigma,gamma,H_i,lambda_i_sq,se,flags\n")
        for t, b, s, g, f in zip(tickers, self.beta_hat, self.sigma_hat,
                                 self.gamma_hat, self.idio_fits):
            fileobj.write("%s,%r,%r,%r,%r,%r,%r,%s\n" % (
                t, float(b), float(s), float(g), f.hurst_hat,
                f.lambda_sq_hat, f.hurst_se, "|".join(f.flags)))


def estimate_beta(daily: np.ndarray) -> np.ndarray:
    """Rank-one fit of the off-diagonal daily return covariance.

    Alternates diagonal imputation with a leading-eigenpair refit: the
    diagonal of the covariance (which carries the idiosyncratic variances)
    is replaced by the current beta beta^T diagonal, and beta is re-read
    from the top eigenpair, starting from the zero-diagonal matrix.  The
    sign is fixed by mean(beta) > 0.
    """
    return _beta_fit(daily)[0]


def beta_from_covariance(cov: np.ndarray) -> np.ndarray:
    """Same rank-one fit, starting from a covariance matrix directly."""
    return _beta_fit_cov(np.asarray(cov, dtype=float))[0]


def _beta_fit(daily):
    x = np.asarray(daily, dtype=float)
    if x.ndim != 2:
        raise ValueError("need an N x L return matrix")
    n, length = x.shape
    if length < 10 * n:
        warnings.warn(
            "only %d periods for %d stocks; beta estimates will be noisy "
            "(want L >= 10 N)" % (length, n)
        )
    xc = x - x.mean(axis=1, keepdims=True)
    return _beta_fit_cov(xc @ xc.T / length)


def _beta_fit_cov(cov):
    n = cov.shape[0]
    if cov.ndim != 2 or cov.shape[1] != n:
        raise ValueError("covariance must be square")
    if n == 2:
        raise ValueError(
            "N=2 is underdetermined: one off-diagonal covariance cannot "
            "identify two betas"
        )
    if n < 3:
        raise ValueError("need at least 3 stocks, got %d" % n)
    off = cov.copy()
    np.fill_diagonal(off, 0.0)

    vals, vecs = np.linalg.eigh(off)
    beta = vecs[:, -1] * math.sqrt(max(vals[-1], 0.0))
    for iteration in range(1, BETA_MAX_ITER + 1):
        m = off + np.diag(beta * beta)
        vals, vecs = np.linalg.eigh(m)
        new = vecs[:, -1] * math.sqrt(max(vals[-1], 0.0))
        if new @ beta < 0.0:
            new = -new
        step = np.max(np.abs(new - beta))
        beta = new
        if step < BETA_TOL:
            break
    else:
        resid = off - np.outer(beta, beta)
        np.fill_diagonal(resid, 0.0)
        raise BetaConvergenceError(beta, float(np.linalg.norm(resid)), BETA_MAX_ITER)
    if beta.mean() < 0.0:
        beta = -beta
    resid = off - np.outer(beta, beta)
    np.fill_diagonal(resid, 0.0)
    return beta, iteration, float(np.linalg.norm(resid))


def factor_qv_proxy(stock_qvs, beta_hat) -> VolSeries:
    """Beta-weighted combination of stock QVs whose residual terms average
    out across the cross-section: sum_i beta_i^2 <x^i> / sum_i beta_i^4."""
    beta = np.asarray(beta_hat, dtype=float)
    if np.all(beta == 0.0):
        raise ValueError("all betas are zero; the proxy is undefined")
    qv = np.asarray([getattr(q, "values", q) for q in stock_qvs], dtype=float)
    if qv.shape[0] != beta.size:
        raise ValueError("need one QV series per beta")
    num = (beta**2)[:, None] * qv
    vals = num.sum(axis=0) / np.sum(beta**4)
    delta = getattr(stock_qvs[0], "delta", 1.0)
    floored, count = _apply_floor(vals)
    return VolSeries(values=floored, delta=delta, kind="proxy",
                     floored_count=count)


def estimate_factor_series(daily, beta_hat) -> np.ndarray:
    """Per-period OLS projection of the panel onto the beta direction."""
    beta = np.asarray(beta_hat, dtype=float)
    norm = beta @ beta
    if norm == 0.0:
        raise ValueError("beta has zero norm")
    return (beta @ np.asarray(daily, dtype=float)) / norm


def projected_factor_qv(panel, beta_hat) -> VolSeries:
    """Realized QV per period of the OLS-projected factor returns.

    Projecting the fine returns onto beta leaves an idiosyncratic
    contamination whose weight decays like 1/N, so on simulated panels the
    period sums of squares track the factor QV much more tightly than the
    closed-form combination in factor_qv_proxy, whose idiosyncratic offset
    does not vanish with N.  Projecting increments commutes with taking
    increments of the projected levels, so this is the QV of the same
    estimated factor that estimate_factor_series returns per period.
    """
    beta = np.asarray(beta_hat, dtype=float)
    norm = beta @ beta
    if norm == 0.0:
        raise ValueError("beta has zero norm")
    proj = (beta @ panel.fine_returns) / norm
    vals = (proj.reshape(-1, panel.subdivisions) ** 2).sum(axis=1)
    floored, count = _apply_floor(vals)
    return VolSeries(values=floored, delta=panel.delta, kind="proxy",
                     floored_count=count)


def residual_qv(stock_qv: VolSeries, beta_i: float, factor_qv: VolSeries) -> VolSeries:
    """Stock QV minus its factor share, floored like every vol series."""
    if len(stock_qv) != len(factor_qv):
        raise ValueError("stock and factor QV lengths differ")
    if stock_qv.delta != factor_qv.delta:
        raise ValueError("stock and factor QV scales differ")
    raw = stock_qv.values - beta_i**2 * factor_qv.values
    floored, count = _apply_floor(raw)
    return VolSeries(values=floored, delta=stock_qv.delta, kind="proxy",
                     floored_count=count)


def estimate_gamma_and_idio(residual_gauss, factor_gauss):
    """OLS of the residual log-vol on the factor log-vol.

    Returns (gamma_hat, idio_values).  The slope is computed on the
    gaussianized values, where the idio series is exactly sample-orthogonal
    to the factor; gamma_hat rescales the slope by the ratio of raw log
    standard deviations when both inputs carry them, landing back in the
    physical log scale.  idio_values stay in gaussianized units.
    """
    r = np.asarray(getattr(residual_gauss, "values", residual_gauss), float)
    f = np.asarray(getattr(factor_gauss, "values", factor_gauss), float)
    if r.shape != f.shape:
        raise ValueError("series lengths differ")
    fc = f - f.mean()
    var_f = fc @ fc
    if var_f == 0.0:
        raise ValueError("factor series has zero variance")
    rc = r - r.mean()
    slope = (rc @ fc) / var_f
    idio = rc - slope * fc
    r_std = getattr(residual_gauss, "input_std", None)
    f_std = getattr(factor_gauss, "input_std", None)
    gamma = slope * (r_std / f_std) if r_std is not None and f_std is not None else slope
    return float(gamma), idio


def _gamma_correction(log_factor_values) -> float:
    """Undo the OLS shrinkage from measurement noise in the factor log-vol.

    A regression on a noisy regressor shrinks the slope by the ratio of
    signal variance to total variance.  The per-period noise of a QV
    estimate is white across periods while the log-vol signal is strongly
    persistent, so the lag-1 autocovariance of ln factor QV reads the
    signal variance without the noise and C(0)/C(1) undoes the shrinkage.
    Capped, and inactive when the lag-1 autocovariance is not positive.
    """
    c0, c1 = empirical_autocov(log_factor_values, [0, 1])
    if not c1 > 0.0:
        return 1.0
    return float(min(c0 / c1, GAMMA_CORRECTION_CAP))


def _daily_returns(panel) -> np.ndarray:
    n, n_fine = panel.fine_returns.shape
    return panel.fine_returns.reshape(n, -1, panel.subdivisions).sum(axis=2)


def _fit_log_vol(gauss: GaussianizedSeries, gmm: GmmConfig, delta: float) -> HurstFit:
    """GMM on the gaussianized series restored to its raw log-vol scale, so
    lambda^2 comes out in physical units."""
    return fit_hurst(gauss.values * gauss.input_std, gmm, delta)


def _failed_fit(reason: str) -> HurstFit:
    nan = float("nan")
    return HurstFit(hurst_hat=nan, lambda_sq_hat=nan, objective=nan,
                    lags=(), hurst_se=nan, lambda_sq_se=nan,
                    flags=("fit_failed", reason))


def _clipped_mode(fit: HurstFit, span: float) -> SfbmParams:
    h = fit.hurst_hat if math.isfinite(fit.hurst_hat) else H_MIN
    lam = fit.lambda_sq_hat if math.isfinite(fit.lambda_sq_hat) else 0.0
    return SfbmParams(min(max(h, H_MIN), 0.499), max(lam, _LAMBDA_FLOOR), span)


def _calibrate(daily, stock_qvs, factor_source, gmm, regime_tau, n_threads,
               diagnostics, projection=None) -> CalibrationReport:
    """Shared Steps 1-5.  `projection` builds the factor QV from fine
    returns when the caller has them; otherwise proxy mode falls back to
    the closed-form combination of stock QVs."""
    delta = stock_qvs[0].delta
    n_stocks = len(stock_qvs)
    n_periods = len(stock_qvs[0])
    if regime_tau is None:
        regime_tau = 8.0 * delta

    # shrink the lag ladder if the panel is too short for the configured q
    q_eff = feasible_q(n_periods, gmm.q)
    if q_eff != gmm.q:
        gmm = dataclasses.replace(gmm, q=q_eff)
    diagnostics["gmm_q_used"] = q_eff

    # Step 1: betas from the daily covariance
    try:
        beta_hat, beta_iters, beta_resid = _beta_fit(daily)
    except (ValueError, BetaConvergenceError) as exc:
        raise CalibrationError(1, str(exc), diagnostics) from exc
    diagnostics["beta_iterations"] = beta_iters
    diagnostics["beta_residual"] = beta_resid

    # Step 2: factor QV, proxied or supplied
    try:
        formula_qv = factor_qv_proxy(stock_qvs, beta_hat)
        anchor_qv = projection(beta_hat) if projection is not None else formula_qv
        if factor_source.mode == "external":
            if len(factor_source.series) != n_periods:
                raise ValueError(
                    "external series has %d periods, panel has %d"
                    % (len(factor_source.series), n_periods)
                )
            # An external series (an index QV, say) carries the factor's
            # shape but an arbitrary level: an equal-weight index sits near
            # beta_bar^2 times the factor QV.  Step 4 subtracts in QV units,
            # so pin the level to the panel's own factor-QV estimate.
            scale = float(np.median(anchor_qv.values / factor_source.series.values))
            factor_qv = VolSeries(
                values=factor_source.series.values * scale,
                delta=factor_source.series.delta,
                kind=factor_source.series.kind,
                floored_count=factor_source.series.floored_count,
            )
            diagnostics["factor_qv_source"] = "external"
            diagnostics["external_scale"] = scale
        elif projection is not None:
            factor_qv = anchor_qv
            diagnostics["factor_qv_source"] = "projection"
        else:
            factor_qv = formula_qv
            diagnostics["factor_qv_source"] = "closed_form"
        if factor_qv is not formula_qv:
            log_formula = np.log(formula_qv.values)
            log_used = np.log(factor_qv.values)
            diagnostics["factor_reference_corr"] = float(
                np.corrcoef(log_formula, log_used)[0, 1]
            )
            diagnostics["proxy_ratio_median"] = float(
                np.median(formula_qv.values / factor_qv.values)
            )
        else:
            diagnostics["factor_reference_corr"] = None
            diagnostics["proxy_ratio_median"] = None
        diagnostics["stock_qv_floors"] = [q.floored_count for q in stock_qvs]
        diagnostics["factor_qv_floors"] = factor_qv.floored_count
    except ValueError as exc:
        raise CalibrationError(2, str(exc), diagnostics) from exc

    # Step 3: factor Hurst fit on the gaussianized log factor QV
    try:
        factor_gauss = gaussianize(np.log(factor_qv.values), source=factor_qv)
        factor_fit = _fit_log_vol(factor_gauss, gmm, delta)
    except ValueError as exc:
        raise CalibrationError(3, str(exc), diagnostics) from exc
    diagnostics["factor_log_std"] = factor_gauss.input_std

    # Step 4: residual QVs and sigma
    try:
        resid_qvs = [residual_qv(stock_qvs[i], beta_hat[i], factor_qv)
                     for i in range(n_stocks)]
        sigma_hat = np.array([math.sqrt(r.values.mean() / delta) for r in resid_qvs])
        diagnostics["residual_floors"] = [r.floored_count for r in resid_qvs]
    except ValueError as exc:
        raise CalibrationError(4, str(exc), diagnostics) from exc

    # Step 5: per-stock gamma and idio fits over the shared factor context.
    # The regression slope is de-attenuated for the factor's measurement
    # noise; the idio series fed to the GMM stays the plain OLS residual,
    # which removes the common component optimally in sample.  A stock
    # whose residual series cannot be gaussianized or fitted (for instance
    # floored on every period) gets a flagged placeholder instead of
    # aborting the panel.
    correction = _gamma_correction(np.log(factor_qv.values))
    diagnostics["gamma_attenuation_correction"] = correction

    def stock_fit(i):
        try:
            r_gauss = gaussianize(np.log(resid_qvs[i].values), source=resid_qvs[i])
            gamma_i, idio = estimate_gamma_and_idio(r_gauss, factor_gauss)
            idio_fit = fit_hurst(idio * r_gauss.input_std, gmm, delta)
            if resid_qvs[i].floored_count > 0.1 * n_periods:
                idio_fit = dataclasses.replace(
                    idio_fit, flags=idio_fit.flags + ("residual_floored",))
            return gamma_i * correction, idio_fit
        except ValueError as exc:
            return float("nan"), _failed_fit(str(exc))

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(stock_fit, range(n_stocks)))
    else:
        results = [stock_fit(i) for i in range(n_stocks)]
    gamma_hat = np.array([g for g, _ in results])
    idio_fits = tuple(f for _, f in results)
    failed = [i for i, f in enumerate(idio_fits) if "fit_failed" in f.flags]
    diagnostics["failed_stocks"] = failed
    if len(failed) == n_stocks:
        raise CalibrationError(5, "no stock produced a usable idio fit",
                               diagnostics)

    # regime report from the fitted parameters
    span = n_periods * delta
    model = SimpleNamespace(
        factor_mode=_clipped_mode(factor_fit, span),
        idio_modes=[_clipped_mode(f, span) for f in idio_fits],
        betas=beta_hat,
        sigmas=sigma_hat,
        gammas=np.where(np.isfinite(gamma_hat), gamma_hat, 0.0),
    )
    regime = check_regime(model, regime_tau, delta)

    return CalibrationReport(
        beta_hat=beta_hat,
        factor_fit=factor_fit,
        gamma_hat=gamma_hat,
        idio_fits=idio_fits,
        sigma_hat=sigma_hat,
        regime=regime,
        diagnostics=diagnostics,
    )


def run_calibration(panel, factor_source: FactorSource = FactorSource(),
                    gmm: GmmConfig = GmmConfig(), regime_tau: float = None,
                    n_threads: int = 1) -> CalibrationReport:
    """Steps 1-5 on a returns panel; any step error aborts with its index.

    In proxy mode the factor QV is the realized QV of the OLS-projected
    fine returns; the closed-form stock-QV combination is recorded against
    it in the diagnostics (correlation of the log series and median ratio).
    """
    diagnostics = {
        "n_stocks": panel.n_stocks,
        "n_periods": panel.n_periods,
        "factor_source": factor_source.mode,
        "dropped_periods": 0,
    }
    daily = _daily_returns(panel)
    stock_qvs = [realized_qv(panel, i) for i in range(panel.n_stocks)]
    return _calibrate(
        daily, stock_qvs, factor_source, gmm, regime_tau, n_threads,
        diagnostics, projection=lambda beta: projected_factor_qv(panel, beta),
    )


def run_calibration_from_daily(daily, stock_qvs,
                               factor_source: FactorSource = FactorSource(),
                               gmm: GmmConfig = GmmConfig(),
                               regime_tau: float = None,
                               n_threads: int = 1) -> CalibrationReport:
    """Steps 1-5 from per-period data only: an N x L daily return matrix
    and one VolSeries per stock (for instance Garman-Klass variances).

    Without fine returns there is no projected factor QV, so proxy mode
    uses the closed-form combination of the stock QVs.
    """
    daily = np.asarray(daily, dtype=float)
    if daily.ndim != 2:
        raise ValueError("need an N x L return matrix")
    if len(stock_qvs) != daily.shape[0]:
        raise ValueError("need one QV series per stock")
    for q in stock_qvs:
        if len(q) != daily.shape[1]:
            raise ValueError("QV series and return matrix lengths differ")
    diagnostics = {
        "n_stocks": daily.shape[0],
        "n_periods": daily.shape[1],
        "factor_source": factor_source.mode,
        "dropped_periods": 0,
    }
    return _calibrate(daily, stock_qvs, factor_source, gmm, regime_tau,
                      n_threads, diagnostics)
