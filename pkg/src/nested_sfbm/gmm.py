"""Moment fit of (H, lambda^2) for one log-volatility component.

The empirical autocovariance of a log quadratic-variation series is matched
to the theoretical curve lambda^2 * C_Upsilon(delta, tau; H, T) on the
dyadic-fractional lag grid tau_k = floor(2^(k/4)).  The model is linear in
lambda^2, so the amplitude solves in closed form for each H and the fit is
a 1-D search: a coarse grid scan followed by a bounded refinement between
the best grid point's neighbours.

Conventions baked in here rather than left to callers:

* the decorrelation horizon T is pinned to the sample span, never fitted;
* the model moment is the expectation of the *estimator*, not the raw
  curve: removing the overall mean from a series correlated across the
  whole span shifts every sample autocovariance down by roughly the
  variance of the sample mean, which for C_Upsilon with T = span is the
  H-dependent constant A_H (1 - 2 / ((2H+1)(2H+2))), A_H = 1/(2H(1-2H)),
  times lambda^2, plus the usual (1 - tau/n) taper.  Without this
  correction the shift is comparable to the in-window decay of the curve
  and drags the fitted H far below truth;
* lag 0 is excluded (realized-variance noise sits there); the optional
  nugget adds a fitted constant to the model at lags <= 2 instead;
* lags are equally weighted;
* errors come from a delete-one jackknife over 20 contiguous blocks, with
  the lag set, horizon and mean-removal correction held fixed so
  replicates differ only through the empirical moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .theory import _c_upsilon_raw

GRID_POINTS = 50
JACKKNIFE_BLOCKS = 20
NUGGET_MAX_LAG = 2
_FLAT_TOL = 1e-12


@dataclass(frozen=True)
class GmmConfig:
    """Lag-grid and search-bound settings for one Hurst fit.

    q is the largest lag exponent: the lag set is floor(2^(k/4)) for
    k = 0..q, de-duplicated.  The generated lags must stay strictly inside
    a quarter of the series length, which the fit checks.
    """

    q: int = 32
    nugget: bool = False
    h_min: float = 1e-3
    h_max: float = 0.499

    def __post_init__(self):
        if self.q < 8:
            raise ValueError("q must be at least 8, got %d" % self.q)
        if not (0.0 < self.h_min < self.h_max < 0.5):
            raise ValueError("H bounds must satisfy 0 < h_min < h_max < 0.5")

    def lag_set(self) -> tuple:
        return tuple(sorted({int(2.0 ** (k / 4.0)) for k in range(self.q + 1)}))


@dataclass(frozen=True)
class HurstFit:
    """Result of one (H, lambda^2) fit with jackknife errors."""

    hurst_hat: float
    lambda_sq_hat: float
    objective: float
    lags: tuple
    hurst_se: float
    lambda_sq_se: float
    flags: tuple = ()
    nugget_hat: float = 0.0

    def __post_init__(self):
        if self.lambda_sq_hat < 0.0:
            raise ValueError("lambda_sq_hat must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "hurst": self.hurst_hat,
            "lambda_sq": self.lambda_sq_hat,
            "se": {"hurst": self.hurst_se, "lambda_sq": self.lambda_sq_se},
            "lags": list(self.lags),
            "objective": self.objective,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class MultiLagFit:
    """Aggregate of repeated fits under resampled lag-grid sizes.

    The confidence interval is a normal approximation whose variance adds
    the between-trial spread (lag-set jitter on the same data) to the mean
    in-sample jackknife variance; either term alone understates the
    uncertainty.
    """

    hurst_mean: float
    hurst_se: float
    ci_low: float
    ci_high: float
    fits: tuple
    q_values: tuple
    failures: tuple = ()


def feasible_q(n_periods, q=32) -> int:
    """Largest lag exponent <= q whose lag ladder fits a series of length
    n_periods (largest lag strictly inside a quarter of the series), never
    below the GmmConfig minimum of 8."""
    q = int(q)
    while q > 8 and 4 * int(2.0 ** (q / 4.0)) >= int(n_periods):
        q -= 1
    return q


def empirical_autocov(series, lags) -> np.ndarray:
    """Biased sample autocovariance (1/n normalization, overall mean removed)."""
    y = np.asarray(getattr(series, "values", series), dtype=float)
    if y.ndim != 1:
        raise ValueError("need a 1-D series")
    n = y.size
    lags = np.asarray(lags, dtype=int)
    if lags.size and lags.max() >= n / 2.0:
        raise ValueError("largest lag %d is not below half the length %d"
                         % (lags.max(), n))
    if np.any(lags < 0):
        raise ValueError("lags must be non-negative")
    d = y - y.mean()
    return np.array([d[: n - lag] @ d[lag:] / n for lag in lags])


def _profile(chat, c_ups, nugget_col):
    """Best (lambda^2, nugget) for fixed H and the resulting objective."""
    if nugget_col is None:
        denom = float(c_ups @ c_ups)
        lam = float(chat @ c_ups) / denom if denom > 0.0 else 0.0
        clamped = lam < 0.0
        lam = max(lam, 0.0)
        resid = chat - lam * c_ups
        return float(resid @ resid), lam, 0.0, clamped
    x = np.column_stack([c_ups, nugget_col])
    coef, _, _, _ = np.linalg.lstsq(x, chat, rcond=None)
    lam, eta = float(coef[0]), float(coef[1])
    clamped = lam < 0.0
    if clamped:
        lam = 0.0
        m = nugget_col > 0.0
        eta = float(chat[m].mean()) if np.any(m) else 0.0
    resid = chat - lam * c_ups - eta * nugget_col
    return float(resid @ resid), lam, eta, clamped


def mean_removal_shift(h: float) -> float:
    """Downward bias of the mean-removed autocovariance, per unit lambda^2.

    Var of the sample mean of a series with autocovariance lambda^2
    C_Upsilon(tau; H, T = span), in the continuum approximation: the
    integral 2 A_H int_0^1 (1-u)(1-u^(2H)) du with A_H = 1/(2H(1-2H)).
    """
    a = 1.0 / (2.0 * h * (1.0 - 2.0 * h))
    return a * (1.0 - 2.0 / ((2.0 * h + 1.0) * (2.0 * h + 2.0)))


def model_moment(h, taus, delta, span) -> np.ndarray:
    """Expected sample autocovariance per unit lambda^2 at time lags taus."""
    taus = np.asarray(taus, dtype=float)
    cu = _c_upsilon_raw(h, span, delta, taus)
    return (1.0 - taus / span) * (cu - mean_removal_shift(h))


def _fit_core(y, lags, delta, span, config):
    """Grid scan plus bounded refinement; no length precondition (the
    jackknife replicates are slightly short)."""
    chat = empirical_autocov(y, lags)
    taus = np.asarray(lags, dtype=float) * delta
    nugget_col = (
        (taus <= NUGGET_MAX_LAG * delta).astype(float) if config.nugget else None
    )

    def at(h):
        return _profile(chat, model_moment(h, taus, delta, span), nugget_col)

    grid = np.linspace(config.h_min, config.h_max, GRID_POINTS)
    objs = np.array([at(h)[0] for h in grid])
    k = int(np.argmin(objs))
    scale = float(chat @ chat)
    flags = []
    if objs.max() - objs.min() <= _FLAT_TOL * max(scale, 1e-300):
        flags.append("non_identifiable")
        h_best = grid[k]
    else:
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, GRID_POINTS - 1)]
        res = minimize_scalar(lambda h: at(h)[0], bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-7})
        h_best = float(res.x) if res.fun <= objs[k] else float(grid[k])
    obj, lam, eta, clamped = at(h_best)
    if clamped:
        flags.append("lambda_clamped")
    return h_best, lam, obj, eta, tuple(flags)


def fit_hurst(series, config: GmmConfig = GmmConfig(), delta: float = 1.0) -> HurstFit:
    """Fit (H, lambda^2) to the autocovariance of a log-QV series.

    The series should be the log quadratic-variation values before any
    standardization; a mean shift does not change the fit, but the variance
    scale is what identifies lambda^2.
    """
    y = np.asarray(getattr(series, "values", series), dtype=float)
    if y.ndim != 1:
        raise ValueError("need a 1-D series")
    n = y.size
    if n < 256:
        raise ValueError("need at least 256 observations, got %d" % n)
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    if y.var() == 0.0:
        raise ValueError("degenerate series: zero variance")
    lags = config.lag_set()
    if lags[-1] >= n / 4.0:
        raise ValueError(
            "largest lag %d must be strictly inside span/4 = %.0f; "
            "reduce q" % (lags[-1], n / 4.0)
        )
    delta = float(delta)
    span = n * delta

    h_hat, lam_hat, obj, eta_hat, flags = _fit_core(y, lags, delta, span, config)
    flags = list(flags)

    blocks = np.array_split(np.arange(n), JACKKNIFE_BLOCKS)
    h_reps, lam_reps = [], []
    for block in blocks:
        sub = np.delete(y, block)
        if sub.var() == 0.0:
            continue
        h_b, lam_b, _, _, _ = _fit_core(sub, lags, delta, span, config)
        h_reps.append(h_b)
        lam_reps.append(lam_b)
    if len(h_reps) < JACKKNIFE_BLOCKS:
        flags.append("jackknife_partial")
    if len(h_reps) >= 2:
        b = len(h_reps)
        fac = (b - 1.0) / b
        h_se = math.sqrt(fac * np.sum((np.asarray(h_reps) - np.mean(h_reps)) ** 2))
        lam_se = math.sqrt(fac * np.sum((np.asarray(lam_reps) - np.mean(lam_reps)) ** 2))
    else:
        h_se = lam_se = float("nan")
        flags.append("jackknife_failed")

    return HurstFit(
        hurst_hat=h_hat,
        lambda_sq_hat=lam_hat,
        objective=obj,
        lags=lags,
        hurst_se=h_se,
        lambda_sq_se=lam_se,
        flags=tuple(flags),
        nugget_hat=eta_hat,
    )


def fit_hurst_multi_lagset(series, delta: float = 1.0, n_trials: int = 20,
                           q_bounds=(28, 40), seed=None,
                           nugget: bool = False) -> MultiLagFit:
    """Repeat fit_hurst with lag-grid sizes drawn uniformly from q_bounds.

    Needs at least 5 successful trials; failures (for instance a q too
    large for the series) are recorded, not raised, unless too many.
    """
    rng = np.random.default_rng(seed)
    qs = rng.integers(q_bounds[0], q_bounds[1] + 1, size=n_trials)
    fits, used_q, failures = [], [], []
    for q in qs:
        try:
            fits.append(fit_hurst(series, GmmConfig(q=int(q), nugget=nugget), delta))
            used_q.append(int(q))
        except ValueError as exc:
            failures.append("q=%d: %s" % (q, exc))
    if len(fits) < 5:
        raise ValueError(
            "only %d of %d trials succeeded; first failure: %s"
            % (len(fits), n_trials, failures[0] if failures else "n/a")
        )
    h = np.array([f.hurst_hat for f in fits])
    between = float(h.var(ddof=1)) if h.size > 1 else 0.0
    within = float(np.nanmean([f.hurst_se ** 2 for f in fits]))
    se = math.sqrt(between + (0.0 if math.isnan(within) else within))
    mean = float(h.mean())
    return MultiLagFit(
        hurst_mean=mean,
        hurst_se=se,
        ci_low=mean - 1.96 * se,
        ci_high=mean + 1.96 * se,
        fits=tuple(fits),
        q_values=tuple(used_q),
        failures=tuple(failures),
    )
