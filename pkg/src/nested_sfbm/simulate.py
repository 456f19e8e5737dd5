"""Synthetic return panels from the nested one-factor model.

Stock i follows, on a fine grid of step dt = delta/subdivisions,

    dx_i = beta_i exp(Omega/2) sqrt(dt) Z0  +  sigma_i exp(omega_i~/2) sqrt(dt) Zi,

where Omega is the factor log-volatility (one S-fBM mode), the residual
log-volatility nests the factor as omega_i~ = gamma_i Omega + omega_i with an
independent idiosyncratic mode omega_i, and Z0, Zi are independent standard
normals, independent of all volatility modes (no leverage).  Both exp(Omega)
and exp(omega_i~) are mean one: the factor keeps its own normalization and
the residual gets a joint mean shift, so Cov(Omega, omega_i~) =
gamma_i Var(Omega) by construction.

RNG layout, derived from the master seed as numpy seed tuples:
    (seed, 0)        factor log-vol Omega
    (seed, 1)        factor driving noise Z0
    (seed, 2, i)     idiosyncratic log-vol omega_i
    (seed, 3, i)     stock driving noise Zi
Adding stocks therefore never changes the factor draw or earlier stocks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .sampling import CirculantSampler, GridSpec
from .theory import SfbmParams

CONFIG_VERSION = 1


@dataclass(frozen=True)
class NestedModelSpec:
    """Full parameterization of one synthetic panel."""

    n_stocks: int
    betas: tuple
    sigmas: tuple
    gammas: tuple
    factor_mode: SfbmParams
    idio_modes: tuple
    n_periods: int
    subdivisions: int
    delta: float = 1.0
    allow_long_sample: bool = False

    def __post_init__(self):
        n = int(self.n_stocks)
        if n < 1:
            raise ValueError("n_stocks must be >= 1")
        betas = tuple(float(b) for b in self.betas)
        sigmas = tuple(float(s) for s in self.sigmas)
        gammas = tuple(float(g) for g in self.gammas)
        idio = tuple(self.idio_modes)
        for name, seq in (("betas", betas), ("sigmas", sigmas),
                          ("gammas", gammas), ("idio_modes", idio)):
            if len(seq) != n:
                raise ValueError("%s must have length n_stocks=%d" % (name, n))
        if any(not (s > 0.0 and math.isfinite(s)) for s in sigmas):
            raise ValueError("all sigmas must be positive and finite")
        if any(not math.isfinite(b) for b in betas):
            raise ValueError("betas must be finite")
        if any(not math.isfinite(g) for g in gammas):
            raise ValueError("gammas must be finite")
        horizon = self.factor_mode.horizon
        if any(p.horizon != horizon for p in idio):
            raise ValueError("all modes must share the factor horizon")
        if int(self.n_periods) < 1 or int(self.subdivisions) < 1:
            raise ValueError("n_periods and subdivisions must be >= 1")
        if not (self.delta > 0.0 and math.isfinite(self.delta)):
            raise ValueError("delta must be positive and finite")
        span = self.n_periods * self.delta
        if span > horizon and not self.allow_long_sample:
            raise ValueError(
                "sample span %g exceeds the horizon %g; "
                "set allow_long_sample=True to permit it" % (span, horizon)
            )
        object.__setattr__(self, "n_stocks", n)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "idio_modes", idio)
        object.__setattr__(self, "n_periods", int(self.n_periods))
        object.__setattr__(self, "subdivisions", int(self.subdivisions))
        object.__setattr__(self, "delta", float(self.delta))

    @property
    def n_fine(self) -> int:
        return self.n_periods * self.subdivisions

    @property
    def dt(self) -> float:
        return self.delta / self.subdivisions


@dataclass(frozen=True)
class ReturnsPanel:
    """Fine-grid return panel plus the factor series kept for oracle tests."""

    fine_returns: np.ndarray   # N x (L*s)
    factor_returns: np.ndarray  # L*s
    delta: float
    subdivisions: int
    provenance: str = "synthetic"

    def __post_init__(self):
        fine = np.asarray(self.fine_returns, dtype=float)
        fac = np.asarray(self.factor_returns, dtype=float)
        if fine.ndim != 2:
            raise ValueError("fine_returns must be a 2-D array")
        if fac.shape != (fine.shape[1],):
            raise ValueError("factor_returns length must match fine_returns columns")
        if fine.shape[1] % int(self.subdivisions) != 0:
            raise ValueError("column count must be a multiple of subdivisions")
        if not (np.all(np.isfinite(fine)) and np.all(np.isfinite(fac))):
            raise ValueError("returns must be finite")
        if self.provenance not in ("synthetic", "empirical"):
            raise ValueError("provenance must be 'synthetic' or 'empirical'")
        object.__setattr__(self, "fine_returns", fine)
        object.__setattr__(self, "factor_returns", fac)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "subdivisions", int(self.subdivisions))

    @property
    def n_stocks(self) -> int:
        return self.fine_returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.fine_returns.shape[1] // self.subdivisions


@dataclass(frozen=True)
class IndexSpec:
    """Weighted basket over a subset of panel members (0-based indices)."""

    members: tuple
    weights: tuple

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        weights = tuple(float(w) for w in self.weights)
        if len(members) == 0:
            raise ValueError("index needs at least one member")
        if len(set(members)) != len(members):
            raise ValueError("members must be distinct")
        if len(weights) != len(members):
            raise ValueError("one weight per member")
        if any(w <= 0.0 for w in weights):
            raise ValueError("weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class IndexReturns:
    """Basket fine-return series; beta_bar is filled when betas are known."""

    values: np.ndarray
    members: tuple
    weights: tuple
    beta_bar: float = None


def _grid(spec: NestedModelSpec) -> GridSpec:
    return GridSpec(n_points=spec.n_fine, dt=spec.dt)


def _factor_log_vol(spec: NestedModelSpec, seed) -> np.ndarray:
    sampler = CirculantSampler(spec.factor_mode, _grid(spec))
    rng = np.random.default_rng((seed, 0))
    return sampler.draw(rng, 1)[0]


def _residual_log_vol(spec, seed, i, factor_path, sampler_cache):
    """omega_i~ = gamma_i * centered factor + centered own mode + joint mean."""
    mode = spec.idio_modes[i]
    sampler = sampler_cache.get(mode)
    if sampler is None:
        sampler = CirculantSampler(mode, _grid(spec))
        sampler_cache[mode] = sampler
    rng = np.random.default_rng((seed, 2, i))
    own = sampler.draw(rng, 1)[0]
    gam = spec.gammas[i]
    centered = gam * (factor_path - (-0.25 * spec.factor_mode.nu_sq))
    centered += own - (-0.25 * mode.nu_sq)
    joint_mean = -0.25 * (gam ** 2 * spec.factor_mode.nu_sq + mode.nu_sq)
    return centered + joint_mean


def simulate_panel(spec: NestedModelSpec, seed) -> ReturnsPanel:
    """Draw one full panel; deterministic given (spec, seed)."""
    n = spec.n_stocks
    n_fine = spec.n_fine
    sqrt_dt = math.sqrt(spec.dt)
    omega_factor = _factor_log_vol(spec, seed)
    factor_vol = np.exp(0.5 * omega_factor)
    z0 = np.random.default_rng((seed, 1)).standard_normal(n_fine)
    factor_returns = factor_vol * sqrt_dt * z0

    fine = np.empty((n, n_fine))
    cache = {}
    for i in range(n):
        omega_tilde = _residual_log_vol(spec, seed, i, omega_factor, cache)
        zi = np.random.default_rng((seed, 3, i)).standard_normal(n_fine)
        fine[i] = spec.betas[i] * factor_returns
        fine[i] += spec.sigmas[i] * np.exp(0.5 * omega_tilde) * sqrt_dt * zi
    return ReturnsPanel(
        fine_returns=fine,
        factor_returns=factor_returns,
        delta=spec.delta,
        subdivisions=spec.subdivisions,
        provenance="synthetic",
    )


def build_index(panel: ReturnsPanel, index: IndexSpec, betas=None) -> IndexReturns:
    """Fine-step basket returns dI = sum_i w_i dx_i over the chosen members.

    When the member betas are known, the basket loading beta_bar =
    sum_i w_i beta_i is reported alongside the series.
    """
    n = panel.n_stocks
    for m in index.members:
        if not 0 <= m < n:
            raise ValueError("member %d out of range for %d stocks" % (m, n))
    w = np.asarray(index.weights)
    values = w @ panel.fine_returns[list(index.members)]
    beta_bar = None
    if betas is not None:
        betas = np.asarray(betas, dtype=float)
        beta_bar = float(sum(wi * betas[m] for wi, m in zip(index.weights, index.members)))
    return IndexReturns(
        values=values, members=index.members, weights=index.weights, beta_bar=beta_bar
    )


def sample_beta_sigma(n, beta_params=(9.66, 5.63), sigma_params=(13.10, 4.18), seed=None):
    """Draw panel loadings beta_i and residual scales sigma_i.

    Both are independent Beta draws; the default shape pairs reproduce the
    cross-sectional spreads used throughout the synthetic experiments.
    """
    for a, b in (beta_params, sigma_params):
        if not (a > 0 and b > 0):
            raise ValueError("Beta shape parameters must be positive")
    rng = np.random.default_rng(seed)
    betas = rng.beta(beta_params[0], beta_params[1], int(n))
    sigmas = rng.beta(sigma_params[0], sigma_params[1], int(n))
    return betas, sigmas


def panel_to_csv(panel: ReturnsPanel, fileobj, aggregation: str = "fine") -> None:
    """Write the panel as time,f,x_1..x_N rows.

    aggregation 'fine' emits one row per fine step (time in units of delta);
    'daily' sums each period's fine returns into one row per period.
    """
    n, n_fine = panel.fine_returns.shape
    s = panel.subdivisions
    if aggregation == "fine":
        times = np.arange(n_fine) * (panel.delta / s)
        fac = panel.factor_returns
        stocks = panel.fine_returns
    elif aggregation == "daily":
        n_periods = n_fine // s
        times = np.arange(n_periods) * panel.delta
        fac = panel.factor_returns.reshape(n_periods, s).sum(axis=1)
        stocks = panel.fine_returns.reshape(n, n_periods, s).sum(axis=2)
    else:
        raise ValueError("aggregation must be 'fine' or 'daily'")
    writer = csv.writer(fileobj)
    writer.writerow(["time", "f"] + ["x_%d" % (i + 1) for i in range(n)])
    for k in range(len(times)):
        writer.writerow(
            [repr(float(times[k])), repr(float(fac[k]))]
            + [repr(float(stocks[i, k])) for i in range(n)]
        )


def _mode_to_dict(mode: SfbmParams) -> dict:
    return {
        "hurst": mode.hurst,
        "intermittency_sq": mode.intermittency_sq,
        "horizon": mode.horizon,
    }


def _mode_from_dict(d: dict) -> SfbmParams:
    return SfbmParams(
        hurst=float(d["hurst"]),
        intermittency_sq=float(d["intermittency_sq"]),
        horizon=float(d["horizon"]),
    )


def spec_to_dict(spec: NestedModelSpec) -> dict:
    """Structured config form of a model spec (schema version 1)."""
    return {
        "version": CONFIG_VERSION,
        "n_stocks": spec.n_stocks,
        "betas": list(spec.betas),
        "sigmas": list(spec.sigmas),
        "gammas": list(spec.gammas),
        "factor": _mode_to_dict(spec.factor_mode),
        "idio": [_mode_to_dict(m) for m in spec.idio_modes],
        "n_periods": spec.n_periods,
        "subdivisions": spec.subdivisions,
        "delta": spec.delta,
        "allow_long_sample": spec.allow_long_sample,
    }


def spec_from_dict(doc: dict) -> NestedModelSpec:
    """Inverse of spec_to_dict.

    Scalar betas/sigmas/gammas broadcast to n_stocks, and a single idio mode
    table is shared by every stock; this keeps hand-written configs short.
    """
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError("unsupported config version %r" % (version,))
    n = int(doc["n_stocks"])

    def broadcast(x):
        if np.isscalar(x):
            return (float(x),) * n
        return tuple(float(v) for v in x)

    idio = doc["idio"]
    if isinstance(idio, dict):
        modes = (_mode_from_dict(idio),) * n
    else:
        modes = tuple(_mode_from_dict(d) for d in idio)
        if len(modes) == 1:
            modes = modes * n
    return NestedModelSpec(
        n_stocks=n,
        betas=broadcast(doc["betas"]),
        sigmas=broadcast(doc["sigmas"]),
        gammas=broadcast(doc["gammas"]),
        factor_mode=_mode_from_dict(doc["factor"]),
        idio_modes=modes,
        n_periods=int(doc["n_periods"]),
        subdivisions=int(doc["subdivisions"]),
        delta=float(doc.get("delta", 1.0)),
        allow_long_sample=bool(doc.get("allow_long_sample", False)),
    )
