"""Exact sampling of stationary log-volatility paths on uniform grids.

The workhorse is circulant embedding of the covariance sequence: the n-point
Toeplitz covariance is embedded in a 2(n-1) circulant matrix whose spectrum
comes from one FFT, and each subsequent FFT of weighted complex noise yields
two independent exact draws.  A dense Cholesky fallback (short grids only)
exists to cross-validate the FFT path.

Grid convention: the value at index k represents omega at time k*dt (left
endpoints); every downstream window integral is a left-endpoint sum.  Grids
longer than the covariance horizon are allowed: the covariance sequence is
simply zero beyond the horizon, so the embedding extends naturally.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, toeplitz

from .theory import SfbmParams, sfbm_mean

# negative embedding eigenvalues up to this fraction of the largest one are
# treated as roundoff and clipped to zero
CLIP_TOL = 1e-8

_DENSE_MAX_POINTS = 2048
_DENSE_JITTER = 1e-12
_BATCH_ROWS = 256


class EmbeddingError(RuntimeError):
    """Circulant embedding produced a genuinely negative spectrum."""

    def __init__(self, message, most_negative):
        super().__init__(message)
        self.most_negative = float(most_negative)


@dataclass(frozen=True)
class GridSpec:
    """Uniform sampling grid: n_points values spaced dt apart."""

    n_points: int
    dt: float

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError("n_points must be an integer >= 2")
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ValueError("dt must be a positive finite number")
        object.__setattr__(self, "n_points", int(self.n_points))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def span(self) -> float:
        return self.n_points * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt


@dataclass(frozen=True)
class GaussianPath:
    """One sampled log-vol path together with everything needed to redraw it."""

    values: np.ndarray
    grid: GridSpec
    mode: SfbmParams
    seed: object

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_points,):
            raise ValueError("values length must equal grid.n_points")
        if not np.all(np.isfinite(vals)):
            raise ValueError("path contains non-finite values")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


def _cov_sequence(mode: SfbmParams, grid: GridSpec) -> np.ndarray:
    """Covariance at lags 0, dt, ..., (n-1) dt; zero beyond the horizon."""
    lags = grid.times()
    half_nu_sq = 0.5 * mode.nu_sq
    inside = lags < mode.horizon
    out = np.zeros(grid.n_points)
    out[inside] = half_nu_sq * (
        1.0 - (lags[inside] / mode.horizon) ** (2.0 * mode.hurst)
    )
    return out


def _clip_or_raise(eigenvalues: np.ndarray, clip_tol: float) -> np.ndarray:
    """Zero out tiny negative eigenvalues; refuse to sample past the tolerance."""
    lam_max = float(eigenvalues.max())
    lam_min = float(eigenvalues.min())
    if lam_min < -clip_tol * lam_max:
        raise EmbeddingError(
            "circulant embedding is not positive semidefinite: most negative "
            "eigenvalue %g against maximum %g (tolerance %g)"
            % (lam_min, lam_max, clip_tol),
            most_negative=lam_min,
        )
    return np.maximum(eigenvalues, 0.0)


class CirculantSampler:
    """Precomputed spectrum for repeated exact draws of one mode on one grid.

    The covariance sequence c_0..c_{n-1} is embedded in the minimal circulant
    circle of length m = 2(n-1); its eigenvalues are the FFT of the embedded
    sequence.  Each draw FFTs complex standard noise scaled by sqrt(lambda/m),
    whose real and imaginary parts are two independent N(mean, Toeplitz(c))
    vectors.
    """

    def __init__(self, mode: SfbmParams, grid: GridSpec, clip_tol: float = CLIP_TOL):
        self.mode = mode
        self.grid = grid
        self.mean = sfbm_mean(mode)
        n = grid.n_points
        cov = _cov_sequence(mode, grid)
        embedded = np.concatenate([cov, cov[n - 2 : 0 : -1]])
        lam = np.fft.fft(embedded).real
        lam = _clip_or_raise(lam, clip_tol)
        self._m = embedded.size
        self._weights = np.sqrt(lam / self._m)

    def draw(self, rng: np.random.Generator, n_paths: int) -> np.ndarray:
        """Return an (n_paths, n_points) array of independent paths."""
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        n = self.grid.n_points
        m = self._m
        out = np.empty((n_paths, n))
        n_pairs = (n_paths + 1) // 2
        done = 0
        for start in range(0, n_pairs, _BATCH_ROWS):
            rows = min(_BATCH_ROWS, n_pairs - start)
            z = rng.standard_normal((rows, m)) + 1j * rng.standard_normal((rows, m))
            y = np.fft.fft(self._weights * z, axis=1)[:, :n]
            for j in range(rows):
                out[done] = y.real[j]
                done += 1
                if done == n_paths:
                    break
                out[done] = y.imag[j]
                done += 1
        out += self.mean
        return out


def _dense_draw(mode: SfbmParams, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    if grid.n_points > _DENSE_MAX_POINTS:
        raise ValueError(
            "dense factorization is limited to %d points" % _DENSE_MAX_POINTS
        )
    cov = toeplitz(_cov_sequence(mode, grid))
    cov[np.diag_indices_from(cov)] += _DENSE_JITTER
    lower = cholesky(cov, lower=True)
    return sfbm_mean(mode) + lower @ rng.standard_normal(grid.n_points)


def sample_sfbm_path(mode: SfbmParams, grid: GridSpec, seed, method: str = "circulant") -> GaussianPath:
    """Draw one stationary Gaussian log-vol path.

    seed may be an int or a tuple of ints, fed straight to numpy's seeding
    machinery; identical (mode, grid, seed, method) always reproduces the
    same path.  method 'dense' cross-validates the FFT sampler on grids of
    at most 2048 points.
    """
    rng = np.random.default_rng(seed)
    if method == "circulant":
        values = CirculantSampler(mode, grid).draw(rng, 1)[0]
    elif method == "dense":
        values = _dense_draw(mode, grid, rng)
    else:
        raise ValueError("method must be 'circulant' or 'dense'")
    return GaussianPath(values=values, grid=grid, mode=mode, seed=seed)


def sample_sfbm_paths(mode: SfbmParams, grid: GridSpec, n_paths: int, seed) -> np.ndarray:
    """Batch version: (n_paths, n_points) array from one spectrum setup."""
    rng = np.random.default_rng(seed)
    return CirculantSampler(mode, grid).draw(rng, int(n_paths))


def sample_many(modes, grid: GridSpec, seed) -> list:
    """One independent path per mode.

    The sub-seed for mode i is the pair (seed, i): adding modes to the end of
    the list never changes the draws of earlier ones.
    """
    paths = []
    for i, mode in enumerate(modes):
        try:
            paths.append(sample_sfbm_path(mode, grid, (seed, i)))
        except EmbeddingError as exc:
            raise EmbeddingError(
                "mode %d: %s" % (i, exc), most_negative=exc.most_negative
            ) from exc
    return paths


def dump_path_csv(path: GaussianPath, fileobj) -> None:
    """Debug helper: write one path as rows of time,omega."""
    writer = csv.writer(fileobj)
    writer.writerow(["time", "omega"])
    for t, w in zip(path.grid.times(), path.values):
        writer.writerow([repr(float(t)), repr(float(w))])
