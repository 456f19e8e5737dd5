"""Nested S-fBM factor model: simulation, estimation, closed-form oracles."""

__version__ = "0.1.0"

from .theory import (
    IntermittencyVector,
    RegimeReport,
    SfbmParams,
    c_upsilon,
    check_regime,
    g_h,
    g_tilde_h,
    r_ratio,
    r_zero_bound,
    sfbm_cov,
    sfbm_mean,
    small_intermittency_V,
    small_intermittency_W,
    small_intermittency_error_ratio,
    theta_var_h0,
    upsilon_var_h0,
)
from .sampling import CirculantSampler, GridSpec
from .simulate import (
    IndexReturns,
    IndexSpec,
    NestedModelSpec,
    ReturnsPanel,
    build_index,
    panel_to_csv,
    sample_beta_sigma,
    simulate_panel,
    spec_from_dict,
    spec_to_dict,
)
from .volatility import (
    GaussianizedSeries,
    OhlcBar,
    VolSeries,
    garman_klass,
    garman_klass_single,
    gaussianize,
    hurst_by_moment_scaling,
    realized_qv,
)
from .gmm import (
    GmmConfig,
    HurstFit,
    MultiLagFit,
    empirical_autocov,
    feasible_q,
    fit_hurst,
    fit_hurst_multi_lagset,
    mean_removal_shift,
    model_moment,
)
from .pipeline import (
    BetaConvergenceError,
    CalibrationError,
    CalibrationReport,
    FactorSource,
    beta_from_covariance,
    estimate_beta,
    estimate_factor_series,
    estimate_gamma_and_idio,
    factor_qv_proxy,
    projected_factor_qv,
    residual_qv,
    run_calibration,
    run_calibration_from_daily,
)
from .data_io import (
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
from .experiments import (
    EXPERIMENT_IDS,
    ExperimentSpec,
    index_hurst,
    resolve_threads,
    run_experiment,
)

__all__ = [name for name in dir() if not name.startswith("_")]
