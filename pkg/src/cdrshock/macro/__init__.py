"""Province-level aggregation, PCA and unemployment forecasting."""

from .forecast import FAMILIES, HORIZONS, ForecastEval, ModelSpec, build_design, cross_validate, evaluate_all, fit_forecast
from .panel import (
    FEATURES,
    ProvincePanel,
    demean_and_correlate,
    full_quarter_features,
    half_quarter_features,
    monthly_ratio_features,
    province_aggregate,
    rsd_curve,
    sample_users,
)
from .pca import PcaResult, pca_fit, pca_scores
from .panel import read_gdp, read_panel_features, read_unemployment, write_gdp, write_panel_features, write_unemployment
