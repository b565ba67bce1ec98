"""Autoregressive unemployment forecasts with and without a CDR covariate,
cross-validated across halves of the provinces."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..ols import OLSResult, ols
from .panel import ProvincePanel
from .pca import PcaResult, pca_fit, pca_scores

FAMILIES = ("AR1", "AR1_QUAD", "AR1_GDP")
HORIZONS = ("nowcast", "ahead")


@dataclass(frozen=True)
class ModelSpec:
    """One forecasting equation.

    ``nowcast`` targets ``U_t``; ``ahead`` targets ``U_{t+1}``.  Regressors are
    always dated ``t-1`` (unemployment, GDP) and ``t`` (CDR score).
    """

    family: str = "AR1"
    with_cdr: bool = False
    horizon: str = "nowcast"
    include_intercept: bool = True
    fixed_effects: tuple[str, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.horizon not in HORIZONS:
            raise ValueError(f"horizon must be one of {HORIZONS}, got {self.horizon!r}")
        bad = set(self.fixed_effects) - {"province", "quarter"}
        if bad:
            raise ValueError(f"unknown fixed effects {sorted(bad)}")

    @property
    def regressors(self) -> tuple[str, ...]:
        cols = ["U_lag"]
        if self.family == "AR1_QUAD":
            cols.append("U_lag_sq")
        elif self.family == "AR1_GDP":
            cols.append("gdp_lag")
        if self.with_cdr:
            cols.append("cdr")
        return tuple(cols)

    @property
    def label(self) -> str:
        return f"{self.family}{'+CDR' if self.with_cdr else ''}@{self.horizon}"

    def variant(self, with_cdr: bool) -> ModelSpec:
        return ModelSpec(self.family, with_cdr, self.horizon, self.include_intercept, self.fixed_effects)


def build_design(panel: ProvincePanel, spec: ModelSpec, cdr: pd.Series | None = None, provinces: Iterable[str] | None = None) -> pd.DataFrame:
    """Rows ``(province_id, quarter t)`` with ``target`` and the spec's regressors.

    Masked province-quarters drop every row that needs them (as target, lag or
    CDR quarter); no imputation.
    """
    m = panel.mask()
    u = panel.unemployment.where(~m)
    provs = panel.provinces if provinces is None else sorted(set(provinces))
    quarters = panel.quarters
    rows = []
    step = 0 if spec.horizon == "nowcast" else 1
    gdp = panel.gdp
    for pid in provs:
        for q in quarters:
            lag, tgt = q - 1, q + step
            try:
                u_lag = u.loc[(pid, lag)]
                u_tgt = u.loc[(pid, tgt)]
                usable_t = not m.loc[(pid, q)]
            except KeyError:
                continue
            if not (np.isfinite(u_lag) and np.isfinite(u_tgt) and usable_t):
                continue
            row = {"province_id": pid, "quarter": q, "target_quarter": tgt, "target": float(u_tgt), "U_lag": float(u_lag)}
            row["U_lag_sq"] = row["U_lag"] ** 2
            row["gdp_lag"] = float(gdp.get(lag, np.nan))
            if spec.with_cdr:
                row["cdr"] = float(cdr.get((pid, q), np.nan)) if cdr is not None else np.nan
            rows.append(row)
    cols = ["province_id", "quarter", "target_quarter", "target", *spec.regressors]
    if not rows:
        return pd.DataFrame(columns=cols)
    df = pd.DataFrame(rows)
    df = df[cols]
    df = df[np.isfinite(df[list(spec.regressors)].to_numpy(float)).all(axis=1)]
    return df.reset_index(drop=True)


def _design_matrix(df: pd.DataFrame, spec: ModelSpec, levels: dict[str, list] | None = None) -> tuple[np.ndarray, list[str]]:
    cols = []
    names = []
    if spec.include_intercept:
        cols.append(np.ones(len(df)))
        names.append("const")
    for r in spec.regressors:
        cols.append(df[r].to_numpy(float))
        names.append(r)
    levels = levels or {}
    # one dummy level is absorbed by the intercept (or by the first FE block)
    has_base = spec.include_intercept
    for fe in spec.fixed_effects:
        key = "province_id" if fe == "province" else "quarter"
        lv = levels.get(fe, sorted(df[key].unique()))
        for v in lv[1:] if has_base else lv:
            cols.append((df[key] == v).to_numpy(float))
            names.append(f"fe_{fe}_{v}")
        has_base = True
    X = np.column_stack(cols) if cols else np.zeros((len(df), 0))
    return X, names


@dataclass(frozen=True)
class FittedForecast:
    spec: ModelSpec
    result: OLSResult
    pca: PcaResult | None = None
    levels: dict = field(default_factory=dict)
    nobs: int = 0

    @property
    def coefficients(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.result.names, self.result.params)}

    def predict(self, design: pd.DataFrame) -> np.ndarray:
        if "province" in self.spec.fixed_effects:
            unseen = set(design["province_id"]) - set(self.levels.get("province", []))
            if unseen:
                raise ValueError("province fixed effects cannot predict unseen provinces")
        X, _ = _design_matrix(design, self.spec, self.levels)
        return X @ self.result.params


def cdr_scores(panel: ProvincePanel, provinces: Iterable[str] | None = None) -> tuple[pd.Series, PcaResult]:
    """First-component scores for every province-quarter, PCA fitted on ``provinces`` only."""
    train = panel.usable_features(provinces)
    pca = pca_fit(train, sign_feature="calls" if "calls" in train.columns else train.columns[0])
    feats = panel.features.dropna()
    return pca_scores(pca, feats, 0).rename("cdr"), pca


def fit_forecast(
    panel: ProvincePanel,
    spec: ModelSpec,
    provinces: Iterable[str] | None = None,
    cdr: pd.Series | None = None,
    design: pd.DataFrame | None = None,
) -> FittedForecast:
    """Pooled OLS of the spec over the training provinces.

    When ``spec.with_cdr`` and no scores are given, the PCA is fitted on the
    training provinces' usable rows.
    """
    pca = None
    if spec.with_cdr and cdr is None:
        cdr, pca = cdr_scores(panel, provinces)
    df = build_design(panel, spec, cdr, provinces) if design is None else design
    if df.empty:
        raise ValueError(f"no usable observations for {spec.label}")
    levels = {}
    for fe in spec.fixed_effects:
        key = "province_id" if fe == "province" else "quarter"
        levels[fe] = sorted(df[key].unique())
    X, names = _design_matrix(df, spec, levels)
    res = ols(X, df["target"].to_numpy(float), names)
    return FittedForecast(spec, res, pca, levels, len(df))


@dataclass(frozen=True)
class ForecastEval:
    family: str
    horizon: str
    predictions: pd.DataFrame  # province_id, quarter, target_quarter, observed, pred_without, pred_with, fold
    rmse_without: float
    rmse_with: float
    rho_without: float
    rho_with: float
    split: tuple[tuple[str, ...], tuple[str, ...]]
    coefficients: list[dict] = field(default_factory=list)

    @property
    def delta_rmse_pct(self) -> float:
        return 1.0 - self.rmse_with / self.rmse_without

    @property
    def n_obs(self) -> int:
        return len(self.predictions)

    def as_dict(self) -> dict:
        return {
            "family": self.family,
            "horizon": self.horizon,
            "n_obs": self.n_obs,
            "rmse_without": self.rmse_without,
            "rmse_with": self.rmse_with,
            "delta_rmse_pct": self.delta_rmse_pct,
            "rho_without": self.rho_without,
            "rho_with": self.rho_with,
            "split": [list(self.split[0]), list(self.split[1])],
            "coefficients": self.coefficients,
        }


def split_provinces(provinces: Sequence[str], seed: int = 0) -> tuple[tuple[str, ...], tuple[str, ...]]:
    provs = sorted(provinces)
    if len(provs) < 2:
        raise ValueError("need at least two provinces to cross-validate")
    perm = np.random.default_rng(seed).permutation(len(provs))
    h = len(provs) // 2
    a = tuple(sorted(provs[i] for i in perm[:h]))
    b = tuple(sorted(provs[i] for i in perm[h:]))
    return a, b


def _rmse(e: np.ndarray) -> float:
    return float(math.sqrt(np.mean(e * e)))


def _rho(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def cross_validate(
    panel: ProvincePanel,
    family: str = "AR1",
    horizon: str = "nowcast",
    seed: int = 0,
    include_intercept: bool = True,
    fixed_effects: tuple[str, ...] = (),
) -> ForecastEval:
    """Two-fold cross-validation over a seeded half-split of provinces.

    Each fold fits the PCA and both model variants on the training half only
    and predicts the other half; the two variants are scored on exactly the
    same province-quarters (those usable by the with-CDR variant).
    """
    if "province" in fixed_effects:
        raise ValueError("province fixed effects cannot be cross-validated across provinces")
    base = ModelSpec(family, False, horizon, include_intercept, tuple(fixed_effects))
    a, b = split_provinces(panel.provinces, seed)
    parts = []
    coefs = []
    for fold, (train, test) in enumerate(((a, b), (b, a))):
        cdr, pca = cdr_scores(panel, train)
        spec_w = base.variant(True)
        d_train = build_design(panel, spec_w, cdr, train)
        d_test = build_design(panel, spec_w, cdr, test)
        fit_wo = fit_forecast(panel, base, design=d_train)
        fit_w = fit_forecast(panel, spec_w, cdr=cdr, design=d_train)
        if d_test.empty:
            continue
        out = d_test[["province_id", "quarter", "target_quarter"]].copy()
        out["observed"] = d_test["target"].to_numpy(float)
        out["pred_without"] = fit_wo.predict(d_test)
        out["pred_with"] = fit_w.predict(d_test)
        out["fold"] = fold
        parts.append(out)
        coefs.append({"fold": fold, "without": fit_wo.coefficients, "with": fit_w.coefficients, "pc1_explained": float(pca.explained[0])})
    pred = pd.concat(parts, ignore_index=True).sort_values(["province_id", "quarter"], kind="mergesort").reset_index(drop=True)
    obs = pred["observed"].to_numpy(float)
    pw, pwo = pred["pred_with"].to_numpy(float), pred["pred_without"].to_numpy(float)
    return ForecastEval(family, horizon, pred, _rmse(obs - pwo), _rmse(obs - pw), _rho(pwo, obs), _rho(pw, obs), (a, b), coefs)


def evaluate_all(panel: ProvincePanel, seed: int = 0, include_intercept: bool = True) -> list[ForecastEval]:
    return [cross_validate(panel, f, h, seed, include_intercept) for f in FAMILIES for h in HORIZONS]
