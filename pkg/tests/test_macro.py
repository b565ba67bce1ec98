from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrshock.macro import (
    FEATURES,
    ModelSpec,
    ProvincePanel,
    cross_validate,
    demean_and_correlate,
    fit_forecast,
    full_quarter_features,
    half_quarter_features,
    monthly_ratio_features,
    pca_fit,
    pca_scores,
    province_aggregate,
    read_panel_features,
    rsd_curve,
    sample_users,
    write_panel_features,
)
from cdrshock.macro.forecast import build_design, cdr_scores, split_provinces
from cdrshock.macro.panel import bootstrap_mean_ci, parse_quarter

QUARTERS = list(pd.period_range("2007Q1", "2009Q1", freq="Q"))


def make_panel(u: np.ndarray, feats: np.ndarray, gdp=None, names=FEATURES, masked=()) -> ProvincePanel:
    """``u``: (provinces, quarters); ``feats``: (provinces, quarters, features)."""
    n_p, n_q = u.shape
    pids = [f"P{i:02d}" for i in range(n_p)]
    qs = list(pd.period_range("2007Q1", periods=n_q, freq="Q"))
    idx = pd.MultiIndex.from_product([pids, qs], names=["province_id", "quarter"])
    unemp = pd.Series(u.ravel(), index=idx, name="unemployment")
    features = pd.DataFrame(feats.reshape(n_p * n_q, -1), index=idx, columns=list(names))
    g = pd.Series(np.linspace(100, 104, n_q) if gdp is None else gdp, index=pd.PeriodIndex(qs))
    return ProvincePanel(unemp, g, features, masked_quarters=frozenset(parse_quarter(q) for q in masked))


def ar_panel(seed=0, n_p=40, n_q=12, rho=0.9, cdr_beta=0.0, quad=0.0, noise=0.002, link=True):
    """AR(1) unemployment; features are noisy copies of a latent shock ``z``.

    With ``cdr_beta`` the shock enters unemployment at the same quarter as the
    features, so the CDR score carries information the lag does not.
    """
    g = np.random.default_rng(seed)
    u = np.zeros((n_p, n_q))
    z = g.standard_normal((n_p, n_q))
    u[:, 0] = g.uniform(0.05, 0.15, n_p)
    for t in range(1, n_q):
        u[:, t] = 0.01 + rho * u[:, t - 1] + quad * u[:, t - 1] ** 2 + cdr_beta * z[:, t] + noise * g.standard_normal(n_p)
    u = np.clip(u, 0.001, 0.999)
    base = z if link else g.standard_normal((n_p, n_q))
    load = np.array([1.0, 0.9, 0.9, 0.8, -0.6, 0.5, 0.3])
    feats = 1.0 + 0.05 * (base[..., None] * load + 0.5 * g.standard_normal((n_p, n_q, 7)))
    return make_panel(u, feats)


# ---------------------------------------------------------------------------
# sampling and ratios


def test_sample_users_identity_when_short():
    rosters = {"A": ["u1", "u2"], "B": [f"b{i}" for i in range(10)]}
    out = sample_users(rosters, k=10)
    assert out == {"A": ["u1", "u2"], "B": rosters["B"]}


def test_sample_users_deterministic_and_order_free():
    rosters = {p: [f"{p}{i}" for i in range(500)] for p in ("A", "B", "C")}
    a = sample_users(rosters, k=50, seed=4)
    b = sample_users(dict(reversed(list(rosters.items()))), k=50, seed=4)
    assert a == b
    assert all(len(v) == 50 and len(set(v)) == 50 and set(v) <= set(rosters[p]) for p, v in a.items())
    assert sample_users(rosters, k=50, seed=5) != a


def _user_months(rows):
    df = pd.DataFrame(rows, columns=["user_id", "month", *FEATURES])
    df["month"] = pd.PeriodIndex(df["month"], freq="M")
    return df


def test_ratio_examples():
    base = [10, 5, 5, 8, 0.2, 4, 3.0]
    nxt = [11, 5, 5, 8, 0.2, 4, 3.0]
    rows = [("u", "2008-01", *base), ("u", "2008-02", *nxt), ("v", "2008-01", 0, 1, 1, 1, 1, 1, 1), ("v", "2008-02", 3, 1, 1, 1, 1, 1, 1)]
    r = monthly_ratio_features(_user_months(rows))
    u = r.ratios.set_index("user_id").loc["u"]
    assert u["calls"] == pytest.approx(1.1)
    assert all(u[f] == 1.0 for f in FEATURES if f != "calls")
    v = r.ratios.set_index("user_id").loc["v"]
    assert math.isnan(v["calls"])
    ex = r.exclusions
    assert list(ex["reason"]) == ["zero base"] and list(ex["feature"]) == ["calls"]


def test_ratio_missing_month_excluded():
    rows = [("u", "2008-01", *[1.0] * 7), ("u", "2008-03", *[2.0] * 7)]
    r = monthly_ratio_features(_user_months(rows))
    assert r.ratios[list(FEATURES)].isna().all(axis=None)
    assert set(r.exclusions["reason"]) == {"missing month"}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=8))
def test_ratio_chain_reconstructs_series(values):
    rows = [("u", str(pd.Period("2008-01", "M") + i), *[v] * 7) for i, v in enumerate(values)]
    r = monthly_ratio_features(_user_months(rows)).ratios["calls"].to_numpy()
    assert np.prod(r) == pytest.approx(values[-1] / values[0], rel=1e-9)


def _ratio_rows(values, province="A", month="2008-01"):
    return pd.DataFrame({"province_id": province, "user_id": [f"u{i}" for i in range(len(values))], "month": pd.Period(month, "M"), **{f: values for f in FEATURES}})


def test_aggregate_constant_and_mask():
    agg = province_aggregate(_ratio_rows(np.full(150, 1.05)), n_boot=200)
    row = agg.iloc[0]
    assert row["calls"] == pytest.approx(1.05) and row["calls_lo"] == pytest.approx(1.05) and row["calls_hi"] == pytest.approx(1.05)
    assert not row["masked"] and row["n_users"] == 150
    small = province_aggregate(_ratio_rows(np.full(99, 1.05)), n_boot=10)
    assert bool(small.iloc[0]["masked"]) and math.isnan(small.iloc[0]["calls"])


def test_aggregate_two_users():
    agg = province_aggregate(_ratio_rows(np.array([1.0, 1.2])), min_users=1, n_boot=0)
    assert agg.iloc[0]["r_g"] == pytest.approx(1.1)


def test_aggregate_user_first_then_province():
    # user u0 has three months at 2.0, user u1 one month at 1.0 -> 1.5, not 1.75
    r = pd.concat([_ratio_rows(np.array([2.0]), month=m) for m in ("2008-01", "2008-02", "2008-03")] + [_ratio_rows(np.array([1.0]), month="2008-01").assign(user_id="u1")])
    agg = province_aggregate(r, min_users=1, n_boot=0)
    assert agg.iloc[0]["calls"] == pytest.approx(1.5)


def test_bootstrap_coverage():
    g = np.random.default_rng(12)
    hits = 0
    for _ in range(200):
        x = g.lognormal(0.0, 0.3, 300)
        lo, hi = bootstrap_mean_ci(x, n_boot=1000, rng=g)
        hits += lo[0] <= math.exp(0.045) <= hi[0]
    assert abs(hits / 200 - 0.95) <= 0.03


def test_half_equals_full_for_flat_users():
    g = np.random.default_rng(0)
    rows = []
    for u in range(120):
        v = g.lognormal(0, 0.1)
        for m in ("2008-01", "2008-02", "2008-03"):
            for h in (1, 2):
                rows.append({"province_id": "A", "user_id": f"u{u}", "month": pd.Period(m, "M"), "half": h, **{f: v for f in FEATURES}})
    df = pd.DataFrame(rows)
    full = full_quarter_features(df, n_boot=0)
    half = half_quarter_features(df, n_boot=0)
    np.testing.assert_allclose(full[list(FEATURES)].to_numpy(float), half[list(FEATURES)].to_numpy(float), rtol=1e-12)


def test_panel_features_round_trip(tmp_path):
    p = ar_panel()
    f = p.features.copy()
    f["masked"] = False
    f.iloc[3, f.columns.get_loc("masked")] = True
    write_panel_features(f, tmp_path / "f.csv")
    back = read_panel_features(tmp_path / "f.csv")
    assert back[list(FEATURES)].iloc[3].isna().all()
    np.testing.assert_allclose(back[list(FEATURES)].drop(back.index[3]).to_numpy(float), p.features.drop(p.features.index[3]).to_numpy(float), rtol=1e-9)


# ---------------------------------------------------------------------------
# sample-size stability


def test_rsd_constant_population_zero():
    pop = pd.DataFrame({"province_id": "A", **{f: np.ones(500) for f in FEATURES}})
    out = rsd_curve(pop, k_grid=(50, 100), T=5)
    assert (out.to_numpy() == 0).all()


def test_rsd_decreases_with_k():
    g = np.random.default_rng(1)
    pop = pd.concat([pd.DataFrame({"province_id": p, **{f: g.lognormal(0, 0.5, 4000) for f in FEATURES}}) for p in "ABCD"])
    out = rsd_curve(pop, k_grid=(50, 200, 800), T=30)
    for f in FEATURES:
        assert out[f].is_monotonic_decreasing
    # sqrt(k) scaling, loosely
    assert out["calls"].iloc[0] / out["calls"].iloc[2] == pytest.approx(4.0, rel=0.35)


def test_rsd_needs_enough_users():
    pop = pd.DataFrame({"province_id": "A", **{f: np.ones(10) for f in FEATURES}})
    with pytest.raises(ValueError):
        rsd_curve(pop, k_grid=(20,))


# ---------------------------------------------------------------------------
# correlations and PCA


def test_correlation_identity():
    p = ar_panel()
    f = p.features.copy()
    f["calls"] = p.unemployment.reindex(f.index).to_numpy()
    r = demean_and_correlate(p.with_features(f))
    assert r.loc["calls", "r"] == pytest.approx(1.0, abs=1e-12)


def test_pca_duplicated_columns():
    x = np.random.default_rng(0).standard_normal(200)
    res = pca_fit(np.column_stack([x, x]), names=["calls", "b"])
    np.testing.assert_allclose(res.eigenvalues, [2.0, 0.0], atol=1e-12)
    assert res.retained == 1


def test_pca_isotropic():
    X = np.random.default_rng(0).standard_normal((200_000, 4))
    res = pca_fit(X, names=["calls", "b", "c", "d"])
    np.testing.assert_allclose(res.eigenvalues, 1.0, atol=0.02)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 60))
def test_pca_properties(seed, n):
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, 7)) @ g.standard_normal((7, 7)) + g.normal(0, 5, 7)
    res = pca_fit(X, names=list(FEATURES))
    assert res.eigenvalues.sum() == pytest.approx(7.0, abs=1e-9)
    assert np.all(np.diff(res.eigenvalues) <= 1e-12)
    np.testing.assert_allclose(res.loadings.T @ res.loadings, np.eye(7), atol=1e-9)
    assert np.all(res.loadings[0] >= 0)
    mean_score = pca_scores(res, res.mean[None, :], 0)
    assert abs(mean_score[0]) < 1e-12
    S = np.column_stack([pca_scores(res, X, j) for j in range(7)])
    cov = np.cov(S, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 1e-9
    np.testing.assert_allclose(np.diag(cov), res.eigenvalues, atol=1e-9)


def test_pca_rejects_bad_input():
    X = np.random.default_rng(0).standard_normal((20, 3))
    with pytest.raises(ValueError, match="non-finite"):
        pca_fit(np.where(np.eye(20, 3, dtype=bool), np.nan, X), names=["calls", "b", "c"])
    X[:, 1] = 2.0
    with pytest.raises(ValueError, match="constant"):
        pca_fit(X, names=["calls", "b", "c"])
    with pytest.raises(ValueError, match="rows"):
        pca_fit(X[:5], names=["calls", "b", "c"])


# ---------------------------------------------------------------------------
# forecasts


def test_ar1_recovers_coefficient():
    p = ar_panel(noise=0.0)
    fit = fit_forecast(p, ModelSpec("AR1"))
    assert fit.coefficients["U_lag"] == pytest.approx(0.9, abs=1e-10)
    assert fit.coefficients["const"] == pytest.approx(0.01, abs=1e-10)


def test_cdr_coefficient_sign():
    p = ar_panel(cdr_beta=-0.004)
    fit = fit_forecast(p, ModelSpec("AR1", with_cdr=True))
    assert fit.coefficients["cdr"] < 0
    assert fit.result.pvalues[fit.result.names.index("cdr")] < 0.05


def test_quadratic_term():
    curved = fit_forecast(ar_panel(rho=0.3, quad=3.0, noise=0.001), ModelSpec("AR1_QUAD"))
    j = curved.result.names.index("U_lag_sq")
    assert curved.result.pvalues[j] < 0.05
    linear = fit_forecast(ar_panel(seed=2, noise=0.003), ModelSpec("AR1_QUAD"))
    ci = linear.result.conf_int(0.95)[linear.result.names.index("U_lag_sq")]
    assert ci[0] <= 0 <= ci[1]


def test_gdp_family_design():
    p = ar_panel()
    d = build_design(p, ModelSpec("AR1_GDP"))
    assert set(d.columns) >= {"U_lag", "gdp_lag"}
    q = d["quarter"].iloc[0]
    assert d["gdp_lag"].iloc[0] == p.gdp[q - 1]


def test_ahead_target_is_next_quarter():
    p = ar_panel()
    d = build_design(p, ModelSpec("AR1", horizon="ahead"))
    assert (d["target_quarter"] == d["quarter"] + 1).all()
    row = d.iloc[0]
    assert row["target"] == p.unemployment[(row["province_id"], row["quarter"] + 1)]


def test_informative_cdr_improves():
    ev = cross_validate(ar_panel(cdr_beta=-0.004), "AR1", "nowcast")
    assert ev.delta_rmse_pct > 0.2
    assert ev.rho_with > ev.rho_without


def test_noise_cdr_no_gain():
    ev = cross_validate(ar_panel(cdr_beta=-0.004, link=False, n_p=60), "AR1", "nowcast")
    assert abs(ev.delta_rmse_pct) < 0.05


def test_same_observations_for_both_variants():
    p = ar_panel(cdr_beta=-0.004)
    f = p.features.copy()
    f.iloc[5] = np.nan
    ev = cross_validate(p.with_features(f), "AR1_GDP", "ahead")
    pred = ev.predictions
    assert pred[["pred_with", "pred_without"]].notna().all(axis=None)
    assert not ((pred["province_id"] == f.index[5][0]) & (pred["quarter"] == f.index[5][1])).any()


def test_masked_quarter_dropped_everywhere():
    p = ar_panel(cdr_beta=-0.004)
    p = ProvincePanel(p.unemployment, p.gdp, p.features, masked_quarters=frozenset({pd.Period("2007Q4")}))
    d = build_design(p, ModelSpec("AR1", horizon="ahead"))
    bad = pd.Period("2007Q4")
    assert not ((d["quarter"] == bad) | (d["target_quarter"] == bad) | (d["quarter"] - 1 == bad)).any()


def test_no_leakage_from_test_fold():
    p = ar_panel(cdr_beta=-0.004)
    a, b = split_provinces(p.provinces, 0)
    ev = cross_validate(p, "AR1", "nowcast", seed=0)
    f = p.features.copy()
    sel = f.index.get_level_values(0).isin(b)
    f.loc[sel] = f.loc[sel] * 3.0 + 1.0
    ev2 = cross_validate(p.with_features(f), "AR1", "nowcast", seed=0)
    fold0 = [c for c in ev.coefficients if c["fold"] == 0][0]
    fold0b = [c for c in ev2.coefficients if c["fold"] == 0][0]
    assert fold0 == fold0b
    _, pca = cdr_scores(p, a)
    assert pca.n_rows == len(p.usable_features(a))


@pytest.mark.parametrize("family", ["AR1", "AR1_QUAD", "AR1_GDP"])
def test_delta_rmse_invariant_to_scaling(family):
    p = ar_panel(cdr_beta=-0.004)
    q = ProvincePanel(p.unemployment * 0.5, p.gdp, p.features)
    a = cross_validate(p, family, "ahead")
    b = cross_validate(q, family, "ahead")
    assert a.delta_rmse_pct == pytest.approx(b.delta_rmse_pct, abs=1e-9)


def test_province_fixed_effects_rejected():
    with pytest.raises(ValueError):
        cross_validate(ar_panel(), "AR1", fixed_effects=("province",))


def test_split_is_seeded_half():
    provs = [f"P{i:02d}" for i in range(52)]
    a, b = split_provinces(provs, 3)
    assert len(a) == len(b) == 26 and not set(a) & set(b)
    assert split_provinces(provs, 3) == (a, b) and split_provinces(provs, 4) != (a, b)


def test_shuffled_test_labels_leave_training_untouched():
    p = ar_panel(cdr_beta=-0.004)
    a, b = split_provinces(p.provinces, 0)
    u = p.unemployment.copy()
    sel = u.index.get_level_values(0).isin(b)
    u[sel] = np.random.default_rng(1).permutation(u[sel].to_numpy())
    shuffled = ProvincePanel(u, p.gdp, p.features, masked_quarters=p.masked_quarters)
    ev, ev2 = cross_validate(p, "AR1_GDP", "ahead"), cross_validate(shuffled, "AR1_GDP", "ahead")
    fold0 = [c for c in ev.coefficients if c["fold"] == 0][0]
    assert fold0 == [c for c in ev2.coefficients if c["fold"] == 0][0]
    s1, _ = cdr_scores(p, a)
    s2, _ = cdr_scores(shuffled, a)
    assert s1.equals(s2)


@pytest.mark.parametrize("family", ["AR1", "AR1_QUAD", "AR1_GDP"])
def test_training_residuals_orthogonal(family):
    p = ar_panel(cdr_beta=-0.004)
    fit = fit_forecast(p, ModelSpec(family, with_cdr=True))
    d = build_design(p, fit.spec, cdr_scores(p)[0])
    X = np.column_stack([np.ones(len(d)), d[list(fit.spec.regressors)].to_numpy(float)])
    assert np.abs(X.T @ fit.result.resid).max() < 1e-8 * len(d)
