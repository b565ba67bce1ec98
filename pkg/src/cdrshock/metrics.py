"""Monthly social and mobility metrics per user, baseline normalisation,
weighted group comparisons and pre/post difference regressions."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pandas as pd

from .cdr import StudyCalendar, TowerCluster, TowerGeo, call_legs
from .ols import OLSResult, ols

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
METRICS = ("calls", "incoming", "outgoing", "to_town", "contacts", "churn", "towers", "r_g", "r_1")
RATIO_METRICS = ("calls", "incoming", "outgoing", "contacts", "towers", "r_g", "r_1")
LEVEL_METRICS = ("to_town", "churn")
MOBILITY_METRICS = ("towers", "r_g", "r_1")
# response form used in the pre/post regressions
MODEL_FORM = {
    "calls": "log",
    "incoming": "log",
    "outgoing": "log",
    "towers": "log",
    "r_g": "log",
    "r_1": "log",
    "contacts": "level",
    "churn": "level",
    "to_town": "level",
}


# ---------------------------------------------------------------------------
# geometry


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _unit(lat, lon):
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def _latlon(v):
    v = np.asarray(v, dtype=float)
    lat = np.degrees(np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1])))
    lon = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    return lat, lon


def center_of_mass(lat, lon, weights=None) -> tuple[float, float]:
    """Weighted spherical centroid (normalised mean of unit vectors)."""
    w = np.ones(len(lat)) if weights is None else np.asarray(weights, float)
    v = (w[:, None] * _unit(np.asarray(lat, float), np.asarray(lon, float))).sum(axis=0)
    lat_c, lon_c = _latlon(v)
    return float(lat_c), float(lon_c)


def radius_of_gyration(lat, lon, weights=None) -> float:
    """Root-mean-square great-circle distance (km) from the centre of mass."""
    lat = np.asarray(lat, float)
    lon = np.asarray(lon, float)
    w = np.ones(lat.size) if weights is None else np.asarray(weights, float)
    if lat.size == 0 or w.sum() <= 0:
        return math.nan
    c_lat, c_lon = center_of_mass(lat, lon, w)
    d = haversine_km(lat, lon, c_lat, c_lon)
    return float(np.sqrt((w * d * d).sum() / w.sum()))


def top_tower_distance(lat, lon, top_lat, top_lon, weights=None) -> float:
    lat = np.asarray(lat, float)
    w = np.ones(lat.size) if weights is None else np.asarray(weights, float)
    if lat.size == 0 or w.sum() <= 0:
        return math.nan
    d = haversine_km(lat, np.asarray(lon, float), top_lat, top_lon)
    return float(np.sqrt((w * d * d).sum() / w.sum()))


def churn(previous: Iterable, current: Iterable) -> float:
    """Share of last month's contacts not contacted this month."""
    prev = set(previous)
    if not prev:
        return math.nan
    return len(prev - set(current)) / len(prev)


# ---------------------------------------------------------------------------
# monthly features


def _tower_frame(towers: Mapping[str, TowerGeo]) -> pd.DataFrame:
    return pd.DataFrame(
        {"lat": [t.lat for t in towers.values()], "lon": [t.lon for t in towers.values()]},
        index=pd.Index([t.tower_id for t in towers.values()], name="tower"),
    )


def monthly_features(
    records: pd.DataFrame,
    towers: Mapping[str, TowerGeo],
    town: TowerCluster,
    calendar: StudyCalendar,
    users: Iterable[str] | None = None,
    min_calls: int = 5,
    min_tower_calls: int = 3,
    legs: pd.DataFrame | None = None,
) -> pd.DataFrame:
    """One row per (user, non-gap month) with the nine metrics.

    Mobility columns are NaN unless the month has more than ``min_calls`` calls;
    ``r_g`` and ``r_1`` use only towers with more than ``min_tower_calls`` calls
    that month.  ``churn`` is NaN in a user's first month and whenever the
    previous month is absent or had no contacts.
    """
    legs = call_legs(records) if legs is None else legs
    if users is not None:
        users = sorted(set(map(str, users)))
        legs = legs[legs["user_id"].isin(users)]
    else:
        users = sorted(legs["user_id"].unique())
    day = calendar.local_days(legs["timestamp"])
    keep = ~calendar.gap_mask(day)
    legs = legs[keep].assign(month=day[keep].to_period("M"))
    months = [m for m in calendar.month_boundaries if not calendar.month_in_gap(m)]
    legs = legs[legs["month"].isin(months)]
    grid = pd.MultiIndex.from_product([users, months], names=["user_id", "month"])

    g = legs.groupby(["user_id", "month"], observed=True)
    out = pd.DataFrame(index=grid)
    out["calls"] = g.size().reindex(grid, fill_value=0)
    out["outgoing"] = g["outgoing"].sum().reindex(grid, fill_value=0).astype(np.int64)
    out["incoming"] = out["calls"] - out["outgoing"]

    known = legs["counterparty_tower"].notna()
    to_town = legs["counterparty_tower"].isin(town.tower_ids) & known
    tt = pd.DataFrame({"user_id": legs["user_id"], "month": legs["month"], "known": known, "town": to_town})
    tg = tt.groupby(["user_id", "month"], observed=True)[["known", "town"]].sum().reindex(grid, fill_value=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["to_town"] = np.where(tg["known"] > 0, tg["town"] / tg["known"].where(tg["known"] > 0, 1), np.nan)

    pairs = legs[["user_id", "month", "counterparty_id"]].drop_duplicates()
    out["contacts"] = pairs.groupby(["user_id", "month"], observed=True).size().reindex(grid, fill_value=0)
    out["churn"] = _churn_column(pairs, grid, months)

    mob = _mobility(legs, towers, grid, min_tower_calls)
    valid = out["calls"] > min_calls
    out["valid_mobility"] = valid
    for col in MOBILITY_METRICS:
        out[col] = mob[col].where(valid)
    out = out[["calls", "incoming", "outgoing", "to_town", "contacts", "churn", "towers", "r_g", "r_1", "valid_mobility"]]
    return out.reset_index()


def _churn_column(pairs: pd.DataFrame, grid: pd.MultiIndex, months: list[pd.Period]) -> pd.Series:
    nxt = {m: m + 1 for m in months if (m + 1) in set(months)}
    prev = pairs[pairs["month"].isin(list(nxt))].copy()
    prev["month"] = prev["month"].map(nxt)
    prev = prev.merge(pairs.assign(present=True), on=["user_id", "month", "counterparty_id"], how="left")
    prev["lost"] = prev["present"].isna()
    agg = prev.groupby(["user_id", "month"], observed=True)["lost"].agg(["sum", "size"])
    res = (agg["sum"] / agg["size"]).reindex(grid)
    return res.astype(float)


def _mobility(legs: pd.DataFrame, towers: Mapping[str, TowerGeo], grid: pd.MultiIndex, min_tower_calls: int) -> pd.DataFrame:
    tf = _tower_frame(towers)
    tc = legs.groupby(["user_id", "month", "tower"], observed=True).size().rename("n").reset_index()
    tc["tower"] = tc["tower"].astype(str)
    n_towers = tc.groupby(["user_id", "month"], observed=True).size().reindex(grid, fill_value=0)
    q = tc[tc["n"] > min_tower_calls].copy()
    res = pd.DataFrame(index=grid, data={"towers": n_towers.astype(float), "r_g": np.nan, "r_1": np.nan})
    if q.empty:
        return res
    q = q.join(tf, on="tower")
    if q["lat"].isna().any():
        missing = sorted(q.loc[q["lat"].isna(), "tower"].unique())
        raise KeyError(f"towers missing from registry: {missing[:5]}")
    # top tower: most calls, ties to the smallest tower id
    q = q.sort_values(["user_id", "month", "n", "tower"], ascending=[True, True, False, True], kind="mergesort")
    key = ["user_id", "month"]
    top = q.groupby(key, observed=True, sort=False).head(1).set_index(key)[["lat", "lon"]]
    vec = _unit(q["lat"].to_numpy(), q["lon"].to_numpy()) * q["n"].to_numpy()[:, None]
    vsum = pd.DataFrame(vec, columns=["x", "y", "z"], index=pd.MultiIndex.from_frame(q[key])).groupby(level=[0, 1], observed=True, sort=False).sum()
    c_lat, c_lon = _latlon(vsum.to_numpy())
    cm = pd.DataFrame({"c_lat": c_lat, "c_lon": c_lon}, index=vsum.index)
    qi = q.set_index(key)
    qi = qi.join(cm).join(top.rename(columns={"lat": "t_lat", "lon": "t_lon"}))
    w = qi["n"].to_numpy(float)
    d_cm = haversine_km(qi["lat"].to_numpy(), qi["lon"].to_numpy(), qi["c_lat"].to_numpy(), qi["c_lon"].to_numpy())
    d_top = haversine_km(qi["lat"].to_numpy(), qi["lon"].to_numpy(), qi["t_lat"].to_numpy(), qi["t_lon"].to_numpy())
    acc = pd.DataFrame({"w": w, "g": w * d_cm**2, "o": w * d_top**2}, index=qi.index).groupby(level=[0, 1], observed=True).sum()
    n_qual = q.groupby(key, observed=True).size().reindex(acc.index)
    # one qualifying tower: the centroid round trip leaves ~1e-10 km of noise
    res.loc[acc.index, "r_g"] = np.where(n_qual.to_numpy() == 1, 0.0, np.sqrt(acc["g"] / acc["w"]).to_numpy())
    res.loc[acc.index, "r_1"] = np.sqrt(acc["o"] / acc["w"]).to_numpy()
    return res


# ---------------------------------------------------------------------------
# normalisation and group series


@dataclass
class NormalizedFeatures:
    """Per user-month values relative to the baseline month ``t*``.

    Ratio metrics are divided by the user's baseline value; churn and to_town
    are differenced against it.  ``excluded`` maps metric to users dropped for a
    missing or zero baseline.
    """

    values: pd.DataFrame
    baseline: pd.Period
    excluded: dict[str, list[str]] = field(default_factory=dict)


def normalize_features(features: pd.DataFrame, baseline: pd.Period, metrics: Iterable[str] = METRICS) -> NormalizedFeatures:
    baseline = pd.Period(baseline, freq="M")
    f = features.set_index(["user_id", "month"]).sort_index()
    base = f.xs(baseline, level="month") if baseline in f.index.get_level_values("month") else f.iloc[0:0].droplevel(1)
    out = pd.DataFrame(index=f.index)
    excluded: dict[str, list[str]] = {}
    users = f.index.get_level_values("user_id")
    for m in metrics:
        b = base[m].reindex(users).to_numpy(float)
        if m in LEVEL_METRICS:
            bad = ~np.isfinite(b)
            vals = f[m].to_numpy(float) - b
        else:
            bad = ~np.isfinite(b) | (b == 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = f[m].to_numpy(float) / b
        vals[bad] = np.nan
        out[m] = vals
        excluded[m] = sorted(set(users[bad]))
        if excluded[m]:
            logger.info("metric %s: %d users lack a usable baseline", m, len(excluded[m]))
    return NormalizedFeatures(out.reset_index(), baseline, excluded)


def weighted_group_means(norm: NormalizedFeatures, weights: pd.Series, metrics: Iterable[str] = METRICS) -> pd.DataFrame:
    """Per-month weighted mean of each normalised metric; weights renormalised per month
    over users with a finite value."""
    v = norm.values
    w = v["user_id"].map(weights).fillna(0.0).to_numpy(float)
    rows = {}
    for m in metrics:
        x = v[m].to_numpy(float)
        ok = np.isfinite(x) & (w > 0)
        df = pd.DataFrame({"month": v["month"][ok], "wx": w[ok] * x[ok], "w": w[ok]})
        s = df.groupby("month").sum()
        rows[m] = s["wx"] / s["w"]
    return pd.DataFrame(rows).sort_index()


@dataclass
class GroupSeries:
    metric: str
    means: pd.DataFrame  # months x groups
    diffs: pd.DataFrame  # months x controls: treated minus control


def normalize_and_difference(
    features: pd.DataFrame,
    groups: Mapping[str, pd.Series],
    baseline: pd.Period,
    treated: str = "affected",
    metrics: Iterable[str] = METRICS,
) -> dict[str, GroupSeries]:
    """Weighted monthly group means of baseline-normalised metrics and the
    treated-minus-control difference series for every other group."""
    norm = normalize_features(features, baseline, metrics)
    means = {name: weighted_group_means(norm, w, metrics) for name, w in groups.items()}
    out = {}
    for m in metrics:
        frame = pd.DataFrame({name: mm[m] for name, mm in means.items()}).sort_index()
        diffs = pd.DataFrame({name: frame[treated] - frame[name] for name in groups if name != treated})
        out[m] = GroupSeries(m, frame, diffs)
    return out


def baseline_month(layoff_date: date) -> pd.Period:
    """The month immediately before the month containing the layoff."""
    return pd.Period(layoff_date, freq="M") - 1


# ---------------------------------------------------------------------------
# difference regressions


@dataclass(frozen=True)
class DiffModelFit:
    metric: str
    form: str
    variant: str
    control: str
    result: OLSResult

    @property
    def interaction(self) -> float:
        return self.result.params[3]

    @property
    def percent_change(self) -> float | None:
        return math.expm1(self.interaction) if self.form == "log" else None

    def as_dict(self) -> dict:
        t = self.result.table()
        row = t.iloc[3]
        out = {
            "metric": self.metric,
            "form": self.form,
            "variant": self.variant,
            "control": self.control,
            "nobs": self.result.nobs,
            "coef": {n: float(v) for n, v in zip(self.result.names, self.result.params)},
            "se": {n: float(v) for n, v in zip(self.result.names, self.result.bse)},
            "interaction": float(row["coef"]),
            "interaction_se": float(row["se"]),
            "ci66": [float(row["ci66_lo"]), float(row["ci66_hi"])],
            "ci95": [float(row["ci95_lo"]), float(row["ci95_hi"])],
        }
        if self.form == "log":
            out["percent_change"] = self.percent_change
        return out


def post_indicator(months: Iterable[pd.Period], layoff_date: date) -> pd.Series:
    """1 for months starting on/after the layoff, 0 for months ending before it,
    NaN for the month straddling the layoff."""
    months = list(months)
    ts = pd.Timestamp(layoff_date)
    vals = [1.0 if m.start_time >= ts else (0.0 if m.end_time < ts else np.nan) for m in months]
    return pd.Series(vals, index=months)


def pool_observations(
    norm: NormalizedFeatures,
    metric: str,
    posteriors: pd.Series,
    layoff_date: date,
    control: str = "town",
    country_users: Iterable[str] = (),
    threshold: float = 0.5,
) -> pd.DataFrame:
    """Stack user-month observations with the post dummy ``A``, layoff dummy ``U``
    and layoff probability ``w``.

    ``control="town"`` uses every classified town user; ``control="country"``
    uses users with ``p > threshold`` against the country sample (``U = w = 0``).
    The baseline month is dropped (its normalised value is fixed by construction).
    """
    v = norm.values[["user_id", "month", metric]].rename(columns={metric: "y"})
    v = v[np.isfinite(v["y"].to_numpy(float)) & (v["month"] != norm.baseline)]
    p = posteriors.astype(float)
    if control == "town":
        v = v[v["user_id"].isin(p.index)]
        w = v["user_id"].map(p).to_numpy(float)
    elif control == "country":
        treated = set(p.index[p > threshold])
        ctry = set(map(str, country_users))
        v = v[v["user_id"].isin(treated | ctry)]
        w = np.where(v["user_id"].isin(treated), v["user_id"].map(p).fillna(0.0), 0.0).astype(float)
    else:
        raise ValueError(f"unknown control group {control!r}")
    a = post_indicator(sorted(v["month"].unique()), layoff_date)
    v = v.assign(A=v["month"].map(a).to_numpy(float), w=w, U=(w > threshold).astype(float))
    return v[np.isfinite(v["A"].to_numpy())].reset_index(drop=True)


def fit_diff_model(obs: pd.DataFrame, form: str = "log", variant: str = "weight", metric: str = "", control: str = "") -> DiffModelFit:
    """OLS of ``y`` (or ``log y``) on ``1, A, G, A*G`` with ``G`` the layoff dummy
    (``variant="dummy"``) or probability (``variant="weight"``)."""
    if variant not in ("dummy", "weight"):
        raise ValueError(f"variant must be 'dummy' or 'weight', got {variant!r}")
    if form not in ("log", "level"):
        raise ValueError(f"form must be 'log' or 'level', got {form!r}")
    if obs["A"].nunique() < 2:
        raise ValueError("need observations both before and after the layoff")
    y = obs["y"].to_numpy(float)
    if form == "log":
        if np.any(y <= 0):
            raise ValueError("log-level model needs a strictly positive response")
        y = np.log(y)
    g = obs["U" if variant == "dummy" else "w"].to_numpy(float)
    a = obs["A"].to_numpy(float)
    X = np.column_stack([np.ones_like(a), a, g, a * g])
    gname = "U" if variant == "dummy" else "w"
    res = ols(X, y, ["const", "A", gname, f"A*{gname}"])
    return DiffModelFit(metric, form, variant, control, res)


def fit_all_metrics(
    norm: NormalizedFeatures,
    posteriors: pd.Series,
    layoff_date: date,
    country_users: Iterable[str] = (),
    variant: str = "weight",
    controls=("town", "country"),
) -> list[DiffModelFit]:
    """Table-I style sweep: every metric against each control group.

    Log-form metrics drop non-positive observations (zero counts) first.
    """
    fits = []
    country_users = list(country_users)
    for control in controls:
        if control == "country" and not country_users:
            continue
        for m in METRICS:
            obs = pool_observations(norm, m, posteriors, layoff_date, control, country_users)
            form = MODEL_FORM[m]
            if form == "log":
                obs = obs[obs["y"] > 0]
            fits.append(fit_diff_model(obs, form, variant, m, control))
    return fits


# ---------------------------------------------------------------------------
# percent change table


def percent_change_report(
    features: pd.DataFrame,
    groups: Mapping[str, pd.Series],
    layoff_date: date,
    metrics: Iterable[str] = METRICS,
    n_boot: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> pd.DataFrame:
    """Weighted mean of each metric over pre- and post-layoff months per group,
    percent change ``post/pre - 1`` and a user-resampling percentile bootstrap CI."""
    f = features.copy()
    a = post_indicator(sorted(f["month"].unique()), layoff_date)
    f["A"] = f["month"].map(a).to_numpy(float)
    f = f[np.isfinite(f["A"].to_numpy())]
    rng = np.random.default_rng(seed)
    rows = []
    for gname, weights in groups.items():
        sub = f[f["user_id"].isin(weights.index)]
        users = np.asarray(sorted(sub["user_id"].unique()), dtype=object)
        if users.size == 0:
            continue
        w = pd.Series(weights, dtype=float).reindex(users).fillna(0.0).to_numpy()
        idx = pd.Index(users)
        boot = rng.integers(0, users.size, size=(n_boot, users.size))
        flat = (boot + (np.arange(n_boot) * users.size)[:, None]).ravel()
        counts = np.bincount(flat, minlength=n_boot * users.size).reshape(n_boot, users.size).astype(float)
        for m in metrics:
            per = sub.groupby(["user_id", "A"])[m].mean().unstack("A").reindex(idx)
            pre = per.get(0.0, pd.Series(np.nan, index=idx)).to_numpy(float)
            post = per.get(1.0, pd.Series(np.nan, index=idx)).to_numpy(float)
            ok = np.isfinite(pre) & np.isfinite(post) & (w > 0)
            pc = _pct(pre, post, w, ok)
            bw = counts * (w * ok)[None, :]
            pre0, post0 = np.where(ok, pre, 0.0), np.where(ok, post, 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                bpc = (bw @ post0) / (bw @ pre0) - 1.0
            fin = bpc[np.isfinite(bpc)]
            lo, hi = np.percentile(fin, [50 * (1 - level), 50 * (1 + level)]) if fin.size else (math.nan, math.nan)
            rows.append({"group": gname, "metric": m, "pre": _wmean(pre, w, ok), "post": _wmean(post, w, ok),
                         "pct_change": pc, "ci_lo": lo, "ci_hi": hi, "n_users": int(ok.sum())})
    return pd.DataFrame(rows)


def _wmean(x, w, ok):
    return float((w[ok] * x[ok]).sum() / w[ok].sum()) if ok.any() and w[ok].sum() > 0 else math.nan


def _pct(pre, post, w, ok):
    a, b = _wmean(pre, w, ok), _wmean(post, w, ok)
    return b / a - 1.0 if a and np.isfinite(a) else math.nan
