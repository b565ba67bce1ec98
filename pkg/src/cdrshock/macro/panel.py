"""Province-level panels: user sampling, month-over-month ratios, bootstrap
aggregation to province-quarters, sample-size stability and correlations."""

from __future__ import annotations

import logging
import math
import zlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

FEATURES = ("calls", "incoming", "outgoing", "contacts", "churn", "towers", "r_g")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key)))


def _key(label) -> int:
    """Stable integer key for a province id, independent of iteration order."""
    return zlib.crc32(str(label).encode())


def parse_quarter(text: str) -> pd.Period:
    text = str(text).strip()
    try:
        year, q = text.replace("-Q", "Q").split("Q")
        return pd.Period(year=int(year), quarter=int(q), freq="Q")
    except (ValueError, TypeError):
        raise ValueError(f"bad quarter {text!r}; expected YYYY-Qn") from None


def format_quarter(q: pd.Period) -> str:
    return f"{q.year}-Q{q.quarter}"


# ---------------------------------------------------------------------------
# panel container


@dataclass
class ProvincePanel:
    """Quarterly unemployment, national GDP and aggregated CDR features.

    ``features`` is indexed by ``(province_id, quarter)``; ``mask`` flags
    province-quarters excluded from every fit (missing survey quarter or too
    few sampled users).
    """

    unemployment: pd.Series  # (province_id, quarter) -> rate in [0, 1]
    gdp: pd.Series  # quarter -> index
    features: pd.DataFrame  # (province_id, quarter) x FEATURES
    ci: pd.DataFrame | None = None
    masked_quarters: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        u = self.unemployment.dropna()
        if ((u < 0) | (u > 1)).any():
            raise ValueError("unemployment rates must lie in [0, 1]")

    @property
    def provinces(self) -> list[str]:
        return sorted(self.unemployment.index.get_level_values(0).unique())

    @property
    def quarters(self) -> list[pd.Period]:
        return sorted(self.unemployment.index.get_level_values(1).unique())

    @property
    def feature_names(self) -> list[str]:
        return list(self.features.columns)

    def mask(self) -> pd.Series:
        """True for province-quarters that cannot be used."""
        idx = self.unemployment.index
        f = self.features.reindex(idx)
        bad = self.unemployment.isna() | f.isna().any(axis=1)
        bad |= pd.Series(idx.get_level_values(1).isin(list(self.masked_quarters)), index=idx)
        return bad

    def usable_features(self, provinces: Iterable[str] | None = None) -> pd.DataFrame:
        m = self.mask()
        f = self.features.reindex(m.index)[~m.to_numpy()]
        if provinces is not None:
            f = f[f.index.get_level_values(0).isin(list(provinces))]
        return f

    def with_features(self, features: pd.DataFrame, ci: pd.DataFrame | None = None) -> ProvincePanel:
        return ProvincePanel(self.unemployment, self.gdp, features, ci, self.masked_quarters)


def read_unemployment(path) -> pd.Series:
    df = pd.read_csv(path, dtype={"province_id": str, "quarter": str}, float_precision="round_trip")
    missing = {"province_id", "quarter", "rate"} - set(df.columns)
    if missing:
        raise ValueError(f"unemployment CSV lacks columns {sorted(missing)}")
    idx = pd.MultiIndex.from_arrays([df["province_id"], df["quarter"].map(parse_quarter)], names=["province_id", "quarter"])
    return pd.Series(df["rate"].to_numpy(float), index=idx, name="rate").sort_index()


def write_unemployment(rates: pd.Series, path) -> None:
    df = rates.rename("rate").reset_index()
    df["quarter"] = df["quarter"].map(format_quarter)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_gdp(path) -> pd.Series:
    df = pd.read_csv(path, dtype={"quarter": str}, float_precision="round_trip")
    return pd.Series(df["gdp_index"].to_numpy(float), index=pd.Index(df["quarter"].map(parse_quarter), name="quarter"), name="gdp_index").sort_index()


def write_gdp(gdp: pd.Series, path) -> None:
    df = pd.DataFrame({"quarter": [format_quarter(q) for q in gdp.index], "gdp_index": gdp.to_numpy(float)})
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


# ---------------------------------------------------------------------------
# sampling and ratios


def sample_users(rosters: Mapping[str, Sequence[str]], k: int = 3000, seed: int = 0) -> dict[str, list[str]]:
    """Uniform sample of ``k`` users per province without replacement.

    The generator for each province is keyed by the province id, so the result
    does not depend on iteration order.  Short rosters are taken whole.
    """
    out = {}
    for pid, roster in rosters.items():
        roster = list(roster)
        if len(roster) <= k:
            if len(roster) < k:
                logger.warning("province %s has %d users < k=%d; taking all", pid, len(roster), k)
            out[pid] = roster
            continue
        idx = np.sort(_rng(seed, _key(pid)).choice(len(roster), size=k, replace=False))
        out[pid] = [roster[i] for i in idx]
    return out


@dataclass
class RatioFeatures:
    ratios: pd.DataFrame
    exclusions: pd.DataFrame  # user_id, month, feature, reason

    def exclusion_counts(self) -> pd.Series:
        if self.exclusions.empty:
            return pd.Series(dtype=int)
        return self.exclusions.groupby(["feature", "reason"]).size()


def monthly_ratio_features(features: pd.DataFrame, names: Sequence[str] = FEATURES) -> RatioFeatures:
    """Month-over-month ratios ``y_t / y_{t-1}`` per user.

    ``features`` needs ``user_id``, ``month`` (monthly Period) and the feature
    columns; other key columns such as ``province_id`` are carried along.  A
    user's first month has no ratio.  A ratio is excluded (NaN, reported) when
    the previous month is missing (``"missing month"``), its value is zero
    (``"zero base"``) or either value is not finite (``"non-finite"``).
    """
    f = features.sort_values(["user_id", "month"], kind="mergesort").reset_index(drop=True)
    month = pd.PeriodIndex(f["month"], freq="M")
    same_user = f["user_id"].eq(f["user_id"].shift())
    first = ~same_user.to_numpy()
    prev_month = pd.Series(month).shift()
    consecutive = same_user.to_numpy() & (pd.Series(month) == prev_month + 1).to_numpy() if len(f) else np.zeros(0, bool)
    keys = [c for c in f.columns if c not in names]
    out = f[keys].copy()
    excl = []
    for name in names:
        y = f[name].to_numpy(float)
        y0 = np.roll(y, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = y / y0
        reason = np.full(len(f), "", dtype=object)
        reason[~first & ~consecutive] = "missing month"
        rest = consecutive
        reason[rest & (~np.isfinite(y) | ~np.isfinite(y0))] = "non-finite"
        reason[rest & np.isfinite(y) & (y0 == 0)] = "zero base"
        bad = (reason != "") | first
        r[bad] = np.nan
        out[name] = r
        hit = np.flatnonzero(reason != "")
        if hit.size:
            excl.append(pd.DataFrame({"user_id": f["user_id"].to_numpy()[hit], "month": month[hit], "feature": name, "reason": reason[hit]}))
    out = out[~first].reset_index(drop=True)
    exclusions = pd.concat(excl, ignore_index=True) if excl else pd.DataFrame(columns=["user_id", "month", "feature", "reason"])
    if len(exclusions):
        logger.info("ratio features: %d exclusions", len(exclusions))
    return RatioFeatures(out, exclusions)


# ---------------------------------------------------------------------------
# aggregation


def _quarter_of(month) -> pd.PeriodIndex:
    return pd.PeriodIndex(month, freq="M").asfreq("Q")


def bootstrap_mean_ci(x: np.ndarray, n_boot: int = 1000, level: float = 0.95, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Percentile bootstrap CI of column means of ``x`` (rows resampled; NaNs skipped per column)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    rng = np.random.default_rng(0) if rng is None else rng
    ok = np.isfinite(x)
    x0 = np.where(ok, x, 0.0)
    idx = rng.integers(0, n, size=(n_boot, n), dtype=np.int64)
    flat = (idx + (np.arange(n_boot) * n)[:, None]).ravel()
    counts = np.bincount(flat, minlength=n_boot * n).reshape(n_boot, n).astype(float)
    denom = float(n) if ok.all() else counts @ ok.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        boot = (counts @ x0) / denom
    a = 100 * (1 - level) / 2
    lo, hi = np.nanpercentile(boot, [a, 100 - a], axis=0)
    return lo, hi


def province_aggregate(
    ratios: pd.DataFrame,
    names: Sequence[str] = FEATURES,
    min_users: int = 100,
    n_boot: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    weight_col: str | None = None,
) -> pd.DataFrame:
    """Province-quarter means of user ratios with percentile bootstrap CIs.

    Each user's ratios are first averaged within the quarter (weighted by
    ``weight_col`` if given), then averaged over users.  Quarters with fewer
    than ``min_users`` users are returned with NaN features and ``masked=True``.
    Columns: features, ``<f>_lo``, ``<f>_hi``, ``n_users``, ``masked``.
    """
    quarter = _quarter_of(ratios["month"])
    w = ratios[weight_col].to_numpy(float) if weight_col else np.ones(len(ratios))
    names = list(names)
    vals = ratios[names].to_numpy(float)
    ok = np.isfinite(vals)
    p_code, p_lab = pd.factorize(ratios["province_id"], sort=True)
    q_code, q_lab = pd.factorize(quarter.asi8, sort=True)
    u_code, _ = pd.factorize(ratios["user_id"], sort=True)
    key = [p_code, q_code, u_code]
    sw = pd.DataFrame(np.where(ok, vals, 0.0) * w[:, None], columns=names).groupby(key).sum()
    sn = pd.DataFrame(ok * w[:, None], columns=names).groupby(key).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        user_q = sw / sn.where(sn > 0)
    q_periods = pd.PeriodIndex.from_ordinals(q_lab, freq="Q") if len(q_lab) else pd.PeriodIndex([], freq="Q")
    rows = []
    index = []
    for (pc, qc), block in user_q.groupby(level=[0, 1], sort=True):
        pid, q = p_lab[pc], q_periods[qc]
        x = block.to_numpy(float)
        n_users = int(np.isfinite(x).any(axis=1).sum())
        row = {"n_users": n_users, "masked": n_users < min_users}
        if row["masked"]:
            logger.warning("province %s quarter %s: %d users < %d; masked", pid, q, n_users, min_users)
            for j, name in enumerate(names):
                row[name] = row[f"{name}_lo"] = row[f"{name}_hi"] = np.nan
        else:
            mean = np.nanmean(x, axis=0)
            if n_boot > 0:
                lo, hi = bootstrap_mean_ci(x, n_boot, level, _rng(seed, _key(pid), q.ordinal & 0xFFFFFFFF))
            else:
                lo = hi = np.full(len(names), np.nan)
            for j, name in enumerate(names):
                row[name], row[f"{name}_lo"], row[f"{name}_hi"] = mean[j], lo[j], hi[j]
        rows.append(row)
        index.append((pid, q))
    cols = names + [f"{n}_{s}" for n in names for s in ("lo", "hi")] + ["n_users", "masked"]
    out = pd.DataFrame(rows, index=pd.MultiIndex.from_tuples(index, names=["province_id", "quarter"]), columns=cols)
    return out


def half_month_days(month: pd.Period, half: int) -> int:
    return 15 if half == 1 else month.days_in_month - 15


def _with_day_weights(ratios: pd.DataFrame) -> pd.DataFrame:
    if "half" not in ratios.columns:
        raise ValueError("half-quarter aggregation needs half-month rows (a 'half' column in {1, 2})")
    months = pd.PeriodIndex(ratios["month"], freq="M")
    half = ratios["half"].to_numpy()
    days = np.where(half == 1, 15, months.days_in_month - 15)
    return ratios.assign(days=days.astype(float))


def full_quarter_features(ratios_half: pd.DataFrame, **kw) -> pd.DataFrame:
    """Quarter aggregate from half-month rows using every day of the quarter."""
    return province_aggregate(_with_day_weights(ratios_half), weight_col="days", **kw)


def half_quarter_features(ratios_half: pd.DataFrame, **kw) -> pd.DataFrame:
    """Quarter aggregate using only the first month and the first half (days
    1-15) of the second month of each quarter."""
    r = _with_day_weights(ratios_half)
    months = pd.PeriodIndex(r["month"], freq="M")
    pos = (months.month - 1) % 3
    keep = (pos == 0) | ((pos == 1) & (r["half"].to_numpy() == 1))
    return province_aggregate(r[keep], weight_col="days", **kw)


# ---------------------------------------------------------------------------
# sample size stability


def rsd_curve(
    population: pd.DataFrame,
    k_grid: Sequence[int] = tuple(range(100, 2001, 100)),
    names: Sequence[str] = FEATURES,
    T: int = 10,
    seed: int = 0,
    with_se: bool = False,
):
    """Relative standard deviation of the province mean versus sample size.

    ``population`` has one row per user with ``province_id`` and feature
    columns.  For each province and ``k``, ``T`` samples without replacement
    give ``T`` mean estimates; RSD is their ``std(ddof=1) / mean``, averaged over
    provinces.  With ``with_se`` the standard error of that average across
    provinces is returned as a second frame.
    """
    names = list(names)
    k_grid = [int(k) for k in k_grid]
    per_prov = []
    for pid, block in population.groupby("province_id", sort=True):
        x = block[names].to_numpy(float)
        if x.shape[0] < max(k_grid):
            raise ValueError(f"province {pid} has {x.shape[0]} users < max k={max(k_grid)}")
        acc = np.zeros((len(k_grid), len(names)))
        for a, k in enumerate(k_grid):
            g = _rng(seed, _key(pid), k)
            est = np.stack([np.nanmean(x[g.choice(x.shape[0], size=k, replace=False)], axis=0) for _ in range(T)])
            mean = est.mean(axis=0)
            sd = est.std(axis=0, ddof=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                acc[a] = np.where(sd == 0, 0.0, sd / np.abs(mean))
        per_prov.append(acc)
    if not per_prov:
        raise ValueError("empty population")
    arr = np.stack(per_prov)
    idx = pd.Index(k_grid, name="k")
    out = pd.DataFrame(arr.mean(axis=0), index=idx, columns=names)
    if not with_se:
        return out
    se = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) if arr.shape[0] > 1 else np.zeros_like(arr[0])
    return out, pd.DataFrame(se, index=idx, columns=names)


# ---------------------------------------------------------------------------
# correlations


def demean_and_correlate(panel: ProvincePanel) -> pd.DataFrame:
    """Pearson correlation of province-demeaned features with demeaned unemployment."""
    m = panel.mask()
    u = panel.unemployment[~m]
    f = panel.features.reindex(u.index)
    counts = u.groupby(level=0).size()
    if (counts < 2).any():
        raise ValueError("need at least two quarters per province")
    ud = u - u.groupby(level=0).transform("mean")
    fd = f - f.groupby(level=0).transform("mean")
    rows = []
    for name in f.columns:
        x = fd[name].to_numpy(float)
        if np.ptp(x) == 0 or np.ptp(ud.to_numpy()) == 0:
            rows.append({"feature": name, "r": math.nan, "p_value": math.nan, "n": len(x), "note": "zero variance"})
            continue
        r, p = stats.pearsonr(x, ud.to_numpy(float))
        rows.append({"feature": name, "r": float(r), "p_value": float(p), "n": len(x), "note": ""})
    return pd.DataFrame(rows).set_index("feature")


def write_panel_features(features: pd.DataFrame, path: str | Path) -> None:
    df = features.reset_index()
    df["quarter"] = df["quarter"].map(format_quarter)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_panel_features(path, names: Sequence[str] = FEATURES) -> pd.DataFrame:
    """Inverse of :func:`write_panel_features`; masked rows come back as NaN."""
    df = pd.read_csv(path, dtype={"province_id": str, "quarter": str}, float_precision="round_trip")
    missing = {"province_id", "quarter", *names} - set(df.columns)
    if missing:
        raise ValueError(f"panel feature CSV lacks columns {sorted(missing)}")
    df["quarter"] = df["quarter"].map(parse_quarter)
    out = df.set_index(["province_id", "quarter"]).sort_index()
    if "masked" in out.columns:
        out.loc[out["masked"].astype(bool), list(names)] = np.nan
    return out
