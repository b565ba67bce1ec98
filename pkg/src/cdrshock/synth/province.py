"""Synthetic province panel with a planted link between CDR features and
unemployment.

Each province's unemployment follows an AR(1) around its own mean.  The
quarterly innovation is the sum of six half-month shocks (a national part tied
to lagged GDP growth plus a province part).  Every half-month shock moves the
province's mean log month-over-month feature ratios along a loading vector
(social features strongly, mobility weakly, churn with the opposite sign), and
individual users scatter around the province value with lognormal noise.
Aggregating sampled users back to quarters gives the CDR panel; because the
signal arrives shock by shock, a half-quarter aggregate carries roughly half of
the quarter's information.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from ..macro.panel import FEATURES, ProvincePanel, _key, _rng, full_quarter_features, half_quarter_features

# per-feature parameters, FEATURES order:
# calls, incoming, outgoing, contacts, churn, towers, r_g
_LOADING = (0.049, 0.047, 0.049, 0.046, -0.047, 0.0245, 0.0196)
_PROVINCE_NOISE = (0.034, 0.036, 0.035, 0.037, 0.036, 0.036, 0.025)
# user-level lognormal sigma of one half-month ratio; r_g is by far the noisiest
_USER_SIGMA = (0.385, 0.385, 0.385, 0.385, 0.385, 0.385, 1.178)
_GDP_GROWTH = (0.6, 0.7, 0.5, 0.4, 0.3, -0.2, -1.5, -2.2, -1.8)  # % per quarter, 2007Q1..2009Q1

_STREAM_U, _STREAM_SIGNAL, _STREAM_USERS, _STREAM_RSD = range(4)


@dataclass(frozen=True)
class ProvinceConfig:
    n_provinces: int = 52
    first_quarter: str = "2007Q1"
    last_quarter: str = "2009Q1"
    masked_quarters: tuple[str, ...] = ("2007Q4",)
    users_per_province: int = 3000
    seed: int = 0
    rho: float = 0.8
    mean_rate: float = 0.08
    rate_dispersion: float = 0.02
    local_shock: float = 0.005  # sd of a province's quarterly innovation
    gdp_sensitivity: float = 0.0015  # unemployment rise per -1% lagged GDP growth
    survey_noise: float = 0.004
    gdp_growth: tuple[float, ...] = _GDP_GROWTH
    loading: tuple[float, ...] = _LOADING
    province_noise: tuple[float, ...] = _PROVINCE_NOISE
    user_sigma: tuple[float, ...] = _USER_SIGMA
    n_boot: int = 1000
    min_users: int = 100

    def __post_init__(self):
        for name in ("loading", "province_noise", "user_sigma"):
            if len(getattr(self, name)) != len(FEATURES):
                raise ValueError(f"{name} needs {len(FEATURES)} entries")
        if len(self.gdp_growth) != len(self.quarters):
            raise ValueError("gdp_growth needs one entry per quarter")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if self.n_provinces < 2 or self.users_per_province < 1:
            raise ValueError("need at least two provinces and one user per province")

    @property
    def quarters(self) -> list[pd.Period]:
        return list(pd.period_range(self.first_quarter, self.last_quarter, freq="Q"))

    @property
    def months(self) -> list[pd.Period]:
        return list(pd.period_range(self.quarters[0].asfreq("M", "s"), self.quarters[-1].asfreq("M", "e"), freq="M"))

    @property
    def province_ids(self) -> list[str]:
        return [f"P{j:02d}" for j in range(self.n_provinces)]

    def with_(self, **kw) -> ProvinceConfig:
        return replace(self, **kw)


@dataclass
class ProvinceTruth:
    base_rate: pd.Series  # province -> long-run mean
    latent: pd.Series  # (province, quarter) -> true rate before survey noise
    shocks: pd.DataFrame  # (province, half-month) -> innovation of that half-month
    signal: pd.DataFrame  # (province, half-month) x FEATURES province log-ratio means


@dataclass
class ProvinceSynth:
    config: ProvinceConfig
    panel: ProvincePanel
    half_features: pd.DataFrame
    truth: ProvinceTruth

    @property
    def half_panel(self) -> ProvincePanel:
        return self.panel.with_features(self.half_features[list(FEATURES)])


def _halves(months: list[pd.Period]) -> pd.DataFrame:
    return pd.DataFrame({"month": np.repeat(months, 2), "half": np.tile([1, 2], len(months))})


def gdp_series(config: ProvinceConfig) -> pd.Series:
    q = config.quarters
    base = q[0] - 1
    level = 100.0 * np.cumprod(1 + np.asarray(config.gdp_growth) / 100)
    return pd.Series(np.concatenate([[100.0], level]), index=pd.Index([base, *q], name="quarter"), name="gdp_index")


def _latent(config: ProvinceConfig):
    """Unemployment paths, half-month shocks and province feature signals."""
    quarters = config.quarters
    halves = _halves(config.months)
    n_h = len(halves)
    growth = np.asarray(config.gdp_growth)
    lagged = np.concatenate([[growth[0]], growth[:-1]])  # growth in quarter t-1
    national = -config.gdp_sensitivity * lagged
    h_quarter = np.repeat(np.arange(len(quarters)), 6)
    sd_half = config.local_shock / np.sqrt(6)
    load = np.asarray(config.loading)
    pnoise = np.asarray(config.province_noise)
    base, latent, shocks, signal = {}, {}, [], []
    for pid in config.province_ids:
        g = _rng(config.seed, _STREAM_U, _key(pid))
        c = float(np.clip(g.normal(config.mean_rate, config.rate_dispersion), 0.02, 0.3))
        base[pid] = c
        local = g.normal(0.0, sd_half, n_h)
        eta = local + national[h_quarter] / 6
        u_prev = c + g.normal(0.0, config.local_shock)
        for j, q in enumerate(quarters):
            u = c * (1 - config.rho) + config.rho * u_prev + eta[h_quarter == j].sum()
            latent[(pid, q)] = u
            u_prev = u
        s = _rng(config.seed, _STREAM_SIGNAL, _key(pid))
        f = -eta / sd_half  # standardised behavioural response to each shock
        z = f[:, None] * load[None, :] + s.normal(0.0, 1.0, (n_h, len(FEATURES))) * pnoise[None, :]
        shocks.append(pd.Series(eta, index=pd.MultiIndex.from_arrays([[pid] * n_h, halves["month"], halves["half"]])))
        signal.append(pd.DataFrame(z, columns=list(FEATURES), index=shocks[-1].index))
    latent = pd.Series(latent, name="latent")
    latent.index.names = ["province_id", "quarter"]
    shocks = pd.concat(shocks).rename("shock")
    signal = pd.concat(signal)
    for obj in (shocks, signal):
        obj.index.names = ["province_id", "month", "half"]
    return pd.Series(base, name="base_rate"), latent, shocks, signal


def province_user_ratios(config: ProvinceConfig, signal: pd.DataFrame, province_id: str, n_users: int | None = None, stream: int = _STREAM_USERS) -> pd.DataFrame:
    """Half-month ratio rows for one province's sampled users.

    Columns: ``province_id, user_id, month, half`` and the seven features.
    """
    n = config.users_per_province if n_users is None else n_users
    z = signal.loc[province_id].to_numpy(float)  # halves x features
    n_h, k = z.shape
    sig = np.asarray(config.user_sigma)
    g = _rng(config.seed, stream, _key(province_id))
    eps = g.standard_normal((n, n_h, k))
    vals = np.exp(z[None, :, :] + eps * sig - sig**2 / 2)
    idx = signal.loc[province_id].index
    out = pd.DataFrame(vals.reshape(n * n_h, k), columns=list(FEATURES))
    out.insert(0, "half", np.tile(idx.get_level_values("half").to_numpy(), n))
    out.insert(0, "month", np.tile(idx.get_level_values("month").to_numpy(), n))
    out.insert(0, "user_id", np.repeat(np.array([f"{province_id}u{i:05d}" for i in range(n)], dtype=object), n_h))
    out.insert(0, "province_id", province_id)
    return out


def generate_province_panel(config: ProvinceConfig | None = None, threads: int = 1) -> ProvinceSynth:
    """Full- and half-quarter CDR panels, unemployment and GDP.

    Provinces are independent (seeded by id), so ``threads`` only changes speed.
    """
    config = ProvinceConfig() if config is None else config
    base, latent, shocks, signal = _latent(config)
    g = _rng(config.seed, _STREAM_U, 0)
    rates = (latent + g.normal(0.0, config.survey_noise, len(latent))).clip(0.0, 1.0).rename("rate")
    kw = {"n_boot": config.n_boot, "seed": config.seed, "min_users": config.min_users}

    def one(pid):
        r = province_user_ratios(config, signal, pid)
        return full_quarter_features(r, **kw), half_quarter_features(r, **{**kw, "n_boot": 0})

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as ex:
        parts = list(ex.map(one, config.province_ids))
    full = pd.concat([a for a, _ in parts]).sort_index()
    half = pd.concat([b for _, b in parts]).sort_index()
    masked = frozenset(pd.Period(q, freq="Q") for q in config.masked_quarters)
    names = list(FEATURES)
    panel = ProvincePanel(rates, gdp_series(config), full[names], full.drop(columns=names), masked)
    return ProvinceSynth(config, panel, half, ProvinceTruth(base, latent, shocks, signal))


def rsd_population(config: ProvinceConfig | None = None, n_users: int = 20_000, month: str = "2008-06", signal: pd.DataFrame | None = None) -> pd.DataFrame:
    """One monthly ratio per user for a large roster in every province
    (day-weighted mean of the month's two halves)."""
    config = ProvinceConfig() if config is None else config
    if signal is None:
        signal = _latent(config)[3]
    m = pd.Period(month, freq="M")
    w1 = 15 / m.days_in_month
    parts = []
    for pid in config.province_ids:
        sub = signal.loc[(pid, m)]
        z = sub.to_numpy(float)  # 2 x features
        sig = np.asarray(config.user_sigma)
        g = _rng(config.seed, _STREAM_RSD, _key(pid))
        v = np.exp(z[None] + g.standard_normal((n_users, 2, len(FEATURES))) * sig - sig**2 / 2)
        vals = w1 * v[:, 0] + (1 - w1) * v[:, 1]
        df = pd.DataFrame(vals, columns=list(FEATURES))
        df.insert(0, "province_id", pid)
        parts.append(df)
    return pd.concat(parts, ignore_index=True)
