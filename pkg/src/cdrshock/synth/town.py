"""Synthetic town CDR corpus with planted layoff ground truth.

Town residents fall in three segments: non-resident plant workers (share
``gamma``), resident workers (``mu``) and everyone else.  Each person has a daily
calling probability ``p_i``; on every day two independent Bernoulli draws decide
whether the person calls from the tower cluster and whether they call from
elsewhere.  The cluster rates are

=====================  ===========================  =====================
role                   before layoff                on/after layoff
=====================  ===========================  =====================
non-resident worker    ``psi * p_i``                ``0``
resident worker        ``p_i``                      ``(1 - psi) * p_i``
non-worker             ``p_i``                      ``p_i``
=====================  ===========================  =====================

so the expected number of distinct cluster callers per day follows
``gamma*psi*p + (1-gamma)*p`` before and ``mu*(1-psi)*p + (1-gamma-mu)*p``
after the layoff.  During the vacation interval workers behave as after the
layoff.  A sample of ``country`` users who never visit the town is generated
alongside as an outside control.

Active days are expanded to individual calls (one plus a Poisson overlay) with
towers, counterparties and timestamps so that the social and mobility metrics
have something to measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from ..cdr import StudyCalendar, TowerCluster, TowerGeo, make_records, write_towers

ROLES = ("nonresident_worker", "resident_worker", "nonworker", "country")
NONRES, RESIDENT, NONWORKER, COUNTRY = range(4)

_STREAM_POP, _STREAM_ACTIVITY, _STREAM_CALLS, _STREAM_LAYOUT = range(4)


def default_calendar() -> StudyCalendar:
    start = date(2006, 5, 15)
    return StudyCalendar(start, start + timedelta(days=449), gaps=((date(2006, 8, 14), date(2006, 9, 24)),))


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 15000
    gamma: float = 0.058
    mu: float = 0.03
    psi: float = 0.3
    p_bar: float = 0.9
    p_dispersion: float = 0.5
    layoff_date: date = date(2006, 12, 1)
    vacation: tuple[date, date] | None = (date(2006, 7, 24), date(2006, 8, 6))
    calendar: StudyCalendar = field(default_factory=default_calendar)
    market_share: float = 0.15
    seed: int = 0
    n_country: int = 1000
    # call-level texture; day-level statistics do not depend on these
    travel_rate: float = 0.15
    extra_calls: float = 1.5
    outgoing_share: float = 0.5
    unemployed_activity: float = 0.75
    unemployed_outgoing_share: float = 0.44
    work_contact_share: float = 0.25
    n_town_contacts: int = 10
    n_external_contacts: int = 15
    n_country_towers: int = 40
    home_share: float = 0.6
    home_contact_share: float = 0.2
    work_tower_share: float = 0.95
    unemployed_home_share: float = 0.7

    def __post_init__(self):
        if self.n_users < 0 or self.n_country < 0:
            raise ValueError("population sizes must be non-negative")
        if self.gamma < 0 or self.mu < 0 or self.gamma + self.mu > 1:
            raise ValueError(f"need gamma, mu >= 0 and gamma + mu <= 1 (got {self.gamma}, {self.mu})")
        if not 0 < self.psi < 1:
            raise ValueError(f"psi must lie in (0, 1), got {self.psi}")
        if not self.p_bar > 0:
            raise ValueError(f"p_bar must be positive, got {self.p_bar}")
        if self.p_dispersion < 0:
            raise ValueError("p_dispersion must be non-negative")
        if not 0 < self.market_share <= 1:
            raise ValueError(f"market_share must lie in (0, 1], got {self.market_share}")
        if not self.calendar.contains(self.layoff_date):
            raise ValueError("layoff_date outside calendar")
        if self.vacation is not None:
            a, b = self.vacation
            if not (a <= b < self.layoff_date):
                raise ValueError("vacation must be an interval ending before layoff_date")
        if not all(0 <= v <= 1 for v in (self.travel_rate, self.unemployed_activity, self.home_share, self.unemployed_home_share, self.home_contact_share, self.work_tower_share, self.work_contact_share)):
            raise ValueError("rates must lie in [0, 1]")

    def with_(self, **kw) -> SynthConfig:
        return replace(self, **kw)


def _rng(seed: int, stream: int, user: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, user)))


@dataclass(frozen=True)
class GroundTruth:
    """Planted per-user facts.  Arrays are read-only."""

    user_ids: np.ndarray
    role: np.ndarray
    p: np.ndarray
    observable: np.ndarray
    layoff_date: date
    vacation: tuple[date, date] | None

    def __post_init__(self):
        for a in (self.user_ids, self.role, self.p, self.observable):
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.user_ids)

    def role_name(self, i: int) -> str:
        return ROLES[int(self.role[i])]

    def ids_with(self, *roles: str, observable_only: bool = True) -> np.ndarray:
        codes = [ROLES.index(r) for r in roles]
        m = np.isin(self.role, codes)
        if observable_only:
            m &= self.observable
        return self.user_ids[m]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "user_id": self.user_ids,
                "role": [ROLES[r] for r in self.role],
                "p_i": self.p,
                "observable": self.observable.astype(int),
            }
        )

    def to_bytes(self) -> bytes:
        return self.to_frame().to_csv(index=False, float_format="%.17g").encode()


def draw_p(rng: np.random.Generator, n: int, p_bar: float, sigma: float) -> np.ndarray:
    """Mean-one log-normal multiplier on ``p_bar``, capped at 1 (it is a daily probability)."""
    mult = np.exp(sigma * rng.standard_normal(n) - 0.5 * sigma**2)
    return np.minimum(1.0, p_bar * mult)


def expected_p(p_bar: float, sigma: float) -> float:
    """Closed form ``E[min(1, p_bar * M)]`` for the capped log-normal multiplier."""
    if sigma == 0:
        return min(1.0, p_bar)
    # M = exp(sigma Z - sigma^2/2); cap binds when Z > z0
    z0 = (math.log(1.0 / p_bar) + 0.5 * sigma**2) / sigma
    below = p_bar * stats.norm.cdf(z0 - sigma)
    return float(below + stats.norm.sf(z0))


def variance_p(p_bar: float, sigma: float) -> float:
    if sigma == 0:
        return 0.0
    z0 = (math.log(1.0 / p_bar) + 0.5 * sigma**2) / sigma
    second = p_bar**2 * math.exp(sigma**2) * stats.norm.cdf(z0 - 2 * sigma) + stats.norm.sf(z0)
    return float(second - expected_p(p_bar, sigma) ** 2)


def generate_population(config: SynthConfig) -> GroundTruth:
    """Draw roles, calling probabilities and network membership."""
    rng = _rng(config.seed, _STREAM_POP)
    n, nc = config.n_users, config.n_country
    probs = [config.gamma, config.mu, max(0.0, 1.0 - config.gamma - config.mu)]
    role_town = rng.choice(3, size=n, p=np.asarray(probs) / sum(probs)) if n else np.zeros(0, int)
    p_town = draw_p(rng, n, config.p_bar, config.p_dispersion)
    obs_town = rng.random(n) < config.market_share if config.market_share < 1 else np.ones(n, bool)
    p_country = draw_p(rng, nc, config.p_bar, config.p_dispersion)
    width = max(5, len(str(max(n, nc))))
    ids = np.array([f"t{i:0{width}d}" for i in range(n)] + [f"c{i:0{width}d}" for i in range(nc)], dtype=object)
    return GroundTruth(
        user_ids=ids,
        role=np.concatenate([role_town, np.full(nc, COUNTRY)]).astype(np.int8),
        p=np.concatenate([p_town, p_country]),
        observable=np.concatenate([obs_town, np.ones(nc, bool)]),
        layoff_date=config.layoff_date,
        vacation=config.vacation,
    )


@dataclass
class DailyActivity:
    """Per-user day-level activity of observable users over all calendar days."""

    user_index: np.ndarray  # rows of GroundTruth
    days: pd.DatetimeIndex
    cluster: np.ndarray  # bool (users, days)
    elsewhere: np.ndarray
    cluster_rate: np.ndarray  # float (users, days), the planted probabilities
    elsewhere_rate: np.ndarray

    def cluster_volume(self, rows: np.ndarray | None = None, usable_only: bool = True, calendar: StudyCalendar | None = None) -> pd.Series:
        m = self.cluster if rows is None else self.cluster[rows]
        s = pd.Series(m.sum(axis=0).astype(np.int64), index=self.days, name="volume")
        if usable_only and calendar is not None:
            s = s[~calendar.gap_mask(self.days)]
        return s


def _phase_masks(config: SynthConfig, days: pd.DatetimeIndex) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    post = days >= pd.Timestamp(config.layoff_date)
    vac = np.zeros(len(days), bool)
    if config.vacation is not None:
        a, b = config.vacation
        vac = (days >= pd.Timestamp(a)) & (days <= pd.Timestamp(b))
    gap = config.calendar.gap_mask(days)
    return np.asarray(post), np.asarray(vac), gap


def planted_rates(truth: GroundTruth, config: SynthConfig, rows: np.ndarray, days: pd.DatetimeIndex):
    """Cluster and elsewhere daily probabilities for the given users, (users, days)."""
    post, vac, gap = _phase_masks(config, days)
    away = post | vac  # workers absent from the plant
    psi = config.psi
    role = truth.role[rows][:, None]
    p = truth.p[rows][:, None]
    D = len(days)
    c = np.zeros((len(rows), D))
    e = np.zeros((len(rows), D))
    nonres = role == NONRES
    res = role == RESIDENT
    nonw = role == NONWORKER
    ctry = role == COUNTRY
    c = np.where(nonres, np.where(away, 0.0, psi * p), c)
    c = np.where(res, np.where(away, (1 - psi) * p, p), c)
    c = np.where(nonw, np.broadcast_to(p, c.shape), c)
    home = (1 - psi) * p
    e = np.where(nonres, np.where(post, home * config.unemployed_activity, home), e)
    e = np.where(res | nonw, np.broadcast_to(config.travel_rate * p, e.shape), e)
    e = np.where(ctry, np.broadcast_to(p, e.shape), e)
    c[:, gap] = 0.0
    e[:, gap] = 0.0
    return c, e


def simulate_activity(truth: GroundTruth, config: SynthConfig) -> DailyActivity:
    """Bernoulli active-day draws for every observable user, one RNG stream per user."""
    rows = np.flatnonzero(truth.observable)
    days = config.calendar.all_days()
    c_rate, e_rate = planted_rates(truth, config, rows, days)
    D = len(days)
    u = np.empty((len(rows), 2, D))
    for k, i in enumerate(rows):
        u[k] = _rng(config.seed, _STREAM_ACTIVITY, int(i)).random((2, D))
    return DailyActivity(rows, days, u[:, 0] < c_rate, u[:, 1] < e_rate, c_rate, e_rate)


def planted_volume_mean(config: SynthConfig, post: bool = False) -> float:
    """Expected distinct cluster callers per day among observable town users,
    using the population mean of ``p_i``; the two branches of the town volume model."""
    g, m, psi = config.gamma, config.mu, config.psi
    pbar = expected_p(config.p_bar, config.p_dispersion)
    n = config.n_users * config.market_share
    if post:
        return n * (m * (1 - psi) * pbar + (1 - g - m) * pbar)
    return n * (g * psi * pbar + (1 - g) * pbar)


# ---------------------------------------------------------------------------
# towers


@dataclass(frozen=True)
class TownLayout:
    towers: dict[str, TowerGeo]
    cluster: TowerCluster
    town_tower: str
    plant_tower: str
    commuter_towers: tuple[str, ...]
    country_towers: tuple[str, ...]


def _offset(lat: float, lon: float, east_km: float, north_km: float) -> tuple[float, float]:
    dlat = north_km / 111.195
    dlon = east_km / (111.195 * math.cos(math.radians(lat)))
    return lat + dlat, lon + dlon


def build_layout(config: SynthConfig, center=(45.0, 10.0)) -> TownLayout:
    """Three-tower town cluster plus a commuter ring and national towers."""
    rng = _rng(config.seed, _STREAM_LAYOUT)
    lat0, lon0 = center
    towers = {"T_TOWN": TowerGeo("T_TOWN", lat0, lon0)}
    towers["T_PLANT"] = TowerGeo("T_PLANT", *_offset(lat0, lon0, 3.0, 0.0))
    towers["T_HILL"] = TowerGeo("T_HILL", *_offset(lat0, lon0, 1.5, 6.3))
    commuter = []
    for j in range(10):
        ang = 2 * math.pi * (j + rng.random() * 0.5) / 10
        r = 10.0 + 25.0 * rng.random()
        tid = f"R{j:02d}"
        towers[tid] = TowerGeo(tid, *_offset(lat0, lon0, r * math.cos(ang), r * math.sin(ang)))
        commuter.append(tid)
    country = []
    for j in range(config.n_country_towers):
        r = 45.0 + 200.0 * rng.random()
        ang = 2 * math.pi * rng.random()
        tid = f"N{j:03d}"
        towers[tid] = TowerGeo(tid, *_offset(lat0, lon0, r * math.cos(ang), r * math.sin(ang)))
        country.append(tid)
    cluster = TowerCluster("town", frozenset({"T_TOWN", "T_PLANT", "T_HILL"}))
    return TownLayout(towers, cluster, "T_TOWN", "T_PLANT", tuple(commuter), tuple(country))


# ---------------------------------------------------------------------------
# call expansion


@dataclass
class Corpus:
    records: pd.DataFrame
    truth: GroundTruth
    layout: TownLayout
    activity: DailyActivity
    calendar: StudyCalendar
    cluster_legs: np.ndarray  # per GroundTruth row: legs routed through the cluster

    def planted_regular(self, min_calls: int = 10) -> set[str]:
        """Users meeting the regular-user rule according to the planted activity."""
        cal = self.calendar
        layoff = pd.Period(self.truth.layoff_date, freq="M")
        months = self.activity.days.to_period("M")
        required = [m for m in cal.month_boundaries if m < layoff and not cal.month_in_gap(m)]
        out = set()
        for k, i in enumerate(self.activity.user_index):
            if self.cluster_legs[i] < min_calls:
                continue
            act_months = set(months[self.activity.cluster[k]])
            if all(m in act_months for m in required):
                out.add(self.truth.user_ids[i])
        return out


def _nearest(towers: dict[str, TowerGeo], ids) -> dict[str, tuple[str, ...]]:
    """For each tower in ``ids``, the others ordered by (equirectangular) distance."""
    out = {}
    for a in ids:
        ta = towers[a]
        k = math.cos(math.radians(ta.lat))
        dist = sorted((math.hypot(towers[b].lat - ta.lat, (towers[b].lon - ta.lon) * k), b) for b in ids if b != a)
        out[a] = tuple(b for _, b in dist)
    return out


def _pick(rng, options, n):
    return np.asarray(options, dtype=object)[rng.integers(0, len(options), n)]


def generate_calls(truth: GroundTruth, config: SynthConfig, activity: DailyActivity | None = None, layout: TownLayout | None = None) -> Corpus:
    """Expand planted activity into call records.

    Counterparties "in town" are drawn only among the caller's town contacts who
    are themselves active in the cluster that day, so the per-day cluster
    activity of every user is exactly the planted one.
    """
    activity = simulate_activity(truth, config) if activity is None else activity
    layout = build_layout(config) if layout is None else layout
    rows = activity.user_index
    n_rows = len(truth)
    row_to_k = np.full(n_rows, -1)
    row_to_k[rows] = np.arange(len(rows))
    days = activity.days.to_numpy().astype("datetime64[s]")
    post_mask, _, _ = _phase_masks(config, activity.days)

    town_rows = rows[truth.role[rows] != COUNTRY]
    cl_towers = sorted(layout.cluster.tower_ids)
    # fixed per-user geography and contact pools (layout stream keeps them independent of call draws)
    home = {}
    others = {}
    near = _nearest(layout.towers, layout.commuter_towers)
    for i in rows:
        g = _rng(config.seed, _STREAM_LAYOUT, int(i) + 1)
        r = truth.role[i]
        if r == NONRES:
            home[i] = layout.commuter_towers[g.integers(len(layout.commuter_towers))]
            others[i] = near[home[i]][:2]
        elif r == COUNTRY:
            home[i] = layout.country_towers[g.integers(len(layout.country_towers))]
            others[i] = tuple(_pick(g, layout.country_towers, 2))
        else:
            home[i] = layout.town_tower if g.random() < 0.8 else layout.plant_tower
            others[i] = tuple(_pick(g, layout.commuter_towers + layout.country_towers[:5], 3))

    cols = {k: [] for k in ("caller", "callee", "ctow", "etow", "ts")}
    cluster_leg_count = np.zeros(n_rows, np.int64)

    for i in rows:
        k = row_to_k[i]
        r = truth.role[i]
        uid = truth.user_ids[i]
        g = _rng(config.seed, _STREAM_CALLS, int(i))
        if r != COUNTRY and len(town_rows) > 1:
            pool = g.choice(town_rows[town_rows != i], size=min(config.n_town_contacts, len(town_rows) - 1), replace=False)
        else:
            pool = np.zeros(0, int)
        ext_ids = np.array([f"x{uid[1:]}{'c' if r == COUNTRY else ''}_{j:02d}" for j in range(config.n_external_contacts)], dtype=object)
        ext_tow = _pick(g, layout.country_towers if r == COUNTRY else layout.commuter_towers + layout.country_towers, len(ext_ids))
        off_ids = np.array([f"o{uid[1:]}_{j}" for j in range(3)], dtype=object)

        for seg in (0, 1):
            act = activity.cluster[k] if seg == 0 else activity.elsewhere[k]
            d_idx = np.flatnonzero(act)
            if d_idx.size == 0:
                continue
            n_calls = 1 + g.poisson(config.extra_calls, d_idx.size)
            leg_day = np.repeat(d_idx, n_calls)
            L = leg_day.size
            is_post = post_mask[leg_day]
            unemployed = (r == NONRES) & is_post
            out_share = np.where(unemployed, config.unemployed_outgoing_share, config.outgoing_share)
            outgoing = g.random(L) < out_share
            worker = r in (NONRES, RESIDENT)
            if seg == 0:
                lo, hi = (9, 17) if worker else (7, 23)
                main = layout.plant_tower if worker else home[i]
                my_tow = np.where(g.random(L) < (config.work_tower_share if worker else 0.8), main, _pick(g, cl_towers, L))
                town_share = config.work_contact_share if worker else 0.5
            else:
                lo, hi = (7, 23)
                share = np.where(unemployed, config.unemployed_home_share, config.home_share)
                my_tow = np.where(g.random(L) < share, home[i] if r in (NONRES, COUNTRY) else others[i][0], _pick(g, others[i], L))
                town_share = config.home_contact_share if r != COUNTRY else 0.0
            secs = g.integers(lo * 3600, hi * 3600, L)
            ts = days[leg_day] + secs.astype("timedelta64[s]")

            ext_j = g.integers(0, len(ext_ids), L)
            cp_id = ext_ids[ext_j]
            cp_tow = np.asarray(ext_tow, dtype=object)[ext_j]
            offnet = outgoing & (g.random(L) < 0.15)
            cp_id = np.where(offnet, off_ids[g.integers(0, len(off_ids), L)], cp_id)
            cp_tow = np.where(offnet, None, cp_tow)

            want_town = (g.random(L) < town_share) & ~offnet
            if pool.size and want_town.any():
                w = np.flatnonzero(want_town)
                avail = activity.cluster[row_to_k[pool]][:, leg_day[w]]
                score = g.random(avail.shape) * avail
                pick = np.argmax(score, axis=0)
                ok = score[pick, np.arange(w.size)] > 0
                w, pick = w[ok], pick[ok]
                crow = pool[pick]
                cp_id = cp_id.copy()
                cp_tow = cp_tow.copy()
                cp_id[w] = truth.user_ids[crow]
                cp_tow[w] = [layout.plant_tower if truth.role[c] in (NONRES, RESIDENT) else home[c] for c in crow]
                np.add.at(cluster_leg_count, crow, 1)

            if seg == 0:
                cluster_leg_count[i] += L
            cols["caller"].append(np.where(outgoing, uid, cp_id))
            cols["callee"].append(np.where(outgoing, cp_id, uid))
            cols["ctow"].append(np.where(outgoing, my_tow, cp_tow))
            cols["etow"].append(np.where(outgoing, cp_tow, my_tow))
            cols["ts"].append(ts)

    if cols["ts"]:
        cat = {k: np.concatenate(v) for k, v in cols.items()}
    else:
        cat = {k: np.zeros(0, object) for k in cols}
        cat["ts"] = np.zeros(0, "datetime64[s]")
    records = make_records(cat["caller"], cat["callee"], cat["ctow"], cat["etow"], cat["ts"])
    return Corpus(records, truth, layout, activity, config.calendar, cluster_leg_count)


def generate_corpus(config: SynthConfig) -> Corpus:
    truth = generate_population(config)
    return generate_calls(truth, config)


def write_corpus(records: pd.DataFrame, truth: GroundTruth, path, towers: dict[str, TowerGeo] | None = None) -> dict[str, Path]:
    """Write ``cdr.csv``, ``truth.csv`` (and ``towers.csv`` if given) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = {"cdr": path / "cdr.csv", "truth": path / "truth.csv"}
    write_cdr_csv(records, out["cdr"])
    out["truth"].write_bytes(truth.to_bytes())
    if towers is not None:
        out["towers"] = path / "towers.csv"
        write_towers(towers, out["towers"])
    return out


def write_cdr_csv(records: pd.DataFrame, path) -> None:
    df = pd.DataFrame(
        {
            "caller_id": records["caller_id"].astype(str),
            "callee_id": records["callee_id"].astype(str),
            "caller_tower": records["caller_tower"].astype(str),
            "callee_tower": records["callee_tower"].astype(object).where(records["callee_tower"].notna(), ""),
            "timestamp": pd.DatetimeIndex(records["timestamp"]).strftime("%Y-%m-%dT%H:%M:%SZ"),
        }
    )
    df.to_csv(path, index=False, lineterminator="\n")


def read_truth(path, layoff_date: date, vacation=None) -> GroundTruth:
    df = pd.read_csv(path, dtype={"user_id": str}, float_precision="round_trip")
    return GroundTruth(
        user_ids=df["user_id"].to_numpy(dtype=object),
        role=np.array([ROLES.index(r) for r in df["role"]], dtype=np.int8),
        p=df["p_i"].to_numpy(dtype=float),
        observable=df["observable"].to_numpy().astype(bool),
        layoff_date=layoff_date,
        vacation=vacation,
    )
