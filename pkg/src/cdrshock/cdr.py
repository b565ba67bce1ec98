"""Call-detail-record ingestion, calendars, tower clusters and daily/monthly aggregation.

Records are held column-wise in a :class:`pandas.DataFrame` with the columns of
``CDR_COLUMNS``; :func:`iter_records` yields :class:`CallRecord` rows when a
per-record view is needed.  Everything downstream works on *legs*: one row per
(user, call) with the user's own tower, see :func:`call_legs`.
"""

from __future__ import annotations

import io
import logging
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CDR_COLUMNS = ("caller_id", "callee_id", "caller_tower", "callee_tower", "timestamp")
TOWER_COLUMNS = ("tower_id", "lat", "lon")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class CDRFormatError(ValueError):
    """Raised when an input file cannot be used at all."""


@dataclass(frozen=True)
class CallRecord:
    caller_id: str
    callee_id: str
    caller_tower: str
    callee_tower: str | None
    timestamp: datetime


@dataclass(frozen=True)
class TowerGeo:
    tower_id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"tower {self.tower_id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"tower {self.tower_id}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class TowerCluster:
    cluster_id: str
    tower_ids: frozenset[str]

    def __post_init__(self):
        if not self.tower_ids:
            raise ValueError(f"cluster {self.cluster_id!r} has no towers")
        object.__setattr__(self, "tower_ids", frozenset(self.tower_ids))

    def __contains__(self, tower_id) -> bool:
        return tower_id in self.tower_ids


def check_disjoint(clusters: Iterable[TowerCluster]) -> None:
    seen: dict[str, str] = {}
    for cl in clusters:
        for t in cl.tower_ids:
            if t in seen:
                raise ValueError(f"tower {t} belongs to clusters {seen[t]!r} and {cl.cluster_id!r}")
            seen[t] = cl.cluster_id


@dataclass(frozen=True)
class StudyCalendar:
    """Study window with excluded gap intervals.

    ``start`` and ``end`` are inclusive calendar dates, as are the gap bounds.
    Day boundaries are taken in UTC shifted by ``utc_offset_hours``.
    """

    start: date
    end: date
    gaps: tuple[tuple[date, date], ...] = ()
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError("calendar start must precede end")
        gaps = tuple((_as_date(a), _as_date(b)) for a, b in self.gaps)
        for a, b in gaps:
            if a > b or a < self.start or b > self.end:
                raise ValueError(f"gap {a}..{b} not inside {self.start}..{self.end}")
        object.__setattr__(self, "gaps", tuple(sorted(gaps)))

    @property
    def offset(self) -> pd.Timedelta:
        return pd.Timedelta(hours=self.utc_offset_hours)

    @property
    def window(self) -> tuple[pd.Timestamp, pd.Timestamp]:
        """UTC instants bounding the window, half-open ``[lo, hi)``."""
        lo = pd.Timestamp(self.start) - self.offset
        hi = pd.Timestamp(self.end) + pd.Timedelta(days=1) - self.offset
        return lo, hi

    def all_days(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, self.end, freq="D")

    def gap_mask(self, days: pd.DatetimeIndex | None = None) -> np.ndarray:
        days = self.all_days() if days is None else days
        mask = np.zeros(len(days), dtype=bool)
        for a, b in self.gaps:
            mask |= (days >= pd.Timestamp(a)) & (days <= pd.Timestamp(b))
        return mask

    def usable_days(self) -> pd.DatetimeIndex:
        days = self.all_days()
        return days[~self.gap_mask(days)]

    def is_gap(self, day) -> bool:
        d = _as_date(day)
        return any(a <= d <= b for a, b in self.gaps)

    @property
    def month_boundaries(self) -> list[pd.Period]:
        return list(pd.period_range(self.start, self.end, freq="M"))

    def month_in_gap(self, month: pd.Period) -> bool:
        """True when every in-window day of ``month`` lies inside a gap."""
        lo = max(month.start_time.date(), self.start)
        hi = min(month.end_time.date(), self.end)
        return any(a <= lo and hi <= b for a, b in self.gaps)

    def contains(self, day) -> bool:
        return self.start <= _as_date(day) <= self.end

    def local_days(self, timestamps) -> pd.DatetimeIndex:
        """Local calendar day (midnight timestamps) of each UTC instant."""
        ts = pd.DatetimeIndex(timestamps)
        return (ts + self.offset).floor("D")


def _as_date(value) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    if isinstance(value, pd.Timestamp):
        return value.date()
    return date.fromisoformat(str(value))


TowerRegistry = Mapping[str, TowerGeo]


def load_towers(source) -> dict[str, TowerGeo]:
    """Read a ``tower_id,lat,lon`` CSV into a registry keyed by tower id."""
    df = pd.read_csv(_open_text(source), dtype={"tower_id": str}, float_precision="round_trip")
    missing = set(TOWER_COLUMNS) - set(df.columns)
    if missing:
        raise CDRFormatError(f"tower file missing columns {sorted(missing)}")
    registry: dict[str, TowerGeo] = {}
    for tid, lat, lon in zip(df["tower_id"], df["lat"], df["lon"]):
        if tid in registry:
            raise CDRFormatError(f"duplicate tower id {tid}")
        registry[tid] = TowerGeo(tid, float(lat), float(lon))
    return registry


def write_towers(registry: TowerRegistry, path) -> None:
    rows = sorted(registry.values(), key=lambda t: t.tower_id)
    pd.DataFrame(
        {"tower_id": [t.tower_id for t in rows], "lat": [t.lat for t in rows], "lon": [t.lon for t in rows]}
    ).to_csv(path, index=False, float_format="%.6f")


@dataclass
class ParsedCDR:
    records: pd.DataFrame
    rejects: list[tuple[int, str]] = field(default_factory=list)
    n_rows: int = 0

    @property
    def reject_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, reason in self.rejects:
            out[reason] = out.get(reason, 0) + 1
        return out

    def __len__(self) -> int:
        return len(self.records)


def _open_text(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, (str, os.PathLike)):
        return source
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        head = source.read()
        if isinstance(head, bytes):
            head = head.decode("utf-8")
        return io.StringIO(head)
    raise TypeError(f"cannot read CSV from {type(source).__name__}")


def parse_cdr(
    source,
    registry: TowerRegistry,
    calendar: StudyCalendar | None = None,
    max_reject_fraction: float = 0.01,
) -> ParsedCDR:
    """Parse and validate a CDR CSV.

    Rows failing validation are returned in ``rejects`` as ``(row_number,
    reason)`` pairs, row numbers counting data rows from 1.  If the rejected
    share exceeds ``max_reject_fraction`` the whole file is refused.

    Valid records come back sorted by timestamp (stable for equal instants).
    """
    df = pd.read_csv(_open_text(source), dtype=str, keep_default_na=False)
    if tuple(df.columns) != CDR_COLUMNS:
        raise CDRFormatError(f"unexpected CDR header {list(df.columns)}; want {list(CDR_COLUMNS)}")
    n = len(df)
    reason = np.full(n, "", dtype=object)

    def flag(mask, why):
        mask = np.asarray(mask) & (reason == "")
        reason[mask] = why

    caller = df["caller_id"].str.strip()
    callee = df["callee_id"].str.strip()
    ctower = df["caller_tower"].str.strip()
    etower = df["callee_tower"].str.strip()
    ts = pd.to_datetime(df["timestamp"].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")

    flag((caller == "") | (callee == ""), "missing_id")
    flag(ts.isna(), "bad_timestamp")
    flag(caller == callee, "self_call")
    known = set(registry)
    flag(~ctower.isin(known), "unknown_tower")
    flag((etower != "") & ~etower.isin(known), "unknown_tower")
    if calendar is not None:
        lo, hi = calendar.window
        inside = (ts >= lo) & (ts < hi)
        flag(~inside.fillna(False).to_numpy(dtype=bool), "outside_window")

    bad = reason != ""
    rejects = [(int(i) + 1, str(reason[i])) for i in np.flatnonzero(bad)]
    if n and len(rejects) / n > max_reject_fraction:
        raise CDRFormatError(
            f"rejection fraction exceeded: {len(rejects)}/{n} rows rejected "
            f"(limit {max_reject_fraction:.2%})"
        )
    if rejects:
        logger.warning("rejected %d of %d CDR rows: %s", len(rejects), n, ParsedCDR(None, rejects).reject_counts)

    good = ~bad
    records = make_records(
        caller[good].to_numpy(),
        callee[good].to_numpy(),
        ctower[good].to_numpy(),
        etower[good].replace("", None).to_numpy(),
        ts[good].to_numpy(),
    )
    return ParsedCDR(records=records, rejects=rejects, n_rows=n)


def make_records(caller_id, callee_id, caller_tower, callee_tower, timestamp, sort=True) -> pd.DataFrame:
    """Assemble a record frame; string columns become categoricals."""
    df = pd.DataFrame(
        {
            "caller_id": pd.Categorical(caller_id),
            "callee_id": pd.Categorical(callee_id),
            "caller_tower": pd.Categorical(caller_tower),
            "callee_tower": pd.Categorical(callee_tower),
            "timestamp": pd.to_datetime(np.asarray(timestamp)).astype("datetime64[s]"),
        }
    )
    if sort and len(df):
        df = sort_records(df)
    return df


def sort_records(df: pd.DataFrame) -> pd.DataFrame:
    """Total order on records so shuffled inputs give identical frames."""
    keys = pd.DataFrame(
        {
            "timestamp": df["timestamp"].to_numpy(),
            "caller_id": df["caller_id"].astype(str).to_numpy(),
            "callee_id": df["callee_id"].astype(str).to_numpy(),
            "caller_tower": df["caller_tower"].astype(str).to_numpy(),
            "callee_tower": df["callee_tower"].astype(str).to_numpy(),
        }
    )
    order = keys.sort_values(list(keys.columns), kind="mergesort").index.to_numpy()
    return df.iloc[order].reset_index(drop=True)


def empty_records() -> pd.DataFrame:
    return make_records([], [], [], [], np.array([], dtype="datetime64[s]"))


def iter_records(records: pd.DataFrame) -> Iterator[CallRecord]:
    for a, b, ta, tb, ts in zip(
        records["caller_id"], records["callee_id"], records["caller_tower"],
        records["callee_tower"], records["timestamp"],
    ):
        yield CallRecord(str(a), str(b), str(ta), None if pd.isna(tb) else str(tb), ts.to_pydatetime())


def call_legs(records: pd.DataFrame) -> pd.DataFrame:
    """One row per (user, call) seen from that user's handset.

    Every record yields an outgoing leg for the caller at ``caller_tower``.
    On-network callees (``callee_tower`` present) also get an incoming leg at
    ``callee_tower``.  Columns: ``user_id, counterparty_id, tower,
    counterparty_tower, timestamp, outgoing``.
    """
    caller = records["caller_id"].astype(str).to_numpy()
    callee = records["callee_id"].astype(str).to_numpy()
    ctow = records["caller_tower"].astype(object).to_numpy()
    etow = records["callee_tower"].astype(object).to_numpy()
    ts = records["timestamp"].to_numpy()
    on_net = ~pd.isna(etow)
    out = pd.DataFrame(
        {
            "user_id": np.concatenate([caller, callee[on_net]]),
            "counterparty_id": np.concatenate([callee, caller[on_net]]),
            "tower": np.concatenate([ctow, etow[on_net]]),
            "counterparty_tower": np.concatenate([etow, ctow[on_net]]),
            "timestamp": np.concatenate([ts, ts[on_net]]),
            "outgoing": np.concatenate([np.ones(len(caller), bool), np.zeros(int(on_net.sum()), bool)]),
        }
    )
    return out


def cluster_legs(records: pd.DataFrame, cluster: TowerCluster, calendar: StudyCalendar) -> pd.DataFrame:
    """Legs whose own tower is in ``cluster``, with a ``day`` column; gap days removed."""
    legs = call_legs(records)
    legs = legs[legs["tower"].isin(cluster.tower_ids)]
    legs = legs.assign(day=calendar.local_days(legs["timestamp"]))
    return legs[~calendar.gap_mask(pd.DatetimeIndex(legs["day"]))]


def filter_regular_users(
    records: pd.DataFrame,
    cluster: TowerCluster,
    calendar: StudyCalendar,
    layoff_date,
    min_calls: int = 10,
) -> set[str]:
    """Users with at least ``min_calls`` cluster calls who were also seen in the
    cluster in every pre-layoff month (months wholly inside a gap are exempt)."""
    layoff_date = _as_date(layoff_date)
    if not calendar.contains(layoff_date):
        raise ValueError(f"layoff date {layoff_date} outside calendar")
    if len(records) == 0:
        return set()
    legs = cluster_legs(records, cluster, calendar)
    counts = legs.groupby("user_id").size()
    heavy = set(counts.index[counts >= min_calls])
    layoff_month = pd.Period(layoff_date, freq="M")
    required = [m for m in calendar.month_boundaries if m < layoff_month and not calendar.month_in_gap(m)]
    if not required:
        return heavy
    month = pd.DatetimeIndex(legs["day"]).to_period("M")
    seen = pd.DataFrame({"user_id": legs["user_id"].to_numpy(), "month": month})
    seen = seen[seen["month"].isin(required)].drop_duplicates()
    n_months = seen.groupby("user_id").size()
    regular = set(n_months.index[n_months == len(required)])
    return heavy & regular


def daily_cluster_volume(
    records: pd.DataFrame,
    cluster: TowerCluster,
    calendar: StudyCalendar,
    users: Iterable[str] | None = None,
) -> pd.Series:
    """Distinct users per usable day with at least one call through ``cluster``."""
    legs = cluster_legs(records, cluster, calendar)
    if users is not None:
        legs = legs[legs["user_id"].isin(set(users))]
    vol = legs.drop_duplicates(["user_id", "day"]).groupby("day").size()
    days = calendar.usable_days()
    return vol.reindex(days, fill_value=0).astype(np.int64).rename("volume")


def daily_cluster_calls(records: pd.DataFrame, cluster: TowerCluster, calendar: StudyCalendar) -> pd.Series:
    """Raw count of calls with either endpoint tower in ``cluster``, per usable day."""
    touch = records["caller_tower"].isin(cluster.tower_ids) | records["callee_tower"].isin(cluster.tower_ids)
    day = calendar.local_days(records.loc[touch, "timestamp"])
    counts = pd.Series(1, index=day).groupby(level=0).size()
    days = calendar.usable_days()
    return counts.reindex(days, fill_value=0).astype(np.int64).rename("calls")


def cluster_activity_matrix(
    records: pd.DataFrame,
    cluster: TowerCluster,
    calendar: StudyCalendar,
    users: Iterable[str] | None = None,
) -> pd.DataFrame:
    """Users x usable-days 0/1 frame: did the user call through the cluster that day."""
    legs = cluster_legs(records, cluster, calendar)
    days = calendar.usable_days()
    if users is None:
        users = sorted(legs["user_id"].unique())
    else:
        users = sorted(set(users))
        legs = legs[legs["user_id"].isin(set(users))]
    mat = np.zeros((len(users), len(days)), dtype=np.int8)
    if len(legs):
        ui = pd.Index(users).get_indexer(legs["user_id"])
        di = days.get_indexer(pd.DatetimeIndex(legs["day"]))
        mat[ui, di] = 1
    return pd.DataFrame(mat, index=pd.Index(users, name="user_id"), columns=days)


def monthly_user_calls(records: pd.DataFrame, user_id: str, calendar: StudyCalendar) -> dict[pd.Period, pd.DataFrame | None]:
    """Partition one user's legs by calendar month.

    Months wholly inside a gap map to ``None`` (absent); other months map to a
    possibly empty frame of legs.
    """
    legs = call_legs(records)
    legs = legs[legs["user_id"] == str(user_id)]
    month = calendar.local_days(legs["timestamp"]).to_period("M")
    out: dict[pd.Period, pd.DataFrame | None] = {}
    for m in calendar.month_boundaries:
        out[m] = None if calendar.month_in_gap(m) else legs[month == m]
    return out


def parse_date_interval(text: str) -> tuple[date, date]:
    a, b = text.split("..")
    return date.fromisoformat(a.strip()), date.fromisoformat(b.strip())


def day_offset(day, calendar: StudyCalendar) -> int:
    return (_as_date(day) - calendar.start).days


def date_at(offset: int, calendar: StudyCalendar) -> date:
    return calendar.start + timedelta(days=int(offset))
