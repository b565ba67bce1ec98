"""Pipeline configuration: a plain-text ``key = value`` file.

Grammar
-------
* One ``key = value`` pair per line; whitespace around both is ignored.
* ``#`` starts a comment (whole line or trailing); blank lines are skipped.
* Keys are case-sensitive and may be dotted (``calendar.start``).  Repeating a
  key or using an unknown key is an error.
* Values: dates ``YYYY-MM-DD``; intervals ``YYYY-MM-DD..YYYY-MM-DD``; lists are
  comma-separated; booleans ``true``/``false``; ``none`` clears an optional value.
* Relative paths are resolved against the directory holding the file.

Keys
----
=========================  ==========  ===============================================
key                        default     meaning
=========================  ==========  ===============================================
cdr                        -           CDR CSV (``caller_id,callee_id,...``)
towers                     -           tower CSV (``tower_id,lat,lon``)
truth                      -           optional ground-truth CSV (evaluation only)
unemployment               -           ``province_id,quarter,rate`` CSV
gdp                        -           ``quarter,gdp_index`` CSV
panel_features             -           province-quarter feature CSV
panel_features_half        -           same, half-quarter aggregation
user_ratios                -           per-user ratio CSV aggregated by ``forecast``
rsd_population             -           per-user feature CSV for ``rsd``
output                     ``out``     output directory
calendar.start/.end        -           inclusive study window
calendar.gaps              (none)      comma-separated intervals excluded as gaps
calendar.utc_offset_hours  0           fixed offset for day boundaries
cluster.<id>               -           comma-separated tower ids of a cluster
plant_cluster              first id    cluster used for break/classify/metrics
layoff_date                (detect)    skip detection and use this date
vacation                   (none)      pre-layoff interval for the held-out check
baseline_month             (auto)      ``YYYY-MM``; default month before layoff
gamma                      0.058       prior share of laid-off users
d                          0.29        expected drop in calling-day fraction
classify_threshold         0.5         affected if ``p_laidoff`` exceeds this
break_threshold            0.05        minimal relative SSE reduction
min_margin                 7           days excluded at each end of break scans
min_calls                  10          regular-user cluster-call minimum
mobility_min_calls         5           month needs more calls for mobility metrics
tower_min_calls            3           tower needs more calls to enter r_g, r_1
max_reject_fraction        0.01        malformed-row share that aborts parsing
n_country                  10000       size of the country control sample
k                          3000        users sampled per province
n_boot                     1000        bootstrap replicates
min_users                  100         users per province-quarter or masked
seed                       0           master seed
threads                    1           worker cap (never changes results)
forecast.families          all three   ``AR1,AR1_QUAD,AR1_GDP``
forecast.horizons          both        ``nowcast,ahead``
forecast.intercept         true        include an intercept
forecast.masked_quarters   (none)      quarters (``YYYY-Qn``) excluded from all fits
rsd.k_grid                 100..2000   comma-separated sample sizes
rsd.T                      10          repeats per sample size
rsd.population             20000       synthetic roster size per province
synth.<field>              -           any synthetic-town setting
province.<field>           -           any synthetic-province setting
=========================  ==========  ===============================================
"""

from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import pandas as pd

from .cdr import StudyCalendar, TowerCluster, parse_date_interval
from .macro.forecast import FAMILIES, HORIZONS
from .synth.province import ProvinceConfig
from .synth.town import SynthConfig


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _list(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _intervals(v: str) -> tuple[tuple[date, date], ...]:
    return tuple(parse_date_interval(x) for x in _list(v))


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _list(v))


_PATHS = ("cdr", "towers", "truth", "unemployment", "gdp", "panel_features", "panel_features_half", "user_ratios", "rsd_population", "output")

# key -> (parser, default)
_KEYS: dict[str, tuple] = {
    **{k: (str, None) for k in _PATHS},
    "calendar.start": (date.fromisoformat, None),
    "calendar.end": (date.fromisoformat, None),
    "calendar.gaps": (_intervals, ()),
    "calendar.utc_offset_hours": (float, 0.0),
    "plant_cluster": (str, None),
    "layoff_date": (date.fromisoformat, None),
    "vacation": (parse_date_interval, None),
    "baseline_month": (str, None),
    "gamma": (float, 0.058),
    "d": (float, 0.29),
    "classify_threshold": (float, 0.5),
    "break_threshold": (float, 0.05),
    "min_margin": (int, 7),
    "min_calls": (int, 10),
    "mobility_min_calls": (int, 5),
    "tower_min_calls": (int, 3),
    "max_reject_fraction": (float, 0.01),
    "n_country": (int, 10000),
    "k": (int, 3000),
    "n_boot": (int, 1000),
    "min_users": (int, 100),
    "seed": (int, 0),
    "threads": (int, 1),
    "forecast.families": (_list, FAMILIES),
    "forecast.horizons": (_list, HORIZONS),
    "forecast.intercept": (_bool, True),
    "forecast.masked_quarters": (_list, ()),
    "rsd.k_grid": (_ints, tuple(range(100, 2001, 100))),
    "rsd.T": (int, 10),
    "rsd.population": (int, 20000),
}

# documented ranges checked by validate()
_RANGES = {
    "gamma": (0.0, 1.0),
    "d": (0.0, 1.0),
    "classify_threshold": (0.0, 1.0),
    "break_threshold": (0.0, 1.0),
    "max_reject_fraction": (0.0, 1.0),
}


def _field_parser(cls, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if name not in fields or name == "calendar":
        raise ConfigError(f"unknown {cls.__name__} setting {name!r}")
    f = fields[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, date):
        return date.fromisoformat
    if name == "vacation":
        return lambda v: None if v.strip().lower() == "none" else parse_date_interval(v)
    if isinstance(default, tuple):
        if default and isinstance(default[0], float):
            return lambda v: tuple(float(x) for x in _list(v))
        return _list
    return str


def parse_value(key: str, raw: str):
    raw = raw.strip()
    if key.startswith("cluster."):
        ids = _list(raw)
        if not ids:
            raise ConfigError(f"{key}: empty tower list")
        return ids
    if key.startswith("synth."):
        parser = _field_parser(SynthConfig, key[6:])
    elif key.startswith("province."):
        parser = _field_parser(ProvinceConfig, key[9:])
    elif key in _KEYS:
        parser = _KEYS[key][0]
    else:
        raise ConfigError(f"unknown config key {key!r}")
    if raw.lower() == "none" and key not in ("synth.vacation",):
        return None
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def read_config_text(text: str, base: Path | None = None, origin: str = "<config>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        val = parse_value(key, raw)
        if key in _PATHS and val is not None and base is not None and not Path(val).is_absolute():
            val = str(base / val)
        out[key] = val
    return out


def read_config(path) -> dict:
    path = Path(path)
    return read_config_text(path.read_text(), path.parent, str(path))


@dataclass
class PipelineConfig:
    """Resolved settings; ``values`` holds every key with defaults filled in."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_layers(cls, *layers: Mapping) -> PipelineConfig:
        """Later layers win; ``None`` values in a later layer do not erase earlier ones."""
        vals = {k: d for k, (_, d) in _KEYS.items()}
        for layer in layers:
            for k, v in layer.items():
                if v is None and k in vals and vals[k] is not None and k not in _PATHS:
                    continue
                vals[k] = v
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def validate(self) -> None:
        for k, (lo, hi) in _RANGES.items():
            v = self.values.get(k)
            if v is not None and not lo <= v <= hi:
                raise ConfigError(f"{k}={v} outside [{lo}, {hi}]")
        # the posterior is undefined at these ends
        if self.values.get("gamma") in (0.0, 1.0):
            raise ConfigError("gamma must lie in (0, 1)")
        if self.values.get("d") == 0.0:
            raise ConfigError("d must be positive")
        for k in ("min_margin", "min_calls", "mobility_min_calls", "tower_min_calls", "k", "min_users", "rsd.T"):
            if self.values.get(k) is not None and self.values[k] < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.values.get("threads", 1) < 1:
            raise ConfigError("threads must be at least 1")
        for f in self.values.get("forecast.families") or ():
            if f not in FAMILIES:
                raise ConfigError(f"unknown forecast family {f!r}")
        for h in self.values.get("forecast.horizons") or ():
            if h not in HORIZONS:
                raise ConfigError(f"unknown forecast horizon {h!r}")
        if self.values.get("baseline_month"):
            try:
                pd.Period(self.values["baseline_month"], freq="M")
            except ValueError:
                raise ConfigError(f"bad baseline_month {self.values['baseline_month']!r}") from None

    # typed views -----------------------------------------------------------

    def calendar(self) -> StudyCalendar:
        s, e = self.values.get("calendar.start"), self.values.get("calendar.end")
        if s is None or e is None:
            raise ConfigError("calendar.start and calendar.end are required (or run the synth stage)")
        return StudyCalendar(s, e, tuple(self.values.get("calendar.gaps") or ()), float(self.values.get("calendar.utc_offset_hours") or 0.0))

    def clusters(self) -> dict[str, TowerCluster]:
        out = {}
        for k in sorted(self.values):
            if k.startswith("cluster.") and self.values[k]:
                cid = k[len("cluster."):]
                out[cid] = TowerCluster(cid, frozenset(self.values[k]))
        return out

    def plant_cluster(self) -> TowerCluster:
        cl = self.clusters()
        if not cl:
            raise ConfigError("no cluster.<id> defined (or run the synth stage)")
        cid = self.values.get("plant_cluster") or next(iter(cl))
        if cid not in cl:
            raise ConfigError(f"plant_cluster {cid!r} is not a defined cluster")
        return cl[cid]

    def synth_config(self) -> SynthConfig:
        kw = {k[6:]: v for k, v in self.values.items() if k.startswith("synth.")}
        kw.setdefault("seed", self.values["seed"])
        return SynthConfig(**kw)

    def province_config(self) -> ProvinceConfig:
        kw = {k[9:]: v for k, v in self.values.items() if k.startswith("province.")}
        kw.setdefault("seed", self.values["seed"])
        kw.setdefault("n_boot", self.values["n_boot"])
        kw.setdefault("min_users", self.values["min_users"])
        return ProvinceConfig(**kw)

    def canonical(self, exclude: Iterable[str] = ("output", "threads")) -> dict[str, str]:
        """String form of every setting, for manifests (paths excluded: their
        content is hashed separately)."""
        skip = set(exclude) | set(_PATHS)
        return {k: format_value(v) for k, v in sorted(self.values.items()) if k not in skip}


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, date):
        return v.isoformat()
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{a.isoformat()}..{b.isoformat()}" for a, b in v)
        if len(v) == 2 and all(isinstance(x, date) for x in v):
            return f"{v[0].isoformat()}..{v[1].isoformat()}"
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(values: Mapping, path, base: Path | None = None) -> None:
    """Write ``key = value`` lines (sorted); paths under ``base`` are made relative."""
    lines = []
    for k in sorted(values):
        v = values[k]
        if k in _PATHS and v is not None and base is not None:
            try:
                v = str(Path(v).resolve().relative_to(Path(base).resolve()))
            except ValueError:
                pass
        lines.append(f"{k} = {format_value(v)}")
    Path(path).write_text("\n".join(lines) + "\n")
