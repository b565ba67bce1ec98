"""Single mean-shift structural break estimation on daily call series.

The estimator scans every admissible break date; for a given date the
least-squares levels are just the two segment means, so the scan is an exact
grid search done with prefix sums.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from datetime import date

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class BreakFit:
    t_break: date
    level_pre: float
    level_post: float
    sse: float
    sse_null: float
    relative_reduction: float
    position: int
    n: int

    def as_dict(self) -> dict:
        return {
            "t_break": self.t_break.isoformat(),
            "level_pre": self.level_pre,
            "level_post": self.level_post,
            "sse": self.sse,
            "sse_null": self.sse_null,
            "relative_reduction": self.relative_reduction,
        }


def _clean(series: pd.Series) -> tuple[np.ndarray, pd.DatetimeIndex]:
    s = pd.Series(series).dropna()
    idx = pd.DatetimeIndex(s.index)
    return s.to_numpy(dtype=float), idx


def sse_profile(values: np.ndarray, min_margin: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """SSE of the two-mean model for every admissible break position.

    Position ``k`` means the post segment starts at ``values[k]``.  Returns
    ``(positions, sse)``.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    x = x - x.mean()
    c1 = np.concatenate([[0.0], np.cumsum(x)])
    c2 = np.concatenate([[0.0], np.cumsum(x * x)])
    k = np.arange(min_margin, n - min_margin + 1)
    k = k[(k > 0) & (k < n)]
    s_pre = c1[k]
    s_post = c1[n] - c1[k]
    sse = c2[n] - s_pre**2 / k - s_post**2 / (n - k)
    return k, np.maximum(sse, 0.0)


def _fit(values: np.ndarray, days: pd.DatetimeIndex, min_margin: int, threshold: float) -> BreakFit | None:
    n = values.size
    if n == 0:
        raise ValueError("series has no usable (non-gap) days")
    if n < 2 * min_margin + 2:
        raise ValueError(f"series too short: {n} usable days, need at least {2 * min_margin + 2}")
    k, prof = sse_profile(values, min_margin)
    return _finish(values, days, int(k[int(np.argmin(prof))]), threshold)


def fit_community_break(series: pd.Series, min_margin: int = 7, threshold: float = 0.05) -> BreakFit | None:
    """Fit one level shift to a daily volume series indexed by date.

    NaN entries (gap days) are skipped.  Candidate break dates exclude the
    first and last ``min_margin`` usable days; the earliest SSE minimiser wins.
    Returns ``None`` when the SSE reduction over a single mean is below
    ``threshold``.
    """
    values, days = _clean(series)
    return _fit(values, days, min_margin, threshold)


def fit_individual_break(series: pd.Series, min_margin: int = 7, threshold: float = 0.05) -> BreakFit | None:
    """Same estimator on one user's 0/1 daily cluster-call indicator; the levels
    are the pre/post daily calling probabilities."""
    values, days = _clean(series)
    if values.size and not np.all((values == 0) | (values == 1)):
        raise ValueError("individual series must be a 0/1 indicator")
    return _fit(values, days, min_margin, threshold)


def fit_individual_breaks(
    activity: pd.DataFrame, min_margin: int = 7, threshold: float = 0.05
) -> dict[str, BreakFit | None]:
    """Vectorised :func:`fit_individual_break` over the rows of a users x days frame."""
    x = activity.to_numpy(dtype=float)
    days = pd.DatetimeIndex(activity.columns)
    m, n = x.shape
    if n < 2 * min_margin + 2:
        raise ValueError(f"series too short: {n} usable days, need at least {2 * min_margin + 2}")
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    c1 = np.concatenate([np.zeros((m, 1)), np.cumsum(xc, axis=1)], axis=1)
    c2 = np.concatenate([np.zeros((m, 1)), np.cumsum(xc * xc, axis=1)], axis=1)
    k = np.arange(min_margin, n - min_margin + 1)
    k = k[(k > 0) & (k < n)]
    s_pre = c1[:, k]
    s_post = c1[:, [n]] - s_pre
    prof = c2[:, [n]] - s_pre**2 / k - s_post**2 / (n - k)
    best = np.argmin(prof, axis=1)
    out: dict[str, BreakFit | None] = {}
    for row, user in enumerate(activity.index):
        out[user] = _finish(x[row], days, int(k[best[row]]), threshold)
    return out


def _finish(values: np.ndarray, days: pd.DatetimeIndex, pos: int, threshold: float) -> BreakFit | None:
    pre, post = values[:pos], values[pos:]
    lp, lq = float(pre.mean()), float(post.mean())
    sse = float(np.sum((pre - lp) ** 2) + np.sum((post - lq) ** 2))
    sse_null = float(np.sum((values - values.mean()) ** 2))
    if sse_null <= 0:
        return None
    sse = min(sse, sse_null)
    rel = 1.0 - sse / sse_null
    if rel < threshold:
        return None
    return BreakFit(days[pos].date(), lp, lq, sse, sse_null, rel, pos, values.size)


def expected_break_drop(gamma: float, mu: float, psi: float, p_bar: float) -> tuple[float, float]:
    """Model-implied drop in daily cluster volume (per capita) and the worker
    percent change, ``((g+m)*psi*p, (g+m)*psi*p / (m*p + g*psi*p))``."""
    if gamma < 0 or mu < 0 or gamma + mu > 1:
        raise ValueError("need gamma, mu >= 0 and gamma + mu <= 1")
    if not 0 <= psi <= 1 or p_bar <= 0:
        raise ValueError("need 0 <= psi <= 1 and p_bar > 0")
    drop = (gamma + mu) * psi * p_bar
    denom = mu * p_bar + gamma * psi * p_bar
    if denom == 0:
        raise ZeroDivisionError("worker share is zero (gamma = mu = 0 or gamma = psi = mu = 0)")
    return drop, drop / denom


@dataclass(frozen=True)
class BreakHistogram:
    counts: pd.Series
    mode: date
    mode_share: float

    @property
    def n_fits(self) -> int:
        return int(self.counts.sum())

    def placebo_max(self, around: date, exclude_days: int = 7) -> int:
        """Largest count on dates more than ``exclude_days`` from ``around``."""
        idx = pd.DatetimeIndex(self.counts.index)
        far = np.abs((idx - pd.Timestamp(around)).days) > exclude_days
        sub = self.counts.to_numpy()[far]
        return int(sub.max()) if sub.size else 0


def break_date_histogram(fits: Iterable[BreakFit | None] | Mapping[str, BreakFit | None]) -> BreakHistogram:
    """Count fitted break dates; users without a significant break are skipped."""
    if isinstance(fits, Mapping):
        fits = fits.values()
    dates = [f.t_break for f in fits if f is not None]
    if not dates:
        raise ValueError("no break fits to histogram")
    counts = pd.Series(1, index=pd.DatetimeIndex(dates)).groupby(level=0).size().sort_index()
    top = counts.max()
    mode = counts.index[np.flatnonzero(counts.to_numpy() == top)[0]].date()
    return BreakHistogram(counts.rename("fits"), mode, float(top / counts.sum()))
