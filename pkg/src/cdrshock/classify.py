"""Bayesian layoff classifier on the drop in plant-area calling days.

For each user we compare the fraction of days with a call through the cluster
before and after the layoff (``dq = q_pre - q_post``) and weigh two Gaussian
hypotheses for ``dq``: no change (mean 0) and a laid-off worker (mean ``d``),
with prior ``gamma`` on the latter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
import pandas as pd
from scipy import special, stats

from .cdr import StudyCalendar

DEFAULT_GAMMA = 0.058
DEFAULT_D = 0.29
WINDOW_DAYS = 50
EXCLUSION_DAYS = 7
MIN_USABLE_DAYS = 25
Q_CLAMP = (0.01, 0.99)


class InsufficientData(ValueError):
    """Too few usable days in a comparison window."""


@dataclass(frozen=True)
class DqWindow:
    q_pre: float
    q_post: float
    dq: float
    sigma: float
    n_pre_days: int
    n_post_days: int

    @classmethod
    def from_counts(cls, active_pre: int, n_pre: int, active_post: int, n_post: int) -> DqWindow:
        if n_pre < 1 or n_post < 1:
            raise InsufficientData("empty window")
        q_pre, q_post = active_pre / n_pre, active_post / n_post
        return cls(q_pre, q_post, q_pre - q_post, pooled_sigma(q_pre, q_post, n_pre, n_post), n_pre, n_post)


def pooled_sigma(q_pre, q_post, n_pre=WINDOW_DAYS, n_post=WINDOW_DAYS):
    """Standard deviation of ``dq``; the q's are clamped to [0.01, 0.99] here only."""
    a = np.clip(q_pre, *Q_CLAMP)
    b = np.clip(q_post, *Q_CLAMP)
    return np.sqrt(a * (1 - a) / n_pre + b * (1 - b) / n_post)


def dq_windows(layoff_date: date, window: int = WINDOW_DAYS, exclusion: int = EXCLUSION_DAYS) -> tuple[tuple[date, date], tuple[date, date]]:
    """Inclusive (pre, post) windows: ``window`` days ending ``exclusion`` days
    before the layoff and ``window`` days starting ``exclusion`` days after it."""
    pre_end = layoff_date - timedelta(days=exclusion)
    post_start = layoff_date + timedelta(days=exclusion)
    return (
        (pre_end - timedelta(days=window - 1), pre_end),
        (post_start, post_start + timedelta(days=window - 1)),
    )


def _window_mask(days: pd.DatetimeIndex, span: tuple[date, date]) -> np.ndarray:
    return np.asarray((days >= pd.Timestamp(span[0])) & (days <= pd.Timestamp(span[1])))


def compute_dq(series: pd.Series, layoff_date: date, calendar: StudyCalendar | None = None, min_days: int = MIN_USABLE_DAYS) -> DqWindow:
    """Window statistics for one user's 0/1 daily cluster indicator.

    ``series`` is indexed by date; missing or NaN dates and calendar gap days
    do not count as usable.
    """
    s = pd.Series(series).dropna()
    days = pd.DatetimeIndex(s.index)
    vals = s.to_numpy(dtype=float)
    if calendar is not None:
        keep = ~calendar.gap_mask(days)
        days, vals = days[keep], vals[keep]
    pre, post = dq_windows(layoff_date)
    mp, mq = _window_mask(days, pre), _window_mask(days, post)
    n_pre, n_post = int(mp.sum()), int(mq.sum())
    if n_pre < min_days or n_post < min_days:
        raise InsufficientData(f"usable days pre={n_pre} post={n_post}, need {min_days}")
    return DqWindow.from_counts(int(vals[mp].sum()), n_pre, int(vals[mq].sum()), n_post)


def compute_dq_frame(activity: pd.DataFrame, layoff_date: date, min_days: int = MIN_USABLE_DAYS) -> tuple[pd.DataFrame, pd.Series]:
    """Vectorised :func:`compute_dq` over a users x usable-days frame.

    Returns ``(windows, excluded)`` where ``excluded`` maps user to reason.
    """
    days = pd.DatetimeIndex(activity.columns)
    pre, post = dq_windows(layoff_date)
    mp, mq = _window_mask(days, pre), _window_mask(days, post)
    n_pre, n_post = int(mp.sum()), int(mq.sum())
    x = activity.to_numpy(dtype=float)
    if n_pre < min_days or n_post < min_days:
        reason = f"usable days pre={n_pre} post={n_post}, need {min_days}"
        return _empty_windows(), pd.Series(reason, index=activity.index, name="reason")
    q_pre = x[:, mp].sum(axis=1) / n_pre
    q_post = x[:, mq].sum(axis=1) / n_post
    out = pd.DataFrame(
        {
            "q_pre": q_pre,
            "q_post": q_post,
            "dq": q_pre - q_post,
            "sigma": pooled_sigma(q_pre, q_post, n_pre, n_post),
            "n_pre_days": n_pre,
            "n_post_days": n_post,
        },
        index=activity.index,
    )
    return out, pd.Series(dtype=object, name="reason")


def _empty_windows() -> pd.DataFrame:
    return pd.DataFrame(columns=["q_pre", "q_post", "dq", "sigma", "n_pre_days", "n_post_days"])


def log_likelihood_ratio(dq, sigma, d: float = DEFAULT_D):
    """``log N(dq; d, sigma) - log N(dq; 0, sigma)``."""
    return stats.norm.logpdf(dq, loc=d, scale=sigma) - stats.norm.logpdf(dq, loc=0.0, scale=sigma)


def posterior_log_odds(dq, sigma, gamma: float = DEFAULT_GAMMA, d: float = DEFAULT_D):
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if d <= 0:
        raise ValueError(f"d must be positive, got {d}")
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    return math.log(gamma) - math.log1p(-gamma) + log_likelihood_ratio(dq, sigma, d)


def posterior_probability(dq, sigma, gamma: float = DEFAULT_GAMMA, d: float = DEFAULT_D):
    return special.expit(posterior_log_odds(dq, sigma, gamma, d))


@dataclass(frozen=True)
class LayoffPosterior:
    user_id: str
    window: DqWindow
    gamma_prior: float
    d: float
    p_laidoff: float

    @property
    def control_weight(self) -> float:
        return 1.0 - self.p_laidoff


def posterior_weight(window: DqWindow, gamma: float = DEFAULT_GAMMA, d: float = DEFAULT_D, user_id: str = "") -> LayoffPosterior:
    p = float(posterior_probability(window.dq, window.sigma, gamma, d))
    return LayoffPosterior(user_id, window, gamma, d, p)


def posterior_frame(windows: pd.DataFrame, gamma: float = DEFAULT_GAMMA, d: float = DEFAULT_D) -> pd.DataFrame:
    out = windows.copy()
    if len(out):
        out["p_laidoff"] = posterior_probability(out["dq"].to_numpy(float), out["sigma"].to_numpy(float), gamma, d)
    else:
        out["p_laidoff"] = pd.Series(dtype=float)
    out.index.name = "user_id"
    return out


def priors_from_break(level_pre: float, level_post: float, n_users: int, psi: float) -> tuple[float, float]:
    """Re-derive ``(gamma, d)`` from a community break fit, assuming no resident workers.

    The drop share ``s = gamma*psi / (gamma*psi + 1 - gamma)`` is solved for
    gamma; ``d`` is the worker's lost calling-day rate ``psi * p_bar`` with
    ``p_bar`` backed out of the pre-break level.
    """
    if level_pre <= 0 or n_users <= 0:
        raise ValueError("need a positive pre-break level and user count")
    s = (level_pre - level_post) / level_pre
    if s <= 0:
        raise ValueError("no drop at the break")
    gamma = s / (psi + s - s * psi)
    p_bar = level_pre / (n_users * (gamma * psi + 1 - gamma))
    return gamma, psi * min(p_bar, 1.0)


@dataclass
class Cohort:
    affected: set[str]
    town_weights: pd.Series  # 1 - p over the regular-user pool
    affected_weights: pd.Series  # p over the same pool
    country_sample: list[str] = field(default_factory=list)


def classify_cohort(
    posteriors: pd.DataFrame,
    threshold: float = 0.5,
    country_pool=(),
    n_country: int = 10_000,
    seed: int = 0,
) -> Cohort:
    """Affected set (``p > threshold``), town control weights and a seeded country sample."""
    p = posteriors["p_laidoff"].astype(float)
    affected = set(p.index[p > threshold])
    pool = sorted(set(map(str, country_pool)) - set(map(str, posteriors.index)))
    if len(pool) > n_country:
        rng = np.random.default_rng(seed)
        pool = sorted(rng.choice(np.asarray(pool, dtype=object), size=n_country, replace=False))
    return Cohort(affected, (1.0 - p).rename("weight"), p.rename("weight"), list(pool))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get half credit)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n1, n0 = int(labels.sum()), int((~labels).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("need both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass(frozen=True)
class VacationCheck:
    affected_drop: float
    control_drop: float
    diff_z: float
    p_value: float
    series: pd.DataFrame

    @property
    def ratio(self) -> float:
        return math.inf if self.control_drop <= 0 else self.affected_drop / self.control_drop


def vacation_check(
    posteriors: pd.DataFrame,
    activity: pd.DataFrame,
    vacation: tuple[date, date],
    layoff_date: date,
    top_fraction: float = 0.1,
) -> VacationCheck:
    """Compare the in-window drop in cluster calling between the top decile of
    layoff probability and the rest (weighted by ``1 - p``).

    The reference level is every pre-layoff usable day outside the vacation and
    outside the week before the layoff.  Drops are relative:
    ``1 - in_window / reference``.
    """
    a, b = vacation
    pre, post = dq_windows(layoff_date)
    if not (b < pre[0] or a > post[1]) or (a <= layoff_date <= b):
        raise ValueError(f"vacation window {a}..{b} overlaps the dq windows {pre[0]}..{post[1]}")
    if b >= layoff_date:
        raise ValueError("vacation window must precede the layoff")
    users = posteriors.index.intersection(activity.index)
    p = posteriors.loc[users, "p_laidoff"].astype(float)
    k = max(1, int(round(top_fraction * len(p))))
    order = p.sort_values(ascending=False, kind="mergesort").index
    top, rest = order[:k], order[k:]
    x = activity.loc[users]
    days = pd.DatetimeIndex(x.columns)
    in_win = _window_mask(days, vacation)
    ref = np.asarray(days < pd.Timestamp(layoff_date - timedelta(days=EXCLUSION_DAYS))) & ~in_win
    if not in_win.any() or not ref.any():
        raise ValueError("vacation or reference window has no usable days")

    def group(ids, w):
        m = x.loc[ids].to_numpy(float)
        w = np.asarray(w, float)
        w = w / w.sum() if w.sum() > 0 else np.full(len(w), 1 / len(w))
        daily = w @ m
        r_ref, r_in = m[:, ref].mean(axis=1), m[:, in_win].mean(axis=1)
        ref_level = float(w @ r_ref)
        drop = 1.0 - float(w @ r_in) / ref_level if ref_level > 0 else 0.0
        per_user = r_ref - r_in
        mean = float(w @ per_user)
        var = float(w @ (per_user - mean) ** 2) * float((w**2).sum())
        return daily, drop, mean, var

    d_top, drop_top, m_top, v_top = group(top, np.ones(len(top)))
    d_rest, drop_rest, m_rest, v_rest = group(rest, 1.0 - p.loc[rest].to_numpy())
    se = math.sqrt(v_top + v_rest)
    z = (m_top - m_rest) / se if se > 0 else 0.0
    series = pd.DataFrame({"top_decile": d_top, "control": d_rest}, index=days)
    return VacationCheck(drop_top, drop_rest, z, float(2 * stats.norm.sf(abs(z))), series)
