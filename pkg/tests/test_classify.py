from __future__ import annotations

import math
from datetime import date, timedelta

import mpmath as mp
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cdrshock.classify import (
    DqWindow,
    InsufficientData,
    classify_cohort,
    compute_dq,
    compute_dq_frame,
    dq_windows,
    pooled_sigma,
    posterior_log_odds,
    posterior_probability,
    posterior_weight,
    priors_from_break,
    roc_auc,
    vacation_check,
)

LAYOFF = date(2006, 12, 1)

# 50-digit evaluation of gamma*N(dq; d, s) / (gamma*N(dq; d, s) + (1-gamma)*N(dq; 0, s))
ORACLE_P = 0.99824243592341305870007584125658918289678259062742


def window_series(active_pre, active_post, layoff=LAYOFF):
    pre, post = dq_windows(layoff)
    days = pd.date_range(pre[0] - timedelta(days=20), post[1] + timedelta(days=20))
    s = pd.Series(0.0, index=days)
    s[pd.date_range(*pre)[:active_pre]] = 1.0
    s[pd.date_range(*post)[:active_post]] = 1.0
    return s


def test_windows_are_fifty_days():
    pre, post = dq_windows(LAYOFF)
    assert pre == (date(2006, 10, 6), date(2006, 11, 24))
    assert post == (date(2006, 12, 8), date(2007, 1, 26))


def test_counts():
    w = compute_dq(window_series(25, 5), LAYOFF)
    assert (w.q_pre, w.q_post) == (0.5, 0.1)
    assert w.dq == pytest.approx(0.4, abs=1e-15)
    w = compute_dq(window_series(30, 30), LAYOFF)
    assert w.dq == 0.0


def test_sigma_clamp():
    w = compute_dq(window_series(50, 0), LAYOFF)
    assert w.dq == 1.0
    assert w.sigma == pytest.approx(math.sqrt(2 * 0.0099 / 50), abs=1e-15)
    assert round(w.sigma, 4) == 0.0199


def test_too_few_days():
    s = window_series(10, 10).iloc[::3]
    with pytest.raises(InsufficientData):
        compute_dq(s, LAYOFF)


def test_frame_matches_scalar():
    rng = np.random.default_rng(0)
    base = window_series(0, 0)
    act = pd.DataFrame((rng.random((20, len(base))) < 0.4).astype(np.int8), columns=base.index, index=[f"u{i}" for i in range(20)])
    frame, excluded = compute_dq_frame(act, LAYOFF)
    assert excluded.empty
    for u in act.index:
        w = compute_dq(act.loc[u], LAYOFF)
        assert frame.loc[u, "dq"] == w.dq and frame.loc[u, "sigma"] == w.sigma


def test_posterior_oracle():
    w = DqWindow(0.5, 0.1, 0.4, 0.09, 50, 50)
    p = posterior_weight(w, 0.058, 0.29).p_laidoff
    assert abs(p - ORACLE_P) < 1e-12


def test_posterior_oracle_recomputed():
    mp.mp.dps = 50

    def npdf(x, m, s):
        return mp.exp(-((x - m) ** 2) / (2 * s**2)) / (s * mp.sqrt(2 * mp.pi))

    for dq, s in ((0.1, 0.05), (0.2, 0.12), (-0.1, 0.08), (0.29, 0.2)):
        g, d = mp.mpf("0.058"), mp.mpf("0.29")
        a = g * npdf(mp.mpf(dq), d, mp.mpf(s))
        b = (1 - g) * npdf(mp.mpf(dq), 0, mp.mpf(s))
        assert abs(float(posterior_probability(dq, s)) - float(a / (a + b))) < 1e-12


def test_midpoint_gives_prior():
    assert posterior_probability(0.145, 0.07, 0.058, 0.29) == pytest.approx(0.058, abs=1e-15)


def test_limits():
    assert posterior_probability(-5.0, 0.05) < 1e-200
    assert posterior_probability(0.1, 0.05, gamma=1e-12) < 1e-12
    assert posterior_probability(0.145, 0.05, gamma=1 - 1e-12) > 1 - 1e-9
    with pytest.raises(ValueError):
        posterior_probability(0.1, 0.05, gamma=0.0)
    with pytest.raises(ValueError):
        posterior_probability(0.1, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(0.01, 0.5), st.floats(0.001, 0.999), st.floats(0.01, 1.0))
def test_log_odds_closed_form(dq, sigma, gamma, d):
    expect = math.log(gamma / (1 - gamma)) + (d * dq - d * d / 2) / sigma**2
    assert posterior_log_odds(dq, sigma, gamma, d) == pytest.approx(expect, rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 0.5), st.floats(0.02, 0.3))
def test_monotone_in_dq(dq, step, sigma):
    a = posterior_log_odds(dq, sigma)
    b = posterior_log_odds(dq + step, sigma)
    assert b >= a


def test_pooled_sigma_vectorised():
    s = pooled_sigma(np.array([0.0, 0.5]), np.array([1.0, 0.5]))
    assert s[0] == pytest.approx(math.sqrt(2 * 0.0099 / 50))
    assert s[1] == pytest.approx(math.sqrt(0.5 / 50))


def test_cohort():
    post = pd.DataFrame({"p_laidoff": [0.0, 0.0]}, index=["a", "b"])
    c = classify_cohort(post)
    assert c.affected == set()
    post = pd.DataFrame({"p_laidoff": [0.2, 0.7, 0.999]}, index=["a", "b", "c"])
    c = classify_cohort(post, 0.5, country_pool=[f"k{i}" for i in range(50)] + ["a"], n_country=10, seed=1)
    assert c.affected == {"b", "c"}
    assert c.town_weights["a"] == pytest.approx(0.8)
    assert len(c.country_sample) == 10 and "a" not in c.country_sample
    assert classify_cohort(post, 1.0).affected == set()
    again = classify_cohort(post, 0.5, country_pool=[f"k{i}" for i in range(50)], n_country=10, seed=1)
    assert again.country_sample == c.country_sample


def test_roc_auc():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1], [1])


def test_priors_from_break_roundtrip():
    gamma, psi, p_bar, n = 0.058, 0.3, 0.9, 2000
    pre = n * p_bar * (gamma * psi + 1 - gamma)
    post = n * p_bar * (1 - gamma)
    g, d = priors_from_break(pre, post, n, psi)
    assert g == pytest.approx(gamma, rel=1e-12)
    assert d == pytest.approx(psi * p_bar, rel=1e-12)


def _vacation_setup(planted: bool):
    rng = np.random.default_rng(4)
    days = pd.date_range("2006-06-01", "2007-02-28")
    n = 200
    p = np.where(np.arange(n) < 20, 0.95, 0.02)
    rate = np.full((n, len(days)), 0.6)
    if planted:
        vac = (days >= "2006-07-24") & (days <= "2006-08-06")
        rate[:20, vac] = 0.0
    act = pd.DataFrame((rng.random(rate.shape) < rate).astype(np.int8), index=[f"u{i:03d}" for i in range(n)], columns=days)
    post = pd.DataFrame({"p_laidoff": p}, index=act.index)
    return post, act


def test_vacation_planted_and_null():
    post, act = _vacation_setup(True)
    v = vacation_check(post, act, (date(2006, 7, 24), date(2006, 8, 6)), LAYOFF)
    assert v.affected_drop > 0.9 and abs(v.control_drop) < 0.05 and v.p_value < 1e-6
    post, act = _vacation_setup(False)
    v = vacation_check(post, act, (date(2006, 7, 24), date(2006, 8, 6)), LAYOFF)
    assert v.p_value > 0.01


def test_vacation_inside_window_rejected():
    post, act = _vacation_setup(True)
    with pytest.raises(ValueError):
        vacation_check(post, act, (date(2006, 10, 20), date(2006, 11, 2)), LAYOFF)
