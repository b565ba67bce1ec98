from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrshock.ols import RankDeficientError, ols

from . import oracles


@pytest.mark.parametrize("seed", range(10))
def test_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = rng.normal(size=50)
    ref = oracles.ols_normal_equations(X, y)
    assert np.max(np.abs(ols(X, y).params - ref)) < 1e-9


def test_noiseless_recovery():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 4))
    beta = np.array([1.0, -0.1, 0.05, -0.5])
    res = ols(X, X @ beta)
    assert np.max(np.abs(res.params - beta)) < 1e-12
    assert np.all(res.bse < 1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 60), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_residuals_orthogonal(n, k, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, k))
    if n <= k:
        return
    res = ols(X, rng.normal(size=n))
    assert np.all(np.abs(X.T @ res.resid) < 1e-8 * n)


def test_standard_errors_textbook():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = 2 + 0.5 * X[:, 1] + rng.normal(size=40)
    res = ols(X, y)
    s2 = res.resid @ res.resid / 38
    cov = s2 * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(res.bse, np.sqrt(np.diag(cov)), rtol=1e-10)
    t = res.table()
    assert list(t.columns) == ["coef", "se", "t", "p", "ci66_lo", "ci66_hi", "ci95_lo", "ci95_hi"]
    assert (t["ci95_lo"] < t["ci66_lo"]).all()


def test_rank_deficient():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficientError) as exc:
        ols(X, np.arange(10.0), ["const", "a", "b"])
    assert exc.value.columns
    with pytest.raises(ValueError):
        ols(np.ones((3, 1)), np.array([1.0, np.nan, 2.0]))
