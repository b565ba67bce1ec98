"""Ordinary least squares through a column-pivoted QR factorisation."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class OLSResult:
    names: tuple[str, ...]
    params: np.ndarray
    bse: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray
    df_resid: int
    sigma2: float
    cov: np.ndarray

    @property
    def nobs(self) -> int:
        return self.resid.size

    @property
    def tvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.bse

    @property
    def pvalues(self) -> np.ndarray:
        return 2 * stats.t.sf(np.abs(self.tvalues), max(self.df_resid, 1))

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        q = stats.t.ppf(0.5 + level / 2, max(self.df_resid, 1))
        return np.column_stack([self.params - q * self.bse, self.params + q * self.bse])

    def __getitem__(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.bse[self.names.index(name)])

    def table(self, levels=(0.66, 0.95)) -> pd.DataFrame:
        out = pd.DataFrame({"coef": self.params, "se": self.bse, "t": self.tvalues, "p": self.pvalues}, index=list(self.names))
        for lv in levels:
            ci = self.conf_int(lv)
            tag = f"{int(round(lv * 100))}"
            out[f"ci{tag}_lo"] = ci[:, 0]
            out[f"ci{tag}_hi"] = ci[:, 1]
        return out


def ols(X, y, names: Sequence[str] | None = None, rtol: float | None = None) -> OLSResult:
    """Least-squares fit of ``y`` on the columns of ``X`` with classical standard errors.

    Raises :class:`RankDeficientError` naming the columns that add no rank.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite values in design or response")
    if n < k:
        raise RankDeficientError(names[n:])
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = (rtol if rtol is not None else max(n, k) * np.finfo(float).eps) * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < k or (diag.size and diag[0] == 0):
        raise RankDeficientError([names[j] for j in piv[rank:]])
    z = Q.T @ y
    beta_p = scipy.linalg.solve_triangular(R, z)
    beta = np.empty(k)
    beta[piv] = beta_p
    fitted = X @ beta
    resid = y - fitted
    df = n - k
    sigma2 = float(resid @ resid / df) if df > 0 else np.nan
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    cov_p = Rinv @ Rinv.T * sigma2
    cov = np.empty((k, k))
    cov[np.ix_(piv, piv)] = cov_p
    bse = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return OLSResult(names, beta, bse, resid, fitted, df, sigma2, cov)
