"""Principal components of z-scored features (correlation-matrix PCA)."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class PcaResult:
    """Fitted correlation-matrix PCA.

    ``loadings[:, j]`` is component ``j``; every component is signed so that its
    loading on ``sign_feature`` is non-negative.
    """

    names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    eigenvalues: np.ndarray
    loadings: np.ndarray
    n_rows: int
    sign_feature: str

    @property
    def explained(self) -> np.ndarray:
        return self.eigenvalues / self.eigenvalues.sum()

    @property
    def retained(self) -> int:
        """Number of components passing the Kaiser criterion (eigenvalue > 1)."""
        return int(np.sum(self.eigenvalues > 1.0))

    def loadings_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.loadings, index=list(self.names), columns=[f"PC{j + 1}" for j in range(len(self.names))])

    def summary(self) -> pd.DataFrame:
        ev = self.eigenvalues
        return pd.DataFrame(
            {"eigenvalue": ev, "explained": self.explained, "cumulative": np.cumsum(self.explained), "kaiser": ev > 1.0},
            index=[f"PC{j + 1}" for j in range(ev.size)],
        )

    def as_dict(self) -> dict:
        return {
            "features": list(self.names),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained": self.explained.tolist(),
            "retained": self.retained,
            "loadings": self.loadings.tolist(),
            "n_rows": self.n_rows,
        }


def _matrix(X, names):
    if isinstance(X, pd.DataFrame):
        names = tuple(X.columns) if names is None else tuple(names)
        X = X[list(names)].to_numpy(float)
    else:
        X = np.asarray(X, dtype=float)
        names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    return X, names


def pca_fit(X, names: Sequence[str] | None = None, sign_feature: str = "calls", min_rows: int = 8) -> PcaResult:
    """Eigendecomposition of the feature correlation matrix.

    Columns are z-scored with the sample standard deviation, eigenvalues sorted
    in descending order.  Raises ``ValueError`` on masked (non-finite) entries,
    too few rows or a constant column.
    """
    X, names = _matrix(X, names)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("need a 2-D feature matrix")
    n, k = X.shape
    if n < max(min_rows, 2):
        raise ValueError(f"need at least {max(min_rows, 2)} rows, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains masked/non-finite entries")
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    const = [names[j] for j in range(k) if not scale[j] > 0]
    if const:
        raise ValueError(f"constant feature column(s): {', '.join(const)}")
    Z = (X - mean) / scale
    C = Z.T @ Z / (n - 1)
    C = (C + C.T) / 2
    np.fill_diagonal(C, 1.0)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    s = names.index(sign_feature) if sign_feature in names else 0
    for j in range(k):
        col = vecs[:, j]
        ref = col[s] if abs(col[s]) > 1e-12 else col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        if ref < 0:
            vecs[:, j] = -col
    return PcaResult(names, mean, scale, vals, vecs, n, sign_feature)


def pca_scores(result: PcaResult, X, component: int = 0) -> np.ndarray | pd.Series:
    """Scores on one component using the fitted (training) means and scales."""
    index = X.index if isinstance(X, pd.DataFrame) else None
    M, _ = _matrix(X, result.names)
    s = ((M - result.mean) / result.scale) @ result.loadings[:, component]
    return pd.Series(s, index=index, name=f"PC{component + 1}") if index is not None else s
