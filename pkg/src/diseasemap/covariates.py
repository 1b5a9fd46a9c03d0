"""Area-level covariates: skew transforms, z-scoring, correlation PCA and collinearity screening."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import InputError

log = logging.getLogger(__name__)


def skewness(x) -> float:
    """Fisher-Pearson moment coefficient m3 / m2**1.5 (0 for constant input)."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 == 0:
        return 0.0
    return float(np.mean(d**3) / m2**1.5)


def apply_transform(column, threshold: float = 1.0, name: str = "column") -> tuple[np.ndarray, str]:
    """Log (all > 0) or sqrt (all >= 0, some zero) when |skewness| exceeds ``threshold``."""
    x = np.asarray(column, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name}: non-finite values")
    if abs(skewness(x)) <= threshold:
        return x.copy(), "none"
    if np.all(x > 0):
        return np.log(x), "log"
    if np.all(x >= 0):
        return np.sqrt(x), "sqrt"
    warnings.warn(f"{name}: skewed but has negative values; left untransformed", stacklevel=2)
    return x.copy(), "none"


def standardize(column, name: str = "column") -> tuple[np.ndarray, float, float]:
    """z = (x - mean) / sd with the n-1 sample sd. Returns (z, mean, sd)."""
    x = np.asarray(column, dtype=float)
    if x.size < 2:
        raise InputError(f"{name}: need at least 2 values to standardize")
    mean = x.mean()
    sd = x.std(ddof=1)
    if not sd > 0:
        raise InputError(f"{name}: zero variance, cannot standardize")
    return (x - mean) / sd, float(mean), float(sd)


@dataclass(frozen=True)
class CovariateMatrix:
    unit_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # units x columns, standardized
    transforms: tuple[str, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]

    def __post_init__(self):
        if self.values.shape != (len(self.unit_ids), len(self.names)):
            raise InputError("values shape does not match unit_ids x names")
        if len(self.names) < 1:
            raise InputError("need at least one covariate column")
        if not np.all(np.isfinite(self.values)):
            raise InputError("covariate matrix has missing or non-finite values")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def subset(self, names: Sequence[str]) -> "CovariateMatrix":
        idx = [self.names.index(n) for n in names]
        return CovariateMatrix(self.unit_ids, tuple(names), self.values[:, idx],
                               tuple(self.transforms[i] for i in idx), tuple(self.means[i] for i in idx),
                               tuple(self.sds[i] for i in idx))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(self.names))
        df.insert(0, "unit_id", list(self.unit_ids))
        return df


def prepare_covariates(frame: pd.DataFrame, columns: Sequence[str] | None = None, threshold: float = 1.0,
                       transform: bool = True, id_column: str = "unit_id") -> CovariateMatrix:
    """Transform (optionally) and standardize the chosen columns of a unit-keyed frame."""
    if columns is None:
        columns = [c for c in frame.columns if c != id_column]
    if frame[list(columns)].isna().any().any():
        bad = [c for c in columns if frame[c].isna().any()]
        raise InputError(f"missing covariate values in {bad}")
    vals, tags, means, sds = [], [], [], []
    for c in columns:
        x = frame[c].to_numpy(dtype=float)
        if transform:
            x, tag = apply_transform(x, threshold, c)
        else:
            tag = "none"
        z, m, s = standardize(x, c)
        vals.append(z)
        tags.append(tag)
        means.append(m)
        sds.append(s)
    return CovariateMatrix(tuple(frame[id_column].astype(str)), tuple(columns), np.column_stack(vals),
                           tuple(tags), tuple(means), tuple(sds))


def merge_covariates(frame: pd.DataFrame, assignments: dict[str, str], weight_column: str | None = None,
                     id_column: str = "unit_id") -> pd.DataFrame:
    """Recombine rows of merged units as weighted means (equal weights when no column is given)."""
    df = frame.copy()
    df[id_column] = df[id_column].astype(str)
    missing = set(assignments) - set(df[id_column])
    if missing:
        raise InputError(f"covariates missing for units {sorted(missing)[:5]}")
    df = df[df[id_column].isin(assignments)]
    target = df[id_column].map(assignments)
    w = df[weight_column].astype(float) if weight_column else pd.Series(1.0, index=df.index)
    value_cols = [c for c in df.columns if c not in (id_column, weight_column)]
    weighted = df[value_cols].astype(float).mul(w, axis=0)
    num = weighted.groupby(target, sort=False).sum()
    den = w.groupby(target, sort=False).sum()
    out = num.div(den, axis=0)
    if weight_column:
        out[weight_column] = den
    order = list(dict.fromkeys(assignments.values()))
    out = out.reindex(order)
    out.index.name = id_column
    return out.reset_index()


# -- PCA ----------------------------------------------------------------------

@dataclass(frozen=True)
class PcaResult:
    eigenvalues: np.ndarray
    loadings: np.ndarray  # columns are components
    names: tuple[str, ...]
    rank_deficient: bool = False

    @property
    def retained(self) -> list[int]:
        return [k for k, ev in enumerate(self.eigenvalues) if ev > 1.0]


def pca(matrix: CovariateMatrix, tol: float = 1e-8) -> PcaResult:
    """Eigen-decomposition of the sample correlation matrix, eigenvalues descending.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = matrix.values
    n, p = x.shape
    if n <= p:
        raise InputError(f"need more units ({n}) than covariates ({p})")
    corr = np.corrcoef(x, rowvar=False).reshape(p, p)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    for k in range(p):
        j = np.argmax(np.abs(evecs[:, k]))
        if evecs[j, k] < 0:
            evecs[:, k] = -evecs[:, k]
    deficient = bool(evals[-1] < tol)
    if deficient:
        log.warning("correlation matrix is rank deficient (smallest eigenvalue %.3g)", evals[-1])
    return PcaResult(evals, evecs, matrix.names, deficient)


@dataclass(frozen=True)
class ComponentCandidates:
    component: int
    eigenvalue: float
    covariates: tuple[str, ...]
    loadings: tuple[float, ...]


def kaiser_select(result: PcaResult, k: int = 4) -> list[ComponentCandidates]:
    """Top-``k`` |loading| covariates for every component with eigenvalue > 1."""
    out = []
    for c in result.retained:
        load = result.loadings[:, c]
        top = np.argsort(-np.abs(load), kind="stable")[:k]
        out.append(ComponentCandidates(c, float(result.eigenvalues[c]),
                                       tuple(result.names[i] for i in top), tuple(float(load[i]) for i in top)))
    if not out:
        warnings.warn("no principal component has eigenvalue > 1; no candidates", stacklevel=2)
    return out


def unique_candidates(groups: Sequence[ComponentCandidates]) -> list[str]:
    seen: dict[str, int] = {}
    for g in groups:
        for name in g.covariates:
            if name in seen:
                log.info("covariate %s selected by components %d and %d; screened once", name, seen[name],
                         g.component)
            else:
                seen[name] = g.component
    return list(seen)


def collinearity_check(columns: CovariateMatrix | dict[str, np.ndarray],
                       threshold: float = 0.7) -> list[tuple[str, str, float]]:
    """Pairs with |Pearson r| >= threshold."""
    if isinstance(columns, CovariateMatrix):
        columns = {n: columns.values[:, k] for k, n in enumerate(columns.names)}
    names = list(columns)
    flags = []
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            r = float(np.corrcoef(columns[names[a]], columns[names[b]])[0, 1])
            if abs(r) >= threshold:
                flags.append((names[a], names[b], r))
    return flags


def pca_report(result: PcaResult) -> pd.DataFrame:
    rows = []
    for c in range(len(result.eigenvalues)):
        rows.append({"component": c + 1, "eigenvalue": result.eigenvalues[c], "retained": c in result.retained,
                     **{f"loading_{n}": result.loadings[i, c] for i, n in enumerate(result.names)}})
    return pd.DataFrame(rows)
