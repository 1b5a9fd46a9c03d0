"""DIC and one-pass bivariate covariate screening."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.special import gammaln

from .bym import IcarStructure, ModelSpec
from .covariates import ComponentCandidates, CovariateMatrix, collinearity_check
from .errors import ConvergenceError, DiseaseMapError, InputError
from .inference import FitResult, GaussianMixture, GridConfig, laplace_fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DicResult:
    dbar: float
    d_hat: float
    pd: float
    dic: float


def deviance(eta, offset, y) -> float:
    """-2 x Poisson log-likelihood."""
    eta = np.asarray(eta, dtype=float)
    lin = np.log(offset) + eta
    return float(-2.0 * np.sum(y * lin - np.exp(lin) - gammaln(np.asarray(y, dtype=float) + 1.0)))


def dic_from_mixture(eta: GaussianMixture, offset, y) -> DicResult:
    """Dbar and D(eta_bar) in closed form: the deviance is linear in eta and exp(eta)."""
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if eta.width != len(y):
        raise InputError("posterior of eta does not match the number of units")
    m = eta.expectation()
    lin = np.log(offset) + m
    dbar = float(-2.0 * np.sum(y * lin - offset * eta.mean_exp() - gammaln(y + 1.0)))
    d_hat = deviance(m, offset, y)
    pd_ = dbar - d_hat
    return DicResult(dbar, d_hat, pd_, dbar + pd_)


def dic(fit: FitResult) -> DicResult:
    if fit.eta is None or fit.y is None:
        raise InputError("fit carries no deviance ingredients")
    return dic_from_mixture(fit.eta, fit.offset, fit.y)


# -- screening ----------------------------------------------------------------------

@dataclass
class ScreeningReport:
    rows: pd.DataFrame  # covariate, component, DIC, pD, rank, retained, status
    retained: dict[int, str]  # component -> covariate
    collinear: list[tuple[str, str, float]] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    ties: list[tuple[int, tuple[str, ...]]] = field(default_factory=list)

    @property
    def retained_covariates(self) -> list[str]:
        return [c for c in dict.fromkeys(self.retained.values()) if c not in self.dropped]

    def to_frame(self) -> pd.DataFrame:
        return self.rows.copy()

    def to_csv(self, path=None, float_format: str = "%.6f") -> str:
        cols = ["covariate", "component", "DIC", "pD", "rank", "retained", "status"]
        text = self.rows[cols].to_csv(index=False, float_format=float_format, lineterminator="\n")
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary_text(self) -> str:
        lines = ["Bivariate screening (lower DIC is better)", ""]
        for comp in sorted(self.rows["component"].unique()):
            sub = self.rows[self.rows["component"] == comp].sort_values("rank", na_position="last")
            lines.append(f"Component {comp}:")
            for _, r in sub.iterrows():
                mark = "*" if r["retained"] else " "
                val = "failed" if r["status"] != "ok" else f"DIC {r['DIC']:.2f}"
                lines.append(f"  {mark} {r['covariate']:<24} {val}")
        lines.append("")
        lines.append("Retained: " + (", ".join(self.retained_covariates) or "none"))
        for a, b, r in self.collinear:
            lines.append(f"Collinear pair: {a} / {b} (r = {r:.3f})")
        for c in self.dropped:
            lines.append(f"Dropped for collinearity: {c}")
        for comp, names in self.ties:
            lines.append(f"Tie in component {comp}: {', '.join(names)}; kept the first by column order")
        return "\n".join(lines) + "\n"


def screen_bivariate(candidates: CovariateMatrix, groups: Sequence[ComponentCandidates], template: ModelSpec,
                     structure: IcarStructure | None, y, grid: GridConfig = GridConfig(),
                     fitter: Callable | None = None, tie_tol: float = 1e-9,
                     collinearity_threshold: float = 0.7) -> ScreeningReport:
    """Fit intercept + one covariate (+ random effects) per candidate and keep the per-component DIC minimum.

    A covariate proposed by several components is fitted once. Among retained covariates, a
    pair with |r| >= ``collinearity_threshold`` loses its member with the larger DIC.
    """
    if not groups:
        raise InputError("no candidate groups to screen")
    fitter = fitter or (lambda spec: laplace_fit(spec, structure, y, grid, candidates.unit_ids))
    order = {name: k for k, name in enumerate(candidates.names)}
    unique = sorted({c for g in groups for c in g.covariates}, key=lambda c: order[c])
    missing = [c for c in unique if c not in order]
    if missing:
        raise InputError(f"candidates not in covariate matrix: {missing}")

    results: dict[str, DicResult | None] = {}
    status: dict[str, str] = {}
    for name in unique:
        spec = replace(template, X=candidates.column(name)[:, None], covariate_names=(name,))
        try:
            results[name] = dic(fitter(spec))
            status[name] = "ok"
        except (DiseaseMapError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("fit with %s failed: %s", name, exc)
            results[name] = None
            status[name] = f"failed: {exc}"
    if all(r is None for r in results.values()):
        raise ConvergenceError("every candidate fit failed")

    rows, retained, ties = [], {}, []
    for g in groups:
        names = sorted(dict.fromkeys(g.covariates), key=lambda c: order[c])
        ok = [c for c in names if results[c] is not None]
        ranked = sorted(ok, key=lambda c: (results[c].dic, order[c]))
        if ranked:
            best = ranked[0]
            tied = tuple(c for c in ranked if abs(results[c].dic - results[best].dic) <= tie_tol)
            if len(tied) > 1:
                log.info("DIC tie in component %d among %s; keeping %s", g.component, tied, best)
                ties.append((g.component, tied))
            retained[g.component] = best
        for c in names:
            r = results[c]
            rows.append({"covariate": c, "component": g.component + 1, "DIC": r.dic if r else np.nan,
                         "pD": r.pd if r else np.nan, "rank": ranked.index(c) + 1 if c in ranked else np.nan,
                         "retained": ranked[:1] == [c], "status": status[c]})

    kept = list(dict.fromkeys(retained.values()))
    flags = collinearity_check(candidates.subset(kept), collinearity_threshold) if len(kept) > 1 else []
    dropped: list[str] = []
    for a, b, r in flags:
        if a in dropped or b in dropped:
            continue
        worse = a if (results[a].dic, order[a]) > (results[b].dic, order[b]) else b
        log.warning("%s and %s are collinear (r=%.3f); dropping %s", a, b, r, worse)
        dropped.append(worse)
    frame = pd.DataFrame(rows, columns=["covariate", "component", "DIC", "pD", "rank", "retained", "status"])
    if dropped:
        frame.loc[frame["covariate"].isin(dropped), "retained"] = False
    return ScreeningReport(frame, retained, flags, dropped, ties)
