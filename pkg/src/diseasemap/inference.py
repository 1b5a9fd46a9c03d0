"""Grid-assisted Laplace approximation for the Poisson BYM2 model.

For each hyperparameter value theta the latent field is approximated by a Gaussian at the
constrained mode of p(x | theta, y); the hyperparameter posterior is tabulated on a grid
in the eigenbasis of its Hessian at the mode, and latent marginals are the grid-weighted
mixture of the conditional Gaussians.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import ndtr

from .bym import LOG_2PI, BymModel, IcarStructure, ModelSpec
from .errors import ConvergenceError, InputError, NumericalError

log = logging.getLogger(__name__)


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    points: int = 15  # per hyperparameter axis
    half_width: float = 3.0  # in posterior sd units along each eigen-direction
    max_newton: int = 50
    grad_tol: float = 1e-8
    min_weight: float = 1e-8  # normalized weight below which a grid point is dropped
    fd_step: float = 0.02  # finite-difference step for the hyperparameter Hessian
    min_curvature: float = 0.1
    theta_bounds: tuple[tuple[float, float], ...] = ((-6.0, 20.0), (-9.0, 9.0))

    def __post_init__(self):
        if self.points < 1:
            raise ValueError("grid needs at least one point per axis")
        if not (math.isfinite(self.half_width) and self.half_width >= 0):
            raise ValueError("half_width must be finite and >= 0")
        if self.max_newton < 1 or not self.grad_tol > 0:
            raise ValueError("invalid Newton settings")


# -- posterior representation -------------------------------------------------------

def weighted_quantile(x, w, q):
    """Quantile of a weighted discrete sample with midpoint-interpolated CDF."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order] / w.sum()
    cum = np.cumsum(ws) - 0.5 * ws
    return np.interp(q, cum, xs)


@dataclass(frozen=True)
class GaussianMixture:
    """Per-column mixtures: column j is sum_k weights[k] N(mean[k, j], var[k, j]).

    Zero variances are point masses, so a set of posterior draws is the special case
    ``var == 0`` with equal weights.
    """

    weights: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w / w.sum())
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        var = np.broadcast_to(np.asarray(self.var, dtype=float), mean.shape)
        if np.any(var < 0):
            raise NumericalError("negative variance in posterior mixture")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", np.array(var))

    @classmethod
    def from_draws(cls, draws) -> "GaussianMixture":
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        return cls(np.ones(draws.shape[0]), draws, np.zeros_like(draws))

    @property
    def width(self) -> int:
        return self.mean.shape[1]

    @property
    def is_discrete(self) -> bool:
        return not np.any(self.var)

    def column(self, j) -> "GaussianMixture":
        return GaussianMixture(self.weights, self.mean[:, [j]], self.var[:, [j]])

    def expectation(self) -> np.ndarray:
        return self.weights @ self.mean

    def variance(self) -> np.ndarray:
        mu = self.expectation()
        return np.maximum(self.weights @ (self.var + self.mean**2) - mu**2, 0.0)

    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance())

    def mean_exp(self) -> np.ndarray:
        """E[exp(X)] column-wise (log-normal means)."""
        return self.weights @ np.exp(self.mean + 0.5 * self.var)

    def cdf(self, x) -> np.ndarray:
        x = np.broadcast_to(np.asarray(x, dtype=float), (self.width,))
        sd = np.sqrt(self.var)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, (x - self.mean) / np.where(sd > 0, sd, 1.0), 0.0)
        p = np.where(sd > 0, ndtr(z), (x >= self.mean).astype(float))
        return self.weights @ p

    def prob_gt(self, c: float = 0.0) -> np.ndarray:
        sd = np.sqrt(self.var)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, (self.mean - c) / np.where(sd > 0, sd, 1.0), 0.0)
        p = np.where(sd > 0, ndtr(z), (self.mean > c).astype(float))
        return self.weights @ p

    def quantile(self, q: float) -> np.ndarray:
        if not 0 < q < 1:
            raise ValueError("quantile level must lie in (0, 1)")
        if self.is_discrete:
            return np.array([weighted_quantile(self.mean[:, j], self.weights, q) for j in range(self.width)])
        sd = np.sqrt(self.var)
        lo = (self.mean - 9 * sd).min(axis=0)
        hi = (self.mean + 9 * sd).max(axis=0)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


def summarize(mix: GaussianMixture, names: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame({"parameter": list(names), "mean": mix.expectation(), "sd": mix.sd(),
                         "q2.5": mix.quantile(0.025), "q97.5": mix.quantile(0.975)})


@dataclass
class FitResult:
    engine: str
    unit_ids: tuple[str, ...]
    fixed_names: tuple[str, ...]
    fixed: GaussianMixture
    eta: GaussianMixture
    hyper_names: tuple[str, ...]
    hyper_values: np.ndarray  # K x h, natural scale (tau_b, phi)
    hyper_weights: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    grid: dict | None = None
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True

    def fixed_summary(self) -> pd.DataFrame:
        return summarize(self.fixed, self.fixed_names)

    def hyper_summary(self) -> pd.DataFrame:
        rows = []
        for j, name in enumerate(self.hyper_names):
            x, w = self.hyper_values[:, j], self.hyper_weights
            m = float(w @ x)
            rows.append({"parameter": name, "mean": m, "sd": math.sqrt(max(float(w @ (x - m) ** 2), 0.0)),
                         "q2.5": float(weighted_quantile(x, w, 0.025)),
                         "q97.5": float(weighted_quantile(x, w, 0.975))})
        return pd.DataFrame(rows, columns=["parameter", "mean", "sd", "q2.5", "q97.5"])

    def relative_risks(self) -> pd.DataFrame:
        """Fixed effects on the ratio scale: posterior mean of exp(beta) and exp of its quantiles."""
        return pd.DataFrame({"parameter": list(self.fixed_names), "RR": self.fixed.mean_exp(),
                             "ci_low": np.exp(self.fixed.quantile(0.025)),
                             "ci_high": np.exp(self.fixed.quantile(0.975))})


@dataclass(frozen=True)
class AreaEstimates:
    unit_ids: tuple[str, ...]
    rr: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    exceedance: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"unit_id": list(self.unit_ids), "RR": self.rr, "lo": self.lo, "hi": self.hi,
                             "exceedance": self.exceedance})


def predicted_rr(fit: FitResult) -> AreaEstimates:
    """RR_i = E[exp(eta_i)], equal-tailed 95% interval and P(exp(eta_i) > 1)."""
    mix = fit.eta
    return AreaEstimates(fit.unit_ids, mix.mean_exp(), np.exp(mix.quantile(0.025)), np.exp(mix.quantile(0.975)),
                         mix.prob_gt(0.0))


# -- conditional mode ---------------------------------------------------------------

@dataclass
class ModeResult:
    x: np.ndarray
    A: sparse.csr_matrix
    lu: object
    logdet: float  # log det of the negative Hessian restricted to the constraint subspace
    W: np.ndarray  # H^-1 C'
    Minv: np.ndarray  # (C H^-1 C')^-1
    iterations: int
    grad_norm: float


def _factor(H: sparse.csc_matrix):
    lu = splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    d = lu.U.diagonal()
    if not np.all(d > 0):
        raise NumericalError("negative Hessian not positive definite at the mode")
    return lu, float(np.sum(np.log(d)))


class LaplaceEngine:
    def __init__(self, model: BymModel, config: GridConfig = GridConfig()):
        self.model = model
        self.config = config
        C = model.C
        self._C = C
        self._CCt_logdet = float(np.linalg.slogdet(C @ C.T)[1]) if C.shape[0] else 0.0
        self._CCt_inv = np.linalg.inv(C @ C.T) if C.shape[0] else None
        self._cache: dict[tuple, tuple[float, ModeResult]] = {}
        self._last_x = self._initial_x()

    def _initial_x(self) -> np.ndarray:
        m = self.model
        x = np.zeros(m.dim)
        y = m.y
        x[0] = math.log(max(y.sum(), 0.5) / m.spec.offset.sum())
        return x

    def find_mode(self, theta, x0=None) -> ModeResult:
        """Constrained Newton iterations on log p(x | theta, y)."""
        m, cfg, C = self.model, self.config, self._C
        A = m.design(theta)
        x = m.project(self._last_x if x0 is None else np.asarray(x0, dtype=float))
        f = m.log_likelihood(x, theta) + m.log_prior_latent(x)
        gnorm = np.inf
        for it in range(1, cfg.max_newton + 1):
            g = m.gradient(x, theta)
            lu, logdet = _factor(m.neg_hessian(x, theta, A))
            W = lu.solve(C.T) if C.shape[0] else np.zeros((m.dim, 0))
            M = C @ W
            Minv = np.linalg.inv(M) if C.shape[0] else np.zeros((0, 0))
            gp = g - C.T @ (self._CCt_inv @ (C @ g)) if C.shape[0] else g
            gnorm = float(np.max(np.abs(gp)))
            step = lu.solve(g)
            if C.shape[0]:
                step -= W @ (Minv @ (C @ step))
            decrement = float(g @ step)
            if gnorm < cfg.grad_tol or decrement < 1e-20:
                if C.shape[0]:
                    logdet += float(np.linalg.slogdet(M)[1]) - self._CCt_logdet
                return ModeResult(x, A, lu, logdet, W, Minv, it, gnorm)
            t = 1.0
            while True:
                xn = x + t * step
                try:
                    fn = m.log_likelihood(xn, theta) + m.log_prior_latent(xn)
                except NumericalError:
                    fn = -np.inf
                if fn >= f - 1e-12 * abs(f) or t < 1e-10:
                    break
                t *= 0.5
            if not np.isfinite(fn):
                raise NumericalError("Newton iterations diverged")
            x, f = xn, fn
        raise ConvergenceError(f"mode search did not converge in {cfg.max_newton} iterations",
                               diagnostic={"grad_norm": gnorm})

    def log_marginal(self, theta) -> tuple[float, ModeResult]:
        key = tuple(np.round(np.asarray(theta, dtype=float), 12))
        if key in self._cache:
            return self._cache[key]
        m = self.model
        mode = self.find_mode(theta)
        self._last_x = mode.x
        x = mode.x
        rank = m.dim - m.n_constraints
        lm = (m.log_likelihood(x, theta) + m.log_prior_latent(x) + m.log_prior_theta(theta)
              + 0.5 * rank * LOG_2PI - 0.5 * mode.logdet)
        self._cache[key] = (lm, mode)
        return lm, mode

    def moments(self, mode: ModeResult) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Means and marginal variances of the fixed effects and of eta under the constrained Gaussian."""
        m = self.model
        A = mode.A
        k = 1 + m.p
        rhs = np.hstack([A.T.toarray(), np.eye(m.dim)[:, :k]])
        S = mode.lu.solve(rhs)
        var_eta = np.asarray(A.multiply(S[:, : m.n].T).sum(axis=1)).ravel()
        var_fix = S[np.arange(k), m.n + np.arange(k)].copy()
        if m.n_constraints:
            AW = A @ mode.W
            var_eta -= np.einsum("ij,jk,ik->i", AW, mode.Minv, AW)
            Wf = mode.W[:k]
            var_fix -= np.einsum("ij,jk,ik->i", Wf, mode.Minv, Wf)
        return mode.x[:k].copy(), np.maximum(var_fix, 0.0), A @ mode.x, np.maximum(var_eta, 0.0)


# -- hyperparameter mode and grid ------------------------------------------------------

def _coarse_start(engine: LaplaceEngine, nh: int) -> np.ndarray:
    axes = [np.array([0.0, 2.0, 4.0, 6.0])]
    if nh == 2:
        axes.append(np.array([-2.0, 0.0, 2.0]))
    best, arg = -np.inf, None
    for pt in np.array(np.meshgrid(*axes, indexing="ij")).reshape(nh, -1).T:
        try:
            lm, _ = engine.log_marginal(pt)
        except (NumericalError, ConvergenceError):
            continue
        if lm > best:
            best, arg = lm, pt
    if arg is None:
        raise ConvergenceError("no hyperparameter start value gave a finite Laplace approximation")
    return arg


def _fd_derivatives(f, x, h) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of f at x from a central-difference stencil."""
    k = len(x)
    f0 = f(x)
    g = np.zeros(k)
    H = np.zeros((k, k))
    eye = np.eye(k) * h
    for i in range(k):
        fp, fm = f(x + eye[i]), f(x - eye[i])
        g[i] = (fp - fm) / (2 * h)
        H[i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            H[i, j] = H[j, i] = (f(x + eye[i] + eye[j]) - f(x + eye[i] - eye[j]) - f(x - eye[i] + eye[j])
                                 + f(x - eye[i] - eye[j])) / (4 * h * h)
    return f0, g, H


def _theta_mode(engine: LaplaceEngine, nh: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """Damped Newton ascent on the Laplace log marginal of theta, started from a coarse search."""
    cfg = engine.config
    lo = np.array([b[0] for b in cfg.theta_bounds[:nh]])
    hi = np.array([b[1] for b in cfg.theta_bounds[:nh]])

    def lm(t):
        if np.any(t < lo) or np.any(t > hi):
            return -np.inf
        try:
            return engine.log_marginal(t)[0]
        except (NumericalError, ConvergenceError):
            return -np.inf

    theta = _coarse_start(engine, nh)
    h = cfg.fd_step
    converged = False
    for it in range(1, 101):
        f0, g, H = _fd_derivatives(lm, theta, h)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            # too close to a bound or a failure region for a full stencil: plain ascent
            break
        evals, evecs = np.linalg.eigh(-0.5 * (H + H.T))
        evals = np.maximum(evals, cfg.min_curvature)
        step = evecs @ ((evecs.T @ g) / evals)
        norm = np.linalg.norm(step)
        if norm > 1.0:
            step /= norm
        t = 1.0
        while t > 1e-4:
            cand = np.clip(theta + t * step, lo, hi)
            if lm(cand) > f0:
                break
            t *= 0.5
        else:
            converged = True
            break
        moved = np.max(np.abs(cand - theta))
        theta = cand
        if moved < 1e-4:
            converged = True
            break
    f0, g, H = _fd_derivatives(lm, theta, h)
    at_bound = [i for i in range(nh) if min(theta[i] - lo[i], hi[i] - theta[i]) < 2 * h]
    if not np.all(np.isfinite(H)):
        H = np.where(np.isfinite(H), H, 0.0)
    evals, evecs = np.linalg.eigh(-0.5 * (H + H.T))
    if np.any(evals < cfg.min_curvature):
        log.warning("flat or non-concave hyperparameter posterior (curvatures %s); flooring", evals)
    evals = np.maximum(evals, cfg.min_curvature)
    info = {"theta_mode": theta.tolist(), "hessian": (-H).tolist(), "optimizer_converged": converged,
            "optimizer_iterations": it, "at_bound": at_bound}
    return theta, evecs / np.sqrt(evals), info


def _grid_points(center, transform, cfg: GridConfig) -> np.ndarray:
    nh = len(center)
    z1 = np.linspace(-cfg.half_width, cfg.half_width, cfg.points) if cfg.points > 1 else np.zeros(1)
    Z = np.array(np.meshgrid(*([z1] * nh), indexing="ij")).reshape(nh, -1).T
    return center + Z @ transform.T


def laplace_fit(spec: ModelSpec, structure: IcarStructure | None, y, grid: GridConfig = GridConfig(),
                unit_ids: Sequence[str] | None = None) -> FitResult:
    """Grid-integrated Laplace approximation; see the module docstring."""
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n,) or np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be non-negative integer counts, one per unit")
    model = BymModel(spec, structure, y)
    engine = LaplaceEngine(model, grid)
    nh = len(model.theta_names)
    diag: dict = {"theta_names": list(model.theta_names)}
    if nh == 0:
        points = np.zeros((1, 0))
    else:
        center, T, info = _theta_mode(engine, nh)
        diag.update(info)
        points = _grid_points(center, T, grid)

    bounds = np.array(grid.theta_bounds[:nh]).reshape(nh, 2)
    lms = np.full(len(points), -np.inf)
    modes: list[ModeResult | None] = [None] * len(points)
    iters = np.zeros(len(points), dtype=int)
    failed = []
    for k, pt in enumerate(points):
        if nh and (np.any(pt < bounds[:, 0] - 1e-12) or np.any(pt > bounds[:, 1] + 1e-12)):
            continue
        try:
            lms[k], modes[k] = engine.log_marginal(pt)
            iters[k] = modes[k].iterations
        except (NumericalError, ConvergenceError) as exc:
            failed.append((k, str(exc)))
    if not np.any(np.isfinite(lms)):
        raise ConvergenceError("Laplace approximation failed at every grid point", diagnostic={"failed": failed})
    if failed:
        log.warning("%d grid points failed and carry zero weight", len(failed))
    w = np.exp(lms - lms.max())
    if not w.sum() > 0:
        raise NumericalError("all grid weights underflow")
    w /= w.sum()
    keep = np.flatnonzero(w >= grid.min_weight)
    w_keep = w[keep] / w[keep].sum()

    fm, fv, em, ev = [], [], [], []
    for k in keep:
        a, b, c, d = engine.moments(modes[k])
        fm.append(a)
        fv.append(b)
        em.append(c)
        ev.append(d)
    fixed = GaussianMixture(w_keep, np.array(fm), np.array(fv))
    eta = GaussianMixture(w_keep, np.array(em), np.array(ev))

    hyper_names: tuple[str, ...] = ()
    hyper_vals = np.zeros((len(keep), 0))
    if nh:
        th = points[keep]
        cols = [np.exp(th[:, 0])]
        hyper_names = ("tau_b",)
        if nh == 2:
            cols.append(1.0 / (1.0 + np.exp(-th[:, 1])))
            hyper_names = ("tau_b", "phi")
        hyper_vals = np.column_stack(cols)
        edge = _edge_mass(points, w, grid)
        diag["edge_weight"] = edge
        if edge > 0.05:
            log.warning("grid boundary carries weight %.2g; consider a wider grid", edge)

    diag.update({"n_grid": len(points), "n_kept": len(keep), "n_failed": len(failed),
                 "newton_iterations": iters.tolist(), "failed": failed,
                 "max_newton_iterations": int(iters.max(initial=0))})
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i) for i in range(spec.n))
    grid_info = {"theta": points.tolist(), "log_marginal": [float(v) if np.isfinite(v) else None for v in lms],
                 "weights": w.tolist()}
    return FitResult("laplace", ids, ("(Intercept)",) + spec.covariate_names, fixed, eta, hyper_names, hyper_vals,
                     w_keep, y, spec.offset.copy(), grid_info, diag, converged=not failed)


def _edge_mass(points, w, cfg: GridConfig) -> float:
    if cfg.points < 3:
        return 0.0
    nh = points.shape[1]
    idx = np.array(np.meshgrid(*([np.arange(cfg.points)] * nh), indexing="ij")).reshape(nh, -1).T
    on_edge = np.any((idx == 0) | (idx == cfg.points - 1), axis=1)
    return float(w[on_edge].sum())


# -- persistence ------------------------------------------------------------------------

_ARRAYS = ("fixed_weights", "fixed_mean", "fixed_var", "eta_weights", "eta_mean", "eta_var", "hyper_values",
           "hyper_weights", "y", "offset")


def save_fit(fit: FitResult, directory) -> list[Path]:
    """Plain .npy arrays plus a JSON header (no archive timestamps, so reruns are byte-identical)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"fixed_weights": fit.fixed.weights, "fixed_mean": fit.fixed.mean, "fixed_var": fit.fixed.var,
              "eta_weights": fit.eta.weights, "eta_mean": fit.eta.mean, "eta_var": fit.eta.var,
              "hyper_values": fit.hyper_values, "hyper_weights": fit.hyper_weights, "y": fit.y,
              "offset": fit.offset}
    paths = []
    for name, arr in arrays.items():
        p = d / f"{name}.npy"
        np.save(p, np.ascontiguousarray(arr, dtype=float))
        paths.append(p)
    meta = {"engine": fit.engine, "unit_ids": list(fit.unit_ids), "fixed_names": list(fit.fixed_names),
            "hyper_names": list(fit.hyper_names), "converged": fit.converged, "grid": fit.grid,
            "diagnostics": fit.diagnostics}
    p = d / "fit.json"
    p.write_text(json.dumps(meta, indent=1, sort_keys=True, default=_jsonable) + "\n")
    paths.append(p)
    return paths


def load_fit(directory) -> FitResult:
    d = Path(directory)
    if not (d / "fit.json").is_file():
        raise InputError(f"no saved fit in {d}")
    meta = json.loads((d / "fit.json").read_text())
    a = {name: np.load(d / f"{name}.npy") for name in _ARRAYS}
    return FitResult(meta["engine"], tuple(meta["unit_ids"]), tuple(meta["fixed_names"]),
                     GaussianMixture(a["fixed_weights"], a["fixed_mean"], a["fixed_var"]),
                     GaussianMixture(a["eta_weights"], a["eta_mean"], a["eta_var"]), tuple(meta["hyper_names"]),
                     a["hyper_values"].reshape(len(a["hyper_weights"]), -1), a["hyper_weights"], a["y"],
                     a["offset"], meta["grid"], meta["diagnostics"], meta["converged"])


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
