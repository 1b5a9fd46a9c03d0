"""Poisson BYM2 model: scaled ICAR structure, PC priors, log densities and simulation.

The latent vector is ``x = (beta0, beta, v, u)`` with ``v ~ N(0, I)`` and ``u`` an ICAR
field with precision ``Q`` constrained to sum to zero on every connected component.
Hyperparameters enter only through the linear predictor::

    eta_i = beta0 + X_i beta + sigma * (sqrt(1 - phi) v_i + sqrt(phi / s) u_i),  sigma = tau_b ** -0.5

Internally hyperparameters are handled on ``theta = (log tau_b, logit phi)``; when only one
random effect is present theta is ``(log tau_b,)`` and with none it is empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, sparse
from scipy.special import expit, gammaln, logit

from .errors import InputError, NumericalError
from .geounits import AdjacencyGraph, connected_components

LOG_2PI = math.log(2 * math.pi)


# -- structure ------------------------------------------------------------------

@dataclass(eq=False)
class IcarStructure:
    """Q = D - W with its connected components; ``scaling_factor`` is None until computed."""

    Q: sparse.csr_matrix
    components: tuple[tuple[int, ...], ...]
    scaling_factor: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def singleton(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for comp in self.components:
            if len(comp) == 1:
                mask[comp[0]] = True
        return mask

    def component_index(self) -> np.ndarray:
        idx = np.empty(self.n, dtype=np.int64)
        for k, comp in enumerate(self.components):
            idx[list(comp)] = k
        return idx

    def constraint_matrix(self) -> np.ndarray:
        """One indicator row per component (singletons pin their u to 0)."""
        C = np.zeros((self.n_components, self.n))
        for k, comp in enumerate(self.components):
            C[k, list(comp)] = 1.0
        return C

    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense eigenpairs of Q; the ``n_components`` null eigenvalues are set to exactly 0."""
        if "eigen" not in self._cache:
            vals, vecs = np.linalg.eigh(self.Q.toarray())
            vals[: self.n_components] = 0.0
            self._cache["eigen"] = (vals, vecs)
        return self._cache["eigen"]

    def log_pdet(self) -> float:
        vals, _ = self.eigen()
        return float(np.sum(np.log(vals[self.n_components:])))

    def scaled_variances(self) -> np.ndarray:
        """Eigenvalues of the generalized inverse of s*Q (nonzero part)."""
        if self.scaling_factor is None:
            raise InputError("structure has no scaling factor")
        vals, _ = self.eigen()
        return 1.0 / (self.scaling_factor * vals[self.n_components:])

    def phi_prior(self, u: float, alpha: float) -> "PhiPrior":
        key = ("phi", u, alpha)
        if key not in self._cache:
            self._cache[key] = PhiPrior(self.scaled_variances(), u, alpha)
        return self._cache[key]


def icar_precision(graph: AdjacencyGraph) -> IcarStructure:
    """Unscaled ICAR structure: Q_ii = degree, Q_ij = -1 for neighbours."""
    if graph.n < 1:
        raise InputError("empty graph")
    W = graph.weights().astype(np.int64)
    deg = np.asarray(W.sum(axis=1)).ravel()
    Q = (sparse.diags(deg) - W).tocsr().astype(float)
    comps = tuple(tuple(c) for c in connected_components(graph))
    return IcarStructure(Q, comps)


def constrained_marginal_variances(structure: IcarStructure) -> np.ndarray:
    """Diagonal of the generalized inverse of Q under per-component sum-to-zero constraints.

    For a component of size m, (Q_c + J/m)^-1 - J/m is its generalized inverse. Singletons
    get NaN (their effect is pinned to zero).
    """
    var = np.full(structure.n, np.nan)
    Q = structure.Q
    for comp in structure.components:
        m = len(comp)
        if m == 1:
            continue
        idx = np.array(comp)
        Qc = Q[idx][:, idx].toarray()
        J = np.full((m, m), 1.0 / m)
        var[idx] = np.diag(np.linalg.inv(Qc + J)) - 1.0 / m
    return var


def compute_scaling_factor(structure: IcarStructure) -> float:
    """Geometric mean of the constrained marginal variances over non-singleton units."""
    var = constrained_marginal_variances(structure)
    ok = ~np.isnan(var)
    if not ok.any():
        raise InputError("no connected component of size >= 2; ICAR scaling undefined")
    return float(np.exp(np.mean(np.log(var[ok]))))


def icar_structure(graph: AdjacencyGraph, scale: bool = True) -> IcarStructure:
    s = icar_precision(graph)
    if scale and any(len(c) > 1 for c in s.components):
        s.scaling_factor = compute_scaling_factor(s)
    return s


# -- priors -----------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSettings:
    fixed_precision: float = 0.001
    sigma_u: float = 1.0  # P(sigma_b > sigma_u) = sigma_alpha
    sigma_alpha: float = 0.01
    phi_u: float = 0.5  # P(phi < phi_u) = phi_alpha
    phi_alpha: float = 2.0 / 3.0


def pc_sigma_rate(u: float, alpha: float) -> float:
    return -math.log(alpha) / u


def pc_sigma_logpdf(sigma, u: float = 1.0, alpha: float = 0.01):
    """Exponential PC prior on the standard deviation."""
    lam = pc_sigma_rate(u, alpha)
    return np.log(lam) - lam * np.asarray(sigma, dtype=float)


def pc_log_tau_logpdf(log_tau, u: float = 1.0, alpha: float = 0.01):
    """The sigma PC prior expressed as a density on log tau (includes the Jacobian)."""
    sigma = np.exp(-0.5 * np.asarray(log_tau, dtype=float))
    return pc_sigma_logpdf(sigma, u, alpha) + np.log(0.5 * sigma)


def _x_minus_log1p(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    out = np.empty_like(x)
    xs = x[small]
    out[small] = xs * xs * (0.5 - xs / 3.0 + xs * xs / 4.0)
    out[~small] = x[~small] - np.log1p(x[~small])
    return out


class PhiPrior:
    """PC prior for the BYM2 mixing fraction, base model phi = 0.

    Distance d(phi) = sqrt(2 KLD(phi)) between N(0, (1-phi) I + phi R) and N(0, I) on the
    constrained subspace, R having eigenvalues ``gamma``. An exponential on d with rate
    ``lam`` is chosen so that P(phi < u) = alpha; the density is normalized numerically on a
    logit-scale table.
    """

    def __init__(self, gamma, u: float = 0.5, alpha: float = 2.0 / 3.0, table_points: int = 4001):
        self.g = np.asarray(gamma, dtype=float) - 1.0
        self.u, self.alpha = u, alpha
        d0, d1 = float(self.distance(u)[0]), float(self.distance(1.0)[0])
        if not alpha > d0 / d1:
            raise InputError(f"P(phi < {u}) = {alpha} unattainable: need alpha > {d0 / d1:.4f}")

        def excess(lam):
            return -np.expm1(-lam * d0) / -np.expm1(-lam * d1) - alpha

        self.lam = optimize.brentq(excess, 1e-12, 1e4, xtol=1e-14, rtol=1e-14)
        t = np.linspace(-25.0, 25.0, table_points)
        self.table_logit = t
        dens = np.exp(self._log_unnorm_logit(t))
        self.log_norm = float(np.log(np.trapezoid(dens, t)))
        self.table_logpdf = np.log(dens) - self.log_norm

    def kld(self, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        return 0.5 * _x_minus_log1p(phi[:, None] * self.g[None, :]).sum(axis=1)

    def distance(self, phi):
        return np.sqrt(2.0 * self.kld(phi))

    def ddistance(self, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        tiny = phi < 1e-10
        ph = np.where(tiny, 1e-10, phi)
        dk = 0.5 * (self.g[None, :] ** 2 * ph[:, None] / (1.0 + ph[:, None] * self.g[None, :])).sum(axis=1)
        out = dk / self.distance(ph)
        out[tiny] = math.sqrt(0.5 * np.sum(self.g**2))
        return out

    def _log_unnorm(self, phi):
        return math.log(self.lam) - self.lam * self.distance(phi) + np.log(self.ddistance(phi))

    def _log_unnorm_logit(self, t):
        phi = expit(t)
        return self._log_unnorm(phi) + np.log(phi) + np.log1p(-phi)

    def logpdf(self, phi):
        """Normalized log density on the phi scale."""
        return self._log_unnorm(phi) - self.log_norm

    def logpdf_logit(self, t):
        """Normalized log density of logit(phi)."""
        return self._log_unnorm_logit(np.asarray(t, dtype=float)) - self.log_norm

    def cdf(self, phi):
        """Closed form, used to check the numerical normalization."""
        return -np.expm1(-self.lam * self.distance(phi)) / -np.expm1(-self.lam * self.distance(1.0))


# -- model ------------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    tau_b: float
    phi: float = 0.5

    def __post_init__(self):
        if not self.tau_b > 0:
            raise InputError(f"tau_b must be > 0, got {self.tau_b}")
        if not 0.0 <= self.phi <= 1.0:
            raise InputError(f"phi must lie in [0, 1], got {self.phi}")


@dataclass(frozen=True)
class LatentState:
    beta0: float
    beta: np.ndarray
    v: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    X: np.ndarray  # units x covariates (may have zero columns)
    offset: np.ndarray  # expected counts E_i
    covariate_names: tuple[str, ...] = ()
    include_spatial: bool = True
    include_unstructured: bool = True
    priors: PriorSettings = PriorSettings()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)
        E = np.asarray(self.offset, dtype=float)
        object.__setattr__(self, "offset", E)
        if X.shape[0] != E.shape[0]:
            raise InputError("design matrix and offset differ in length")
        if not np.all(E > 0):
            raise InputError("expected counts must be > 0 for every unit")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise InputError("covariate_names does not match design columns")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.offset)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def intercept_only(cls, offset, **kw) -> "ModelSpec":
        return cls(np.zeros((len(offset), 0)), offset, **kw)


def poisson_loglik(eta, offset, y) -> float:
    """sum y (log E + eta) - E exp(eta) - log y!"""
    eta = np.asarray(eta, dtype=float)
    lin = np.log(offset) + eta
    if not np.all(np.isfinite(lin)) or lin.max(initial=-np.inf) > 700:
        raise NumericalError("linear predictor diverged (exp overflow)")
    return float(np.sum(y * lin - np.exp(lin) - gammaln(np.asarray(y, dtype=float) + 1.0)))


class BymModel:
    """Vectorised densities for one (spec, structure, y) triple."""

    def __init__(self, spec: ModelSpec, structure: IcarStructure | None, y=None):
        self.spec = spec
        self.structure = structure
        self.y = None if y is None else np.asarray(y, dtype=float)
        n, p = spec.n, spec.p
        if spec.include_spatial:
            if structure is None or structure.n != n:
                raise InputError("spatial model needs an ICAR structure over the same units")
            if structure.scaling_factor is None:
                raise InputError("ICAR structure is not scaled; call compute_scaling_factor")
        self.n, self.p = n, p
        k = 1 + p
        self.sl_fixed = slice(0, k)
        self.sl_v = slice(k, k + n) if spec.include_unstructured else slice(k, k)
        k = self.sl_v.stop
        self.sl_u = slice(k, k + n) if spec.include_spatial else slice(k, k)
        self.dim = self.sl_u.stop
        if spec.include_spatial and spec.include_unstructured:
            self.theta_names = ("log_tau_b", "logit_phi")
        elif spec.include_spatial or spec.include_unstructured:
            self.theta_names = ("log_tau_b",)
        else:
            self.theta_names = ()

        pr = spec.priors
        blocks = [sparse.identity(1 + p, format="csr") * pr.fixed_precision]
        if spec.include_unstructured:
            blocks.append(sparse.identity(n, format="csr"))
        if spec.include_spatial:
            blocks.append(structure.Q)
        self.P = sparse.block_diag(blocks, format="csc")

        if spec.include_spatial:
            C = np.zeros((structure.n_components, self.dim))
            C[:, self.sl_u] = structure.constraint_matrix()
            self.C = C
        else:
            self.C = np.zeros((0, self.dim))

        fixed = np.column_stack([np.ones(n), spec.X])
        self._fixed = fixed
        self._fixed_sp = sparse.csr_matrix(fixed)
        self._eye = sparse.identity(n, format="csr")
        self._logE = np.log(spec.offset)
        self._lgam = None if self.y is None else gammaln(self.y + 1.0)

        # latent log-prior normalizing constant
        const = 0.5 * (1 + p) * (math.log(pr.fixed_precision) - LOG_2PI)
        if spec.include_unstructured:
            const -= 0.5 * n * LOG_2PI
        if spec.include_spatial:
            rank = n - structure.n_components
            const += 0.5 * structure.log_pdet() - 0.5 * rank * LOG_2PI
        self._prior_const = const
        self.phi_prior = (structure.phi_prior(pr.phi_u, pr.phi_alpha)
                          if spec.include_spatial and spec.include_unstructured else None)

    # -- parameter maps ----------------------------------------------------------
    @property
    def n_constraints(self) -> int:
        return self.C.shape[0]

    def hyper(self, theta) -> Hyperparams:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.theta_names:
            return Hyperparams(np.inf, 0.0)
        tau = math.exp(theta[0])
        if len(self.theta_names) == 2:
            return Hyperparams(tau, float(expit(theta[1])))
        return Hyperparams(tau, 1.0 if self.spec.include_spatial else 0.0)

    def theta(self, hyper: Hyperparams) -> np.ndarray:
        if not self.theta_names:
            return np.zeros(0)
        t = [math.log(hyper.tau_b)]
        if len(self.theta_names) == 2:
            t.append(float(logit(hyper.phi)))
        return np.array(t)

    def coefficients(self, theta) -> tuple[float, float]:
        """Multipliers of v and u in the linear predictor."""
        if not self.theta_names:
            return 0.0, 0.0
        h = self.hyper(theta)
        sigma = 1.0 / math.sqrt(h.tau_b)
        a_v = sigma * math.sqrt(1.0 - h.phi) if self.spec.include_unstructured else 0.0
        a_u = sigma * math.sqrt(h.phi / self.structure.scaling_factor) if self.spec.include_spatial else 0.0
        return a_v, a_u

    def design(self, theta) -> sparse.csr_matrix:
        a_v, a_u = self.coefficients(theta)
        parts = [self._fixed_sp]
        if self.spec.include_unstructured:
            parts.append(self._eye * a_v)
        if self.spec.include_spatial:
            parts.append(self._eye * a_u)
        return sparse.hstack(parts, format="csr")

    def pack(self, state: LatentState) -> np.ndarray:
        x = np.zeros(self.dim)
        x[0] = state.beta0
        x[1:1 + self.p] = np.asarray(state.beta, dtype=float).reshape(-1)
        if self.spec.include_unstructured:
            x[self.sl_v] = state.v
        if self.spec.include_spatial:
            x[self.sl_u] = state.u
        return x

    def unpack(self, x) -> LatentState:
        x = np.asarray(x, dtype=float)
        zeros = np.zeros(self.n)
        return LatentState(float(x[0]), x[1:1 + self.p].copy(),
                           x[self.sl_v].copy() if self.spec.include_unstructured else zeros,
                           x[self.sl_u].copy() if self.spec.include_spatial else zeros.copy())

    # -- densities ------------------------------------------------------------
    def eta(self, x, theta) -> np.ndarray:
        a_v, a_u = self.coefficients(theta)
        e = self._fixed @ x[self.sl_fixed]
        if self.spec.include_unstructured:
            e = e + a_v * x[self.sl_v]
        if self.spec.include_spatial:
            e = e + a_u * x[self.sl_u]
        return e

    def _y(self, y):
        if y is not None:
            return np.asarray(y, dtype=float), gammaln(np.asarray(y, dtype=float) + 1.0)
        if self.y is None:
            raise InputError("no observed counts")
        return self.y, self._lgam

    def log_likelihood(self, x, theta, y=None) -> float:
        y, lg = self._y(y)
        lin = self._logE + self.eta(x, theta)
        if not np.all(np.isfinite(lin)) or lin.max() > 700:
            raise NumericalError("linear predictor diverged (exp overflow)")
        return float(np.sum(y * lin - np.exp(lin) - lg))

    def log_prior_latent(self, x) -> float:
        return self._prior_const - 0.5 * float(x @ (self.P @ x))

    def log_prior_theta(self, theta) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not self.theta_names:
            return 0.0
        pr = self.spec.priors
        lp = float(pc_log_tau_logpdf(theta[0], pr.sigma_u, pr.sigma_alpha))
        if self.phi_prior is not None:
            lp += float(self.phi_prior.logpdf_logit(theta[1])[0])
        return lp

    def log_joint(self, x, theta, y=None) -> float:
        return self.log_likelihood(x, theta, y) + self.log_prior_latent(x) + self.log_prior_theta(theta)

    def gradient(self, x, theta, y=None) -> np.ndarray:
        """d log_joint / dx."""
        y, _ = self._y(y)
        mu = np.exp(self._logE + self.eta(x, theta))
        return self.design(theta).T @ (y - mu) - self.P @ x

    def neg_hessian(self, x, theta, A=None) -> sparse.csc_matrix:
        A = self.design(theta) if A is None else A
        mu = np.exp(self._logE + self.eta(x, theta))
        return (self.P + A.T @ sparse.diags(mu) @ A).tocsc()

    def project(self, x) -> np.ndarray:
        """Re-centre u on every component (and pin singletons to 0)."""
        if not self.spec.include_spatial:
            return x
        x = x.copy()
        u = x[self.sl_u]
        for comp in self.structure.components:
            idx = list(comp)
            u[idx] -= u[idx].mean()
        x[self.sl_u] = u
        return x


# -- module-level API ---------------------------------------------------------------

def _theta_for(model: BymModel, hyper: Hyperparams):
    if not model.theta_names:
        return np.zeros(0)
    return model.theta(hyper)


def linear_predictor(state: LatentState, hyper: Hyperparams, spec: ModelSpec,
                     structure: IcarStructure | None) -> np.ndarray:
    m = BymModel(spec, structure)
    return m.eta(m.pack(state), _theta_for(m, hyper))


def log_likelihood(state: LatentState, hyper: Hyperparams, spec: ModelSpec, structure, y) -> float:
    eta = linear_predictor(state, hyper, spec, structure)
    return poisson_loglik(eta, spec.offset, np.asarray(y, dtype=float))


def log_prior(state: LatentState, hyper: Hyperparams, spec: ModelSpec, structure) -> float:
    """Latent prior plus hyperprior; the hyperprior is a density on (log tau_b, logit phi)."""
    m = BymModel(spec, structure)
    theta = _theta_for(m, hyper)
    if m.theta_names and len(m.theta_names) == 2 and hyper.phi in (0.0, 1.0):
        return -np.inf
    return m.log_prior_latent(m.pack(state)) + m.log_prior_theta(theta)


def sample_icar(structure: IcarStructure, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draws from N(0, Q^-) restricted to the sum-to-zero subspace (unscaled)."""
    vals, vecs = structure.eigen()
    c = structure.n_components
    z = rng.standard_normal((structure.n - c,) if size is None else (size, structure.n - c))
    w = vecs[:, c:] / np.sqrt(vals[c:])
    u = z @ w.T
    # remove round-off: exact per-component centring, singletons pinned to 0
    for comp in structure.components:
        idx = list(comp)
        u[..., idx] -= u[..., idx].mean(axis=-1, keepdims=True)
    return u


def simulate_counts(spec: ModelSpec, structure: IcarStructure | None, hyper: Hyperparams, beta0: float,
                    beta: Sequence[float] = (), seed: int | np.random.Generator = 0,
                    return_state: bool = False):
    """Draw y_i ~ Poisson(E_i exp(eta_i)) from the model; deterministic given ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = spec.n
    v = rng.standard_normal(n)
    u = sample_icar(structure, rng) if spec.include_spatial else np.zeros(n)
    state = LatentState(float(beta0), np.asarray(beta, dtype=float).reshape(-1), v, u)
    if np.isinf(hyper.tau_b):
        b = np.zeros(n)
    else:
        sigma = 1.0 / math.sqrt(hyper.tau_b)
        b = np.zeros(n)
        if spec.include_unstructured:
            b += sigma * math.sqrt(1.0 - hyper.phi if spec.include_spatial else 1.0) * v
        if spec.include_spatial:
            phi = hyper.phi if spec.include_unstructured else 1.0
            b += sigma * math.sqrt(phi / structure.scaling_factor) * u
    eta = beta0 + spec.X @ state.beta + b
    y = rng.poisson(spec.offset * np.exp(eta))
    return (y, state, eta) if return_state else y
