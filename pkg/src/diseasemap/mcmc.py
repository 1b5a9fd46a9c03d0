"""Metropolis-within-Gibbs sampler for the Poisson BYM2 model (validation engine).

Per sweep: random-walk updates of each fixed effect, random-walk updates of theta, a
rescaling move on log tau_b that keeps the random effects b fixed, single-site updates of v
and single-site updates of u. The ICAR field is carried as an unconstrained vector w with
u = w - mean_C(w) on every connected component C; a move of w_i changes all of u_C, but its
likelihood effect reduces to per-component running sums, so each move costs O(degree).
Step sizes adapt during burn-in only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .bym import BymModel, IcarStructure, ModelSpec
from .errors import InputError
from .inference import FitResult, GaussianMixture

TARGET_ACCEPT = 0.44


@dataclass(frozen=True)
class ChainConfig:
    chains: int = 4
    burn_in: int = 2000
    iterations: int = 10000  # sweeps kept per chain before thinning
    thin: int = 2
    seed: int = 20201119
    adapt_every: int = 50
    rhat_threshold: float = 1.1

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("invalid chain configuration")
        if self.iterations // self.thin < 2:
            raise ValueError("too few retained draws")


# -- numba kernel ------------------------------------------------------------------

@njit(cache=True)
def _coefs(theta, has_v, has_u, s):
    if not has_v and not has_u:
        return 0.0, 0.0
    sigma = math.exp(-0.5 * theta[0])
    if has_v and has_u:
        phi = 1.0 / (1.0 + math.exp(-theta[1]))
        return sigma * math.sqrt(1.0 - phi), sigma * math.sqrt(phi / s)
    if has_v:
        return sigma, 0.0
    return 0.0, sigma / math.sqrt(s)


@njit(cache=True)
def _softplus(t):
    if t > 30.0:
        return t
    return math.log1p(math.exp(t))


@njit(cache=True)
def _log_prior_theta(theta, has_v, has_u, sig_lam, phi_lam, g):
    """Unnormalized log density of theta; constants cancel in acceptance ratios."""
    if not has_v and not has_u:
        return 0.0
    sigma = math.exp(-0.5 * theta[0])
    lp = -sig_lam * sigma - 0.5 * theta[0]
    if has_v and has_u:
        t = theta[1]
        phi = 1.0 / (1.0 + math.exp(-t))
        kld = 0.0
        dk = 0.0
        g2 = 0.0
        for gi in g:
            x = phi * gi
            if abs(x) < 1e-3:
                kld += x * x * (0.5 - x / 3.0 + x * x / 4.0)
            else:
                kld += x - math.log1p(x)
            dk += gi * gi * phi / (1.0 + x)
            g2 += gi * gi
        d = math.sqrt(max(kld, 0.0))  # sqrt(2 * kld / 2)
        if d < 1e-12:
            dd = math.sqrt(0.5 * g2)
        else:
            dd = 0.5 * dk / d
        lp += -phi_lam * d + math.log(dd) - _softplus(-t) - _softplus(t)
    return lp


@njit(cache=True)
def _run_chain(y, E, F, nb_ptr, nb_idx, comp, comp_size, has_v, has_u, s, fixed_prec, sig_lam, phi_lam, g,
               beta, v, w, theta, n_burn, n_keep, thin, adapt_every, seed):
    np.random.seed(seed)
    n, k = F.shape
    m = theta.shape[0]
    nc = comp_size.shape[0]
    sb = np.full(k, 0.05)
    sv = np.full(n, 0.5)
    su = np.full(n, 0.5)
    st = np.full(max(m, 1), 0.3)
    sr = 0.3
    ab = np.zeros(k)
    av = np.zeros(n)
    au = np.zeros(n)
    at = np.zeros(max(m, 1))
    ar = 0.0
    acc = np.zeros(5)
    props = np.zeros(5)

    Sy = np.zeros(nc)
    Sw = np.zeros(nc)
    for j in range(n):
        Sy[comp[j]] += y[j]
        Sw[comp[j]] += w[j]
    n_free = n - nc
    Smu = np.zeros(nc)
    shift = np.zeros(nc)
    u = np.zeros(n)
    eta = np.zeros(n)
    eta2 = np.zeros(n)
    lin = F @ beta
    a_v, a_u = _coefs(theta, has_v, has_u, s)
    lpt = _log_prior_theta(theta, has_v, has_u, sig_lam, phi_lam, g)

    n_out = n_keep // thin
    out_beta = np.zeros((n_out, k))
    out_theta = np.zeros((n_out, m))
    out_eta = np.zeros((n_out, n))
    slot = 0
    batch = 0
    for it in range(n_burn + n_keep):
        post = it >= n_burn
        for j in range(n):
            u[j] = w[j] - Sw[comp[j]] / comp_size[comp[j]]
            lin[j] = 0.0
            for kk in range(k):
                lin[j] += F[j, kk] * beta[kk]
            eta[j] = lin[j] + a_v * v[j] + a_u * u[j]

        # fixed effects
        for kk in range(k):
            d = np.random.normal() * sb[kk]
            dl = 0.0
            for j in range(n):
                x = F[j, kk] * d
                dl += y[j] * x - E[j] * math.exp(eta[j]) * math.expm1(x)
            dp = -0.5 * fixed_prec * ((beta[kk] + d) ** 2 - beta[kk] ** 2)
            if post:
                props[0] += 1
            if math.log(np.random.random()) < dl + dp:
                beta[kk] += d
                for j in range(n):
                    eta[j] += F[j, kk] * d
                    lin[j] += F[j, kk] * d
                ab[kk] += 1
                if post:
                    acc[0] += 1

        # hyperparameters
        for t in range(m):
            prop = theta.copy()
            prop[t] += np.random.normal() * st[t]
            pv, pu = _coefs(prop, has_v, has_u, s)
            dl = 0.0
            for j in range(n):
                eta2[j] = lin[j] + pv * v[j] + pu * u[j]
                dl += y[j] * (eta2[j] - eta[j]) - E[j] * (math.exp(eta2[j]) - math.exp(eta[j]))
            lpp = _log_prior_theta(prop, has_v, has_u, sig_lam, phi_lam, g)
            if post:
                props[1] += 1
            if math.log(np.random.random()) < dl + lpp - lpt:
                theta[t] = prop[t]
                a_v, a_u = pv, pu
                lpt = lpp
                for j in range(n):
                    eta[j] = eta2[j]
                at[t] += 1
                if post:
                    acc[1] += 1

        # rescale: tau_b -> tau_b', (v, u) -> r (v, u) with b and eta unchanged
        if m > 0:
            eps = np.random.normal() * sr
            r = math.exp(0.5 * eps)
            q = 0.0
            nd = 0
            if has_v:
                for j in range(n):
                    q += v[j] * v[j]
                nd += n
            if has_u:
                for i in range(n):
                    for p in range(nb_ptr[i], nb_ptr[i + 1]):
                        j = nb_idx[p]
                        if j > i:
                            q += (u[i] - u[j]) ** 2
                nd += n_free
            prop = theta.copy()
            prop[0] += eps
            lpp = _log_prior_theta(prop, has_v, has_u, sig_lam, phi_lam, g)
            if post:
                props[2] += 1
            if math.log(np.random.random()) < -0.5 * (r * r - 1.0) * q + nd * math.log(r) + lpp - lpt:
                theta[0] = prop[0]
                lpt = lpp
                for j in range(n):
                    v[j] *= r
                    w[j] *= r
                    u[j] *= r
                for c in range(nc):
                    Sw[c] *= r
                a_v, a_u = _coefs(theta, has_v, has_u, s)
                ar += 1
                if post:
                    acc[2] += 1

        # unstructured sites
        if has_v:
            for i in range(n):
                d = np.random.normal() * sv[i]
                x = a_v * d
                dl = y[i] * x - E[i] * math.exp(eta[i]) * math.expm1(x)
                dp = -0.5 * ((v[i] + d) ** 2 - v[i] ** 2)
                if post:
                    props[3] += 1
                if math.log(np.random.random()) < dl + dp:
                    v[i] += d
                    eta[i] += x
                    av[i] += 1
                    if post:
                        acc[3] += 1

        # structured sites, exact under the sum-to-zero constraint
        if has_u:
            for c in range(nc):
                Smu[c] = 0.0
                shift[c] = 0.0
            for j in range(n):
                Smu[comp[j]] += E[j] * math.exp(eta[j])
            for i in range(n):
                c = comp[i]
                size = comp_size[c]
                if size == 1:
                    continue
                d = np.random.normal() * su[i]
                nbsum = 0.0
                deg = nb_ptr[i + 1] - nb_ptr[i]
                for p in range(nb_ptr[i], nb_ptr[i + 1]):
                    nbsum += w[nb_idx[p]]
                dp = -0.5 * deg * ((w[i] + d) ** 2 - w[i] ** 2) + d * nbsum
                mu_i = E[i] * math.exp(eta[i] + shift[c])
                x = a_u * d
                sh = x / size
                new_s = math.exp(-sh) * (Smu[c] - mu_i + mu_i * math.exp(x))
                dl = y[i] * x - sh * Sy[c] - (new_s - Smu[c])
                if post:
                    props[4] += 1
                if math.log(np.random.random()) < dl + dp:
                    w[i] += d
                    Sw[c] += d
                    Smu[c] = new_s
                    eta[i] += x
                    shift[c] -= sh
                    au[i] += 1
                    if post:
                        acc[4] += 1
            for j in range(n):
                eta[j] += shift[comp[j]]

        # re-centre w per component; u and eta are unchanged
        for j in range(n):
            w[j] -= Sw[comp[j]] / comp_size[comp[j]]
        for c in range(nc):
            Sw[c] = 0.0

        if not post and (it + 1) % adapt_every == 0:
            batch += 1
            gamma = min(0.5, 1.0 / math.sqrt(batch))
            for kk in range(k):
                sb[kk] *= math.exp(gamma * (ab[kk] / adapt_every - TARGET_ACCEPT))
                ab[kk] = 0.0
            for t in range(m):
                st[t] *= math.exp(gamma * (at[t] / adapt_every - TARGET_ACCEPT))
                at[t] = 0.0
            sr *= math.exp(gamma * (ar / adapt_every - TARGET_ACCEPT))
            ar = 0.0
            for i in range(n):
                sv[i] *= math.exp(gamma * (av[i] / adapt_every - TARGET_ACCEPT))
                su[i] *= math.exp(gamma * (au[i] / adapt_every - TARGET_ACCEPT))
                av[i] = 0.0
                au[i] = 0.0

        if post and (it - n_burn) % thin == thin - 1 and slot < n_out:
            for kk in range(k):
                out_beta[slot, kk] = beta[kk]
            for t in range(m):
                out_theta[slot, t] = theta[t]
            for j in range(n):
                out_eta[slot, j] = eta[j]
            slot += 1

    rates = np.zeros(5)
    for b in range(5):
        rates[b] = acc[b] / props[b] if props[b] > 0 else np.nan
    return out_beta, out_theta, out_eta, rates


# -- diagnostics ---------------------------------------------------------------------

def split_rhat(draws: np.ndarray) -> float:
    """Split-chain potential scale reduction for a (chains x draws) array."""
    draws = np.asarray(draws, dtype=float)
    half = draws.shape[1] // 2
    parts = np.vstack([draws[:, :half], draws[:, half:2 * half]])
    n = parts.shape[1]
    W = parts.var(axis=1, ddof=1).mean()
    B = n * parts.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    return ac / n


def effective_sample_size(draws: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial positive sequence."""
    draws = np.asarray(draws, dtype=float)
    M, N = draws.shape
    acov = np.array([_autocov(c) for c in draws])
    W = acov[:, 0].mean() * N / (N - 1)
    if W == 0:
        return float(M * N)
    var_plus = W * (N - 1) / N
    if M > 1:
        var_plus += draws.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    t = 0
    while t + 1 < N:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        tau += 2 * pair
        t += 2
    return float(M * N / max(tau, 1e-12))


def mcse(draws: np.ndarray) -> float:
    draws = np.asarray(draws, dtype=float)
    return float(draws.std(ddof=1) / math.sqrt(effective_sample_size(draws)))


# -- driver ----------------------------------------------------------------------------

def _chain_seeds(seed: int, chains: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(chains)]


def mcmc_fit(spec: ModelSpec, structure: IcarStructure | None, y, config: ChainConfig = ChainConfig(),
             unit_ids: Sequence[str] | None = None) -> FitResult:
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n,) or np.any(y < 0):
        raise InputError("y must be non-negative counts, one per unit")
    model = BymModel(spec, structure, y)
    n, p = spec.n, spec.p
    has_v, has_u = spec.include_unstructured, spec.include_spatial
    F = np.ascontiguousarray(np.column_stack([np.ones(n), spec.X]))
    if has_u:
        W = structure.Q.copy().tocsr()
        W.setdiag(0)
        W.eliminate_zeros()
        nb_ptr, nb_idx = W.indptr.astype(np.int64), W.indices.astype(np.int64)
        comp = structure.component_index()
        comp_size = np.array([len(c) for c in structure.components], dtype=np.int64)
        s = float(structure.scaling_factor)
    else:
        nb_ptr, nb_idx = np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        comp, comp_size, s = np.zeros(n, dtype=np.int64), np.array([n], dtype=np.int64), 1.0
    pr = spec.priors
    sig_lam = -math.log(pr.sigma_alpha) / pr.sigma_u
    if model.phi_prior is not None:
        phi_lam, g = model.phi_prior.lam, model.phi_prior.g
    else:
        phi_lam, g = 0.0, np.zeros(1)
    m = len(model.theta_names)

    seeds = _chain_seeds(config.seed, config.chains)
    base0 = math.log(max(y.sum(), 0.5) / spec.offset.sum())
    betas, thetas, etas, rates = [], [], [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        beta = np.r_[base0 + 0.1 * rng.standard_normal(), 0.1 * rng.standard_normal(p)]
        v = 0.1 * rng.standard_normal(n) if has_v else np.zeros(n)
        w = 0.1 * rng.standard_normal(n) if has_u else np.zeros(n)
        theta = np.zeros(m)
        if m:
            theta[0] = 3.0 + rng.standard_normal()
        if m == 2:
            theta[1] = rng.standard_normal()
        ob, ot, oe, rt = _run_chain(y, spec.offset, F, nb_ptr, nb_idx, comp, comp_size, has_v, has_u, s,
                                    pr.fixed_precision, sig_lam, phi_lam, g, beta, v, w, theta, config.burn_in,
                                    config.iterations, config.thin, config.adapt_every, seed % (2**32))
        betas.append(ob)
        thetas.append(ot)
        etas.append(oe)
        rates.append(rt)

    fixed_names = ("(Intercept)",) + spec.covariate_names
    chains_beta = np.stack(betas)  # chains x draws x k
    rhat = {nm: split_rhat(chains_beta[:, :, j]) for j, nm in enumerate(fixed_names)}
    ess = {nm: effective_sample_size(chains_beta[:, :, j]) for j, nm in enumerate(fixed_names)}
    err = {nm: mcse(chains_beta[:, :, j]) for j, nm in enumerate(fixed_names)}
    chains_theta = np.stack(thetas)
    for j, nm in enumerate(model.theta_names):
        rhat[nm] = split_rhat(chains_theta[:, :, j])
        ess[nm] = effective_sample_size(chains_theta[:, :, j])
        err[nm] = mcse(chains_theta[:, :, j])
    converged = all(rhat[nm] <= config.rhat_threshold for nm in fixed_names)

    n_draws = chains_beta.shape[0] * chains_beta.shape[1]
    theta_draws = chains_theta.reshape(n_draws, m)
    hyper_names: tuple[str, ...] = ()
    hyper_vals = np.zeros((n_draws, 0))
    if m:
        cols = [np.exp(theta_draws[:, 0])]
        hyper_names = ("tau_b",)
        if m == 2:
            cols.append(1.0 / (1.0 + np.exp(-theta_draws[:, 1])))
            hyper_names = ("tau_b", "phi")
        hyper_vals = np.column_stack(cols)
    draws_fixed = chains_beta.reshape(-1, 1 + p)
    diag = {"rhat": rhat, "ess": ess, "mcse": err, "seeds": seeds,
            "acceptance": np.mean(rates, axis=0).tolist(), "draws": int(draws_fixed.shape[0])}
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i) for i in range(n))
    return FitResult("mcmc", ids, fixed_names, GaussianMixture.from_draws(draws_fixed),
                     GaussianMixture.from_draws(np.vstack(etas)), hyper_names, hyper_vals,
                     np.full(n_draws, 1.0 / n_draws), y, spec.offset.copy(), None, diag,
                     converged)
