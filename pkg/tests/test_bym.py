import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from diseasemap.bym import (
    BymModel,
    Hyperparams,
    LatentState,
    ModelSpec,
    PhiPrior,
    compute_scaling_factor,
    constrained_marginal_variances,
    icar_precision,
    icar_structure,
    log_likelihood,
    log_prior,
    pc_sigma_logpdf,
    poisson_loglik,
    sample_icar,
    simulate_counts,
)
from diseasemap.errors import InputError, NumericalError
from diseasemap.fixtures import lattice_units
from diseasemap.geounits import build_queen_adjacency, graph_from_pairs

LOG_2PI = math.log(2 * math.pi)


def path(n=3):
    return graph_from_pairs([f"p{i}" for i in range(n)], {(i, i + 1): 1.0 for i in range(n - 1)})


def random_graph(rng, n, p):
    pairs = {(i, j): 1.0 for i in range(n) for j in range(i + 1, n) if rng.random() < p}
    return graph_from_pairs([f"g{i}" for i in range(n)], pairs)


def dense_ginv_variances(Q, components):
    """Oracle: pseudo-inverse per component via eigendecomposition."""
    var = np.full(Q.shape[0], np.nan)
    for comp in components:
        if len(comp) < 2:
            continue
        idx = np.array(comp)
        vals, vecs = np.linalg.eigh(Q[np.ix_(idx, idx)])
        keep = vals > 1e-9
        var[idx] = np.einsum("ij,j,ij->i", vecs[:, keep], 1.0 / vals[keep], vecs[:, keep])
    return var


# -- structure ------------------------------------------------------------------------

def test_path_precision():
    s = icar_precision(path())
    assert np.array_equal(s.Q.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert s.n_components == 1


def test_edgeless_graph():
    s = icar_precision(graph_from_pairs(["a", "b"], {}))
    assert np.array_equal(s.Q.toarray(), np.zeros((2, 2)))
    assert s.n_components == 2
    with pytest.raises(InputError):
        compute_scaling_factor(s)


def test_lattice_degrees():
    s = icar_precision(build_queen_adjacency(lattice_units(3, 3)))
    assert np.array_equal(np.diag(s.Q.toarray()), [3, 5, 3, 5, 8, 5, 3, 5, 3])


def test_path_marginal_variances():
    s = icar_precision(path())
    np.testing.assert_allclose(constrained_marginal_variances(s), [5 / 9, 2 / 9, 5 / 9], atol=1e-12)
    # geometric mean of (5/9, 2/9, 5/9)
    assert compute_scaling_factor(s) == pytest.approx((50 / 729) ** (1 / 3), abs=1e-12)
    assert compute_scaling_factor(s) == pytest.approx(0.4093368, abs=1e-7)


def test_two_disconnected_edges():
    s = icar_precision(graph_from_pairs(list("abcd"), {(0, 1): 1.0, (2, 3): 1.0}))
    var = constrained_marginal_variances(s)
    np.testing.assert_allclose(var, 0.25, atol=1e-12)
    assert compute_scaling_factor(s) == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("n", [3, 5, 8])
def test_complete_graph(n):
    g = graph_from_pairs([str(i) for i in range(n)], {(i, j): 1.0 for i in range(n) for j in range(i + 1, n)})
    s = icar_precision(g)
    var = constrained_marginal_variances(s)
    np.testing.assert_allclose(var, (n - 1) / n**2, atol=1e-12)
    assert compute_scaling_factor(s) == pytest.approx((n - 1) / n**2, abs=1e-12)


def test_singleton_excluded_from_scaling():
    g = graph_from_pairs(list("abcd"), {(0, 1): 1.0, (1, 2): 1.0})
    s = icar_structure(g)
    var = constrained_marginal_variances(s)
    assert np.isnan(var[3])
    assert s.scaling_factor == pytest.approx((50 / 729) ** (1 / 3), abs=1e-12)
    assert s.singleton.tolist() == [False, False, False, True]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.5), st.integers(0, 2**31 - 1))
def test_structure_properties(n, p, seed):
    g = random_graph(np.random.default_rng(seed), n, p)
    s = icar_precision(g)
    Q = s.Q.toarray()
    assert np.array_equal(Q, Q.T)
    assert np.all(Q.sum(axis=1) == 0)
    vals = np.linalg.eigvalsh(Q)
    assert vals.min() >= -1e-10
    assert np.linalg.matrix_rank(Q) == n - s.n_components
    Qp = np.linalg.pinv(Q)
    assert np.abs(Q @ Qp @ Q - Q).max() < 1e-8
    if any(len(c) > 1 for c in s.components):
        oracle = dense_ginv_variances(Q, s.components)
        np.testing.assert_allclose(constrained_marginal_variances(s), oracle, atol=1e-10, equal_nan=True)
        ok = ~np.isnan(oracle)
        assert compute_scaling_factor(s) == pytest.approx(math.exp(np.log(oracle[ok]).mean()), abs=1e-8)
        assert compute_scaling_factor(s) > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 30), st.integers(0, 2**31 - 1))
def test_sample_icar_centred(n, seed):
    rng = np.random.default_rng(seed)
    s = icar_structure(random_graph(rng, n, 0.2))
    u = sample_icar(s, rng)
    assert np.all(np.isfinite(u))
    for comp in s.components:
        assert abs(u[list(comp)].mean()) <= 1e-10
    assert np.all(u[s.singleton] == 0)


# -- likelihood -----------------------------------------------------------------------

def test_loglik_examples():
    assert poisson_loglik([0.0], [1.0], [0.0]) == pytest.approx(-1.0, abs=1e-14)
    assert poisson_loglik([0.0], [1.0], [2.0]) == pytest.approx(-1 - math.log(2), abs=1e-12)
    assert -1 - math.log(2) == pytest.approx(-1.6931, abs=1e-4)


def test_loglik_matches_fsum_oracle():
    rng = np.random.default_rng(4)
    eta = rng.normal(0, 0.5, 30)
    E = rng.uniform(1, 40, 30)
    y = rng.poisson(E * np.exp(eta)).astype(float)
    oracle = math.fsum(yi * (math.log(e) + h) - e * math.exp(h) - math.lgamma(yi + 1) for h, e, yi in zip(eta, E, y))
    assert poisson_loglik(eta, E, y) == pytest.approx(oracle, abs=1e-12 * max(1, abs(oracle)))


def test_loglik_overflow_reported():
    with pytest.raises(NumericalError):
        poisson_loglik([800.0], [1.0], [1.0])


def test_loglik_concave_in_eta():
    rng = np.random.default_rng(1)
    eta = rng.normal(0, 2, 50)
    E = rng.uniform(0.1, 10, 50)
    assert np.all(-E * np.exp(eta) < 0)


# -- priors -----------------------------------------------------------------------------

def test_pc_sigma_density_at_zero():
    assert math.exp(pc_sigma_logpdf(0.0)) == pytest.approx(-math.log(0.01), abs=1e-12)
    assert math.exp(pc_sigma_logpdf(0.0)) == pytest.approx(4.6052, abs=1e-4)


def test_pc_sigma_tail_probability():
    lam = -math.log(0.01)
    assert math.exp(-lam * 1.0) == pytest.approx(0.01)
    # integrate the density beyond U
    from scipy.integrate import quad
    tail, _ = quad(lambda s: math.exp(pc_sigma_logpdf(s)), 1.0, np.inf)
    assert tail == pytest.approx(0.01, abs=1e-10)


@pytest.mark.parametrize("shape", [(1, 3), (4, 4), (10, 10)])
def test_phi_prior_calibrated(shape):
    s = icar_structure(build_queen_adjacency(lattice_units(*shape)))
    p = s.phi_prior(0.5, 2 / 3)
    assert float(p.cdf(0.5)[0]) == pytest.approx(2 / 3, abs=1e-12)
    # the numerically normalized table integrates to 1 and agrees with the closed-form cdf
    t = np.linspace(-25, 25, 20001)
    assert np.trapezoid(np.exp(p.logpdf_logit(t)), t) == pytest.approx(1.0, abs=1e-8)
    from scipy.integrate import quad
    mass, _ = quad(lambda x: math.exp(p.logpdf_logit(x)[0]), -25, 0.0, epsabs=1e-12, limit=200)
    assert mass == pytest.approx(2 / 3, abs=1e-8)


def test_phi_prior_unattainable_alpha():
    with pytest.raises(InputError):
        PhiPrior(np.array([0.5, 1.5]), 0.5, 0.01)


def test_hyperparams_validated():
    with pytest.raises(InputError):
        Hyperparams(0.0, 0.5)
    with pytest.raises(InputError):
        Hyperparams(1.0, 1.5)


def _four_unit_instance():
    g = graph_from_pairs(list("abcd"), {(0, 1): 1.0, (1, 2): 1.0, (2, 3): 1.0, (0, 2): 1.0})
    s = icar_structure(g)
    rng = np.random.default_rng(11)
    X = rng.standard_normal((4, 1))
    spec = ModelSpec(X, rng.uniform(2, 5, 4))
    u = rng.standard_normal(4)
    u -= u.mean()
    state = LatentState(0.3, np.array([-0.2]), rng.standard_normal(4), u)
    return s, spec, state


def test_joint_matches_term_by_term_oracle():
    s, spec, state = _four_unit_instance()
    hyper = Hyperparams(3.0, 0.4)
    Q = s.Q.toarray()
    vals = np.linalg.eigvalsh(Q)[1:]
    sd_fixed = 1 / math.sqrt(0.001)
    oracle = math.fsum([
        stats.norm.logpdf(state.beta0, 0, sd_fixed), stats.norm.logpdf(state.beta[0], 0, sd_fixed),
        *stats.norm.logpdf(state.v),
        0.5 * np.log(vals).sum() - 1.5 * LOG_2PI - 0.5 * state.u @ Q @ state.u,
    ])
    # hyperprior on (log tau, logit phi) in closed form
    lam = -math.log(0.01)
    sigma = hyper.tau_b ** -0.5
    oracle += math.log(lam) - lam * sigma + math.log(sigma / 2)
    p = s.phi_prior(0.5, 2 / 3)
    h = 1e-6
    dd = (p.distance(hyper.phi + h)[0] - p.distance(hyper.phi - h)[0]) / (2 * h)
    dens = p.lam * math.exp(-p.lam * p.distance(hyper.phi)[0]) * dd / -math.expm1(-p.lam * p.distance(1.0)[0])
    oracle += math.log(dens) + math.log(hyper.phi * (1 - hyper.phi))
    assert log_prior(state, hyper, spec, s) == pytest.approx(oracle, abs=1e-8)
    # without the finite-difference derivative the latent part is exact
    m = BymModel(spec, s)
    latent = oracle - (math.log(lam) - lam * sigma + math.log(sigma / 2)) - (math.log(dens) + math.log(
        hyper.phi * (1 - hyper.phi)))
    assert m.log_prior_latent(m.pack(state)) == pytest.approx(latent, abs=1e-10)


def test_quadratic_term_zero_at_u_zero():
    s, spec, state = _four_unit_instance()
    m = BymModel(spec, s)
    x = m.pack(LatentState(0.0, np.zeros(1), np.zeros(4), np.zeros(4)))
    assert m.log_prior_latent(x) == pytest.approx(m._prior_const, abs=1e-14)


def test_log_likelihood_uses_bym2_split():
    s, spec, state = _four_unit_instance()
    hyper = Hyperparams(4.0, 0.25)
    b = 0.5 * (math.sqrt(0.75) * state.v + math.sqrt(0.25 / s.scaling_factor) * state.u)
    eta = state.beta0 + spec.X @ state.beta + b
    y = np.array([1.0, 3.0, 0.0, 6.0])
    assert log_likelihood(state, hyper, spec, s, y) == pytest.approx(poisson_loglik(eta, spec.offset, y), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2), st.integers(0, 2**31 - 1),
       st.sampled_from([(True, True), (True, False), (False, True)]))
def test_gradient_matches_finite_differences(n, p, seed, flags):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 0.5)
    s = icar_structure(g) if any(len(c) > 1 for c in icar_precision(g).components) else None
    if s is None:
        return
    spec = ModelSpec(rng.standard_normal((n, p)), rng.uniform(1, 10, n), include_spatial=flags[0],
                     include_unstructured=flags[1])
    y = rng.poisson(spec.offset).astype(float)
    m = BymModel(spec, s, y)
    theta = np.array([rng.uniform(-1, 3), rng.uniform(-2, 2)])[: len(m.theta_names)]
    x = m.project(rng.normal(0, 0.3, m.dim))
    g_an = m.gradient(x, theta)
    h = 1e-5
    g_fd = np.array([(m.log_joint(x + h * e, theta) - m.log_joint(x - h * e, theta)) / (2 * h)
                     for e in np.eye(m.dim)])
    scale = np.maximum(np.abs(g_fd), 1.0)
    assert np.max(np.abs(g_an - g_fd) / scale) < 1e-6


def test_hessian_matches_finite_differences():
    s, spec, state = _four_unit_instance()
    y = np.array([2.0, 5.0, 1.0, 3.0])
    m = BymModel(spec, s, y)
    theta = np.array([1.0, 0.3])
    x = m.pack(state)
    H = m.neg_hessian(x, theta).toarray()
    h = 1e-5
    H_fd = -np.array([(m.gradient(x + h * e, theta) - m.gradient(x - h * e, theta)) / (2 * h) for e in np.eye(m.dim)])
    np.testing.assert_allclose(H, H_fd, atol=1e-6)


# -- simulation -------------------------------------------------------------------------

def _lattice(rows=20, cols=20):
    return icar_structure(build_queen_adjacency(lattice_units(rows, cols)))


def test_simulate_limit_case():
    s = _lattice()
    E = np.random.default_rng(0).uniform(5, 15, 400)
    spec = ModelSpec.intercept_only(E)
    y = simulate_counts(spec, s, Hyperparams(np.inf, 0.5), 0.0, seed=3)
    ratio = y / E
    se = math.sqrt(np.mean(1 / E) / 400)
    assert abs(ratio.mean() - 1.0) < 3 * se


def test_simulate_doubling():
    s = _lattice()
    E = np.full(400, 10.0)
    y = simulate_counts(ModelSpec.intercept_only(E), s, Hyperparams(np.inf, 0.5), math.log(2), seed=5)
    se = math.sqrt(2 / 10 / 400)
    assert abs((y / E).mean() - 2.0) < 3 * se


def test_simulate_deterministic():
    s = _lattice(5, 5)
    spec = ModelSpec(np.linspace(-1, 1, 25), np.full(25, 7.0))
    a = simulate_counts(spec, s, Hyperparams(4.0, 0.5), 0.1, [0.2], seed=9)
    b = simulate_counts(spec, s, Hyperparams(4.0, 0.5), 0.1, [0.2], seed=9)
    assert np.array_equal(a, b)


def test_spec_rejects_bad_offset():
    with pytest.raises(InputError):
        ModelSpec.intercept_only(np.array([1.0, 0.0]))
    with pytest.raises(InputError):
        ModelSpec(np.zeros((3, 1)), np.ones(2))


def test_variance_calibration():
    """Average prior marginal variance of b is 1 (tau_b = 1) for any phi on a 10 x 10 lattice.

    Computed exactly: Var(b_i) = (1 - phi) + phi * Var(u_i) / s.
    """
    s = _lattice(10, 10)
    var_u = constrained_marginal_variances(s)
    for phi in (0.0, 0.25, 0.5, 0.75, 1.0):
        avg = np.mean((1 - phi) + phi * var_u / s.scaling_factor)
        assert avg == pytest.approx(1.0, rel=0.02), f"phi={phi}: mean variance {avg:.4f}"
