import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, optimize, stats

from diseasemap.bym import BymModel, Hyperparams, ModelSpec, simulate_counts
from diseasemap.errors import InputError
from diseasemap.inference import (
    GaussianMixture,
    GridConfig,
    LaplaceEngine,
    laplace_fit,
    load_fit,
    predicted_rr,
    save_fit,
    weighted_quantile,
)
from diseasemap.simulate import lattice_instance, lattice_structure


def plain(E, X=None, **kw):
    X = np.zeros((len(E), 0)) if X is None else X
    return ModelSpec(X, E, include_spatial=False, include_unstructured=False, **kw)


# -- mode -------------------------------------------------------------------------------

def test_mode_intercept_closed_form():
    E = np.array([2.0, 3.0, 5.0])
    y = np.array([4.0, 7.0, 9.0])  # sum y = 20, sum E = 10
    eng = LaplaceEngine(BymModel(plain(E), None, y))
    mode = eng.find_mode(np.zeros(0))
    assert mode.x[0] == pytest.approx(math.log(2), abs=1e-3)
    assert mode.grad_norm < 1e-8


def test_mode_y_equals_e():
    E = np.array([3.0, 8.0, 1.0, 4.0])
    eng = LaplaceEngine(BymModel(plain(E), None, E.copy()))
    assert eng.find_mode(np.zeros(0)).x[0] == pytest.approx(0.0, abs=1e-6)


def test_mode_matches_generic_optimizer():
    structure, _ = lattice_structure(2, 5)
    rng = np.random.default_rng(2)
    spec = ModelSpec(rng.standard_normal((10, 1)), rng.uniform(2, 8, 10))
    y = rng.poisson(spec.offset).astype(float)
    m = BymModel(spec, structure, y)
    theta = np.array([1.2, 0.4])
    mode = LaplaceEngine(m).find_mode(theta)
    # oracle: unconstrained BFGS in a basis of the constraint null space
    Z = linalg.null_space(m.C)
    res = optimize.minimize(lambda z: -(m.log_likelihood(Z @ z, theta) + m.log_prior_latent(Z @ z)),
                            np.zeros(Z.shape[1]), jac=lambda z: -Z.T @ m.gradient(Z @ z, theta),
                            method="BFGS", options={"gtol": 1e-11, "maxiter": 10000})
    np.testing.assert_allclose(mode.x, Z @ res.x, atol=1e-6)
    assert abs(m.C @ mode.x).max() < 1e-10


def test_logdet_on_constraint_subspace_matches_dense():
    structure, _ = lattice_structure(3, 3)
    rng = np.random.default_rng(5)
    spec = ModelSpec(rng.standard_normal((9, 1)), rng.uniform(2, 8, 9))
    y = rng.poisson(spec.offset).astype(float)
    m = BymModel(spec, structure, y)
    theta = np.array([0.5, -0.3])
    mode = LaplaceEngine(m).find_mode(theta)
    H = m.neg_hessian(mode.x, theta).toarray()
    Z = linalg.null_space(m.C)
    assert mode.logdet == pytest.approx(np.linalg.slogdet(Z.T @ H @ Z)[1], abs=1e-8)


# -- fits ---------------------------------------------------------------------------------

def test_nonspatial_recovery():
    rng = np.random.default_rng(8)
    n = 400
    x = rng.standard_normal(n)
    x = (x - x.mean()) / x.std(ddof=1)
    spec = ModelSpec(x[:, None], rng.uniform(20, 50, n), ("income",), include_spatial=False)
    y = simulate_counts(spec, None, Hyperparams(25.0, 0.0), 0.0, [math.log(0.91)], seed=108)
    fit = laplace_fit(spec, None, y)
    rr = fit.relative_risks().set_index("parameter").loc["income", "RR"]
    assert 0.88 <= rr <= 0.94


def test_single_grid_point():
    inst = lattice_instance(5, 5, 1)
    fit = laplace_fit(inst.spec, inst.structure, inst.y, GridConfig(points=1))
    assert fit.hyper_weights.tolist() == [1.0]
    assert fit.grid["weights"] == [1.0]


def test_intercept_only_y_equals_e():
    structure, ids = lattice_structure(10, 10)
    E = np.random.default_rng(3).uniform(10, 30, 100).round()
    fit = laplace_fit(ModelSpec.intercept_only(E), structure, E.copy(), unit_ids=ids)
    rr = predicted_rr(fit).rr
    assert np.all((rr >= 0.9) & (rr <= 1.1))
    row = fit.relative_risks().iloc[0]
    assert row["ci_low"] <= 1.0 <= row["ci_high"]


@pytest.fixture(scope="module")
def small_fit():
    inst = lattice_instance(8, 8, 4)
    return inst, laplace_fit(inst.spec, inst.structure, inst.y, unit_ids=inst.unit_ids)


def test_weights_and_quantiles_ordered(small_fit):
    _, fit = small_fit
    assert sum(fit.grid["weights"]) == pytest.approx(1.0, abs=1e-12)
    assert fit.hyper_weights.sum() == pytest.approx(1.0, abs=1e-12)
    for frame in (fit.fixed_summary(), fit.hyper_summary()):
        assert np.all(frame["q2.5"] < frame["mean"]) and np.all(frame["mean"] < frame["q97.5"])
    est = predicted_rr(fit)
    assert np.all(est.rr > 0) and np.all(est.lo <= est.hi)
    assert np.all((est.exceedance >= 0) & (est.exceedance <= 1))


def test_shrinkage(small_fit):
    inst, fit = small_fit
    rr = predicted_rr(fit).rr
    assert np.var(rr) <= np.var(inst.y / inst.spec.offset)


def test_offset_scaling():
    inst = lattice_instance(6, 6, 2)
    k = 3.0
    a = laplace_fit(inst.spec, inst.structure, inst.y)
    spec_k = ModelSpec(inst.spec.X, inst.spec.offset * k, inst.spec.covariate_names)
    b = laplace_fit(spec_k, inst.structure, inst.y)
    ma, mb = a.fixed.expectation(), b.fixed.expectation()
    assert mb[0] - ma[0] == pytest.approx(-math.log(k), abs=1e-3)
    np.testing.assert_allclose(mb[1:], ma[1:], atol=1e-3)
    # area relative risks are relative to the offset; fitted means E_i RR_i are unchanged
    np.testing.assert_allclose(predicted_rr(b).rr * k, predicted_rr(a).rr, rtol=1e-3)


def test_fit_deterministic(small_fit, tmp_path):
    inst, fit = small_fit
    again = laplace_fit(inst.spec, inst.structure, inst.y, unit_ids=inst.unit_ids)
    assert np.array_equal(fit.fixed.mean, again.fixed.mean)
    assert np.array_equal(fit.eta.var, again.eta.var)
    pa = save_fit(fit, tmp_path / "a")
    pb = save_fit(again, tmp_path / "b")
    assert [p.read_bytes() for p in pa] == [p.read_bytes() for p in pb]


def test_save_load_roundtrip(small_fit, tmp_path):
    _, fit = small_fit
    save_fit(fit, tmp_path)
    back = load_fit(tmp_path)
    assert back.unit_ids == fit.unit_ids and back.fixed_names == fit.fixed_names
    np.testing.assert_array_equal(back.eta.mean, fit.eta.mean)
    assert back.fixed_summary().equals(fit.fixed_summary())
    with pytest.raises(InputError):
        load_fit(tmp_path / "nothing")


def test_bad_counts_rejected():
    with pytest.raises(ValueError):
        laplace_fit(plain(np.ones(3)), None, np.array([1.0, -1.0, 2.0]))
    with pytest.raises(ValueError):
        laplace_fit(plain(np.ones(3)), None, np.array([1.0, 0.5, 2.0]))


# -- mixtures -----------------------------------------------------------------------------

def test_lognormal_mean():
    mix = GaussianMixture(np.ones(1), np.zeros((1, 1)), np.full((1, 1), 0.04))
    assert mix.mean_exp()[0] == pytest.approx(math.exp(0.02), abs=1e-12)
    assert mix.mean_exp()[0] == pytest.approx(1.0202, abs=1e-4)


def test_point_mass():
    mix = GaussianMixture.from_draws(np.full((1, 1), math.log(2)))
    assert mix.mean_exp()[0] == pytest.approx(2.0)
    assert math.exp(mix.quantile(0.025)[0]) == pytest.approx(2.0)
    assert math.exp(mix.quantile(0.975)[0]) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(0.01, 0.99))
def test_single_gaussian_quantile(mu, sd, q):
    mix = GaussianMixture(np.ones(1), np.full((1, 1), mu), np.full((1, 1), sd**2))
    assert mix.quantile(q)[0] == pytest.approx(stats.norm.ppf(q, mu, sd), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(-2, 2), st.floats(0.0, 1.0)), min_size=1, max_size=6))
def test_mixture_moments_and_cdf(comps):
    w, m, v = map(np.array, zip(*comps))
    mix = GaussianMixture(w, m[:, None], v[:, None])
    wn = w / w.sum()
    assert mix.expectation()[0] == pytest.approx(wn @ m)
    assert mix.variance()[0] == pytest.approx(max(wn @ (v + m**2) - (wn @ m) ** 2, 0), abs=1e-12)
    xs = np.linspace(-6, 6, 25)
    F = [mix.cdf(x)[0] for x in xs]
    assert np.all(np.diff(F) >= -1e-15)
    assert mix.quantile(0.025)[0] <= mix.quantile(0.975)[0]


def test_weighted_quantile_symmetric():
    x = np.arange(1, 6, dtype=float)
    assert weighted_quantile(x, np.ones(5), 0.5) == pytest.approx(3.0)
