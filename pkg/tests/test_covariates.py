import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from diseasemap.covariates import (
    CovariateMatrix,
    apply_transform,
    collinearity_check,
    kaiser_select,
    merge_covariates,
    pca,
    prepare_covariates,
    skewness,
    standardize,
    unique_candidates,
)
from diseasemap.errors import InputError


def matrix(cols: dict[str, np.ndarray]) -> CovariateMatrix:
    n = len(next(iter(cols.values())))
    frame = pd.DataFrame({"unit_id": [f"u{i}" for i in range(n)], **cols})
    return prepare_covariates(frame, transform=False)


def two_block(rng, n=400, noise=0.3):
    a, b = rng.normal(size=n), rng.normal(size=n)
    cols = {f"a{k}": a + noise * rng.normal(size=n) for k in range(4)}
    cols.update({f"b{k}": b + noise * rng.normal(size=n) for k in range(4)})
    return matrix(cols)


# -- transforms ------------------------------------------------------------------

def test_constant_column_untransformed():
    x, tag = apply_transform([3.0] * 6)
    assert tag == "none" and np.all(x == 3.0)


def test_log_for_heavy_right_tail():
    raw = np.array([1.0, 10.0, 100.0, 1000.0])
    # oracle: scipy's biased sample skewness, independent of our implementation
    assert stats.skew(raw) > 1
    assert skewness(raw) == pytest.approx(stats.skew(raw), rel=1e-12)
    x, tag = apply_transform(raw)
    assert tag == "log"
    np.testing.assert_allclose(x, [0.0, 2.302585, 4.605170, 6.907755], atol=1e-6)


def test_sqrt_when_zeros_present():
    x, tag = apply_transform([0.0, 0.0, 0.0, 1.0, 1.0, 4.0, 100.0])
    assert tag == "sqrt" and x[-1] == 10.0


def test_negative_values_warn():
    with pytest.warns(UserWarning, match="negative"):
        _, tag = apply_transform([-1.0, 0.0, 0.0, 0.0, 0.0, 50.0])
    assert tag == "none"


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(3, 40), elements=st.floats(0, 1e6)))
def test_transform_preserves_rank_order(x):
    y, _ = apply_transform(x)
    assert np.all(np.diff(y[np.argsort(x, kind="stable")]) >= 0)


# -- standardize ------------------------------------------------------------------

def test_standardize_examples():
    z, m, s = standardize([1, 2, 3])
    np.testing.assert_allclose(z, [-1, 0, 1])
    assert (m, s) == (2.0, 1.0)
    z, _, _ = standardize([10, 20])
    np.testing.assert_allclose(z, [-0.70710678, 0.70710678], atol=1e-8)


def test_standardize_constant_names_column():
    with pytest.raises(InputError, match="income"):
        standardize([5, 5, 5], name="income")


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(3, 50), elements=st.floats(-1e3, 1e3)))
def test_standardize_properties(x):
    if np.std(x) < 1e-6:
        return
    z, _, _ = standardize(x)
    assert abs(z.mean()) <= 1e-10
    assert abs(z.std(ddof=1) - 1) <= 1e-10
    z2, _, _ = standardize(z)
    np.testing.assert_allclose(z2, z, atol=1e-10)


# -- PCA ----------------------------------------------------------------------------

def test_perfectly_correlated_pair():
    x = np.random.default_rng(0).normal(size=30)
    res = pca(matrix({"a": x, "b": 3 * x + 1}))
    np.testing.assert_allclose(res.eigenvalues, [2, 0], atol=1e-10)
    assert res.rank_deficient


def test_uncorrelated_columns_retain_nothing():
    # columns of a Hadamard matrix without its constant column: exactly orthogonal, mean zero
    from scipy.linalg import hadamard

    h = hadamard(8)[:, 1:5].astype(float)
    res = pca(matrix({f"c{k}": h[:, k] for k in range(4)}))
    np.testing.assert_allclose(res.eigenvalues, 1.0, atol=1e-12)
    assert res.retained == []
    with pytest.warns(UserWarning, match="no principal component"):
        assert kaiser_select(res) == []


def test_eigenvalues_match_svd_oracle():
    rng = np.random.default_rng(11)
    cov = np.array([[1, .6, .3, 0, 0], [.6, 1, .2, 0, .1], [.3, .2, 1, .4, 0], [0, 0, .4, 1, .5],
                    [0, .1, 0, .5, 1]])
    raw = rng.multivariate_normal(np.zeros(5), cov, size=200) * [1, 5, 0.1, 2, 30]
    m = matrix({f"x{k}": raw[:, k] for k in range(5)})
    # independent route: singular values of the standardized data
    zs = (raw - raw.mean(0)) / raw.std(0, ddof=1)
    sv = np.linalg.svd(zs, compute_uv=False) ** 2 / (len(zs) - 1)
    res = pca(m)
    np.testing.assert_allclose(res.eigenvalues, sv, atol=1e-8)


def test_sign_convention():
    res = two_block(np.random.default_rng(2))
    res = pca(res)
    for k in range(res.loadings.shape[1]):
        col = res.loadings[:, k]
        assert col[np.argmax(np.abs(col))] > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 7))
def test_pca_invariants(seed, p):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(p, p))
    raw = rng.normal(size=(60, p)) @ a
    m = matrix({f"c{k}": raw[:, k] for k in range(p)})
    res = pca(m)
    assert abs(res.eigenvalues.sum() - p) <= 1e-8
    np.testing.assert_allclose(res.loadings.T @ res.loadings, np.eye(p), atol=1e-8)
    corr = np.corrcoef(m.values, rowvar=False)
    recon = res.loadings @ np.diag(res.eigenvalues) @ res.loadings.T
    assert np.linalg.norm(recon - corr) <= 1e-8
    # scale invariance of the whole screening chain
    scale = rng.uniform(0.1, 100, size=p)
    m2 = matrix({f"c{k}": raw[:, k] * scale[k] for k in range(p)})
    np.testing.assert_allclose(m2.values, m.values, atol=1e-9)
    res2 = pca(m2)
    np.testing.assert_allclose(res2.eigenvalues, res.eigenvalues, atol=1e-9)
    sel = [c.covariates for c in kaiser_select(res)] if res.retained else []
    sel2 = [c.covariates for c in kaiser_select(res2)] if res2.retained else []
    assert sel == sel2


def test_pca_needs_more_units_than_columns():
    with pytest.raises(InputError):
        pca(matrix({"a": np.array([1.0, 2.0]), "b": np.array([2.0, 1.0])}))


# -- selection ------------------------------------------------------------------------

def test_single_component_selects_all_four():
    x = np.random.default_rng(3).normal(size=100)
    noise = np.random.default_rng(4).normal(size=(100, 4)) * 0.1
    res = pca(matrix({f"c{k}": x + noise[:, k] for k in range(4)}))
    groups = kaiser_select(res)
    assert len(groups) == 1
    assert sorted(groups[0].covariates) == ["c0", "c1", "c2", "c3"]


def test_two_blocks_select_within_block():
    rng = np.random.default_rng(5)
    res = pca(two_block(rng))
    groups = kaiser_select(res)
    assert len(groups) == 2
    blocks = [{name[0] for name in g.covariates} for g in groups]
    assert sorted(map(tuple, blocks)) == [("a",), ("b",)]
    # oracle: the same selection from a dense eigensolver on the raw correlation matrix
    m = two_block(np.random.default_rng(5))
    evals, evecs = np.linalg.eig(np.corrcoef(m.values, rowvar=False))
    top = np.argsort(-evals.real)[:2]
    for g, k in zip(groups, top):
        want = {m.names[i] for i in np.argsort(-np.abs(evecs[:, k].real))[:4]}
        assert set(g.covariates) == want


def test_ties_by_column_order():
    from diseasemap.covariates import PcaResult

    res = PcaResult(np.array([2.0, 0.5]), np.array([[0.5, 0.1], [0.5, 0.2], [0.5, 0.3], [0.5, 0.4]]),
                    ("w", "x", "y", "z"))
    assert kaiser_select(res, k=2)[0].covariates == ("w", "x")


def test_unique_candidates_dedupes():
    from diseasemap.covariates import ComponentCandidates

    g = [ComponentCandidates(0, 2.0, ("a", "b"), (1, 1)), ComponentCandidates(1, 1.5, ("b", "c"), (1, 1))]
    assert unique_candidates(g) == ["a", "b", "c"]


def test_collinearity():
    rng = np.random.default_rng(7)
    x = rng.normal(size=50)
    assert collinearity_check({"a": x, "b": x}) == [("a", "b", pytest.approx(1.0))]
    assert collinearity_check({"a": x, "b": -x}) == [("a", "b", pytest.approx(-1.0))]
    big = rng.normal(size=(1000, 3))
    assert collinearity_check({f"c{k}": big[:, k] for k in range(3)}) == []


# -- merged units ----------------------------------------------------------------------

def test_weighted_recombination():
    frame = pd.DataFrame({"unit_id": ["a", "b", "c"], "pop": [100, 300, 50], "income": [10.0, 20.0, 7.0]})
    out = merge_covariates(frame, {"a": "b", "b": "b", "c": "c"}, weight_column="pop")
    assert list(out["unit_id"]) == ["b", "c"]
    assert out.loc[0, "income"] == pytest.approx((100 * 10 + 300 * 20) / 400)
    assert out.loc[0, "pop"] == 400
