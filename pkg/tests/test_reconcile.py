import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierflow.data import SyntheticSpec, simulate, synthetic_tree
from hierflow.errors import DataError, NumericError
from hierflow.hierarchy import build_tree, coherency_error
from hierflow.reconcile import (
    METHODS,
    ForecastEnsemble,
    bottom_up,
    hier_e2e_projection,
    mint_projection,
    mint_weights,
    naive_bu,
    ols_projection,
    reconcile,
    seasonal_naive,
    shrinkage_covariance,
)

from conftest import TREE7_S


def random_tree(rng, max_nodes=20):
    n = int(rng.integers(2, max_nodes + 1))
    return build_tree([(f"v{int(rng.integers(0, i))}", f"v{i}") for i in range(1, n)])


def random_spd(rng, n):
    X = rng.normal(size=(n, n))
    return X @ X.T + 0.1 * np.eye(n)


def test_bottom_up_examples(tree7, rng):
    ens = bottom_up(np.array([[[1.0, 2, 3, 4]]]), tree7)
    assert isinstance(ens, ForecastEnsemble)
    np.testing.assert_array_equal(ens.samples[0, 0], [10, 3, 7, 1, 2, 3, 4])
    np.testing.assert_array_equal(bottom_up(np.zeros((2, 3, 4)), TREE7_S), np.zeros((2, 3, 7)))
    ints = bottom_up(rng.integers(-10**6, 10**6, size=(1000, 8, 4)).astype(float), tree7)
    assert ints.coherency_error() == 0.0
    floats = bottom_up(rng.normal(size=(1000, 8, 4)), tree7)
    assert np.all(floats.step_coherency() <= 1e-12)


def test_scaling_commutes(tree7, rng):
    b = rng.normal(size=(5, 3, 4))
    np.testing.assert_array_equal(bottom_up(4.0 * b, TREE7_S), 4.0 * bottom_up(b, TREE7_S))
    np.testing.assert_array_equal(naive_bu(0.5 * b[0], tree7), 0.5 * naive_bu(b[0], tree7))
    np.testing.assert_allclose(bottom_up(3.3 * b, TREE7_S), 3.3 * bottom_up(b, TREE7_S), rtol=1e-14)


def test_naive_bu_examples(tree7):
    np.testing.assert_array_equal(naive_bu(np.ones((1, 4)), tree7)[0], [4, 2, 2, 1, 1, 1, 1])
    tree = synthetic_tree(2, 3)
    out = naive_bu(np.full((2, tree.m), 2.5), tree)
    sizes = tree.S().sum(axis=1)
    np.testing.assert_array_equal(out, np.tile(2.5 * sizes, (2, 1)))
    with pytest.raises(DataError):
        naive_bu(np.ones((2, 3)), tree7)


def test_seasonal_naive_reproduces_noiseless_season():
    period = 12
    panel, _ = simulate(SyntheticSpec(family="seasonal-sine", noise=0.0, length=72, period=period))
    hist, future = panel.bottom[:60], panel.bottom[60:]
    fc = seasonal_naive(hist, 12, period)
    np.testing.assert_array_equal(fc, hist[-period:])
    np.testing.assert_allclose(fc, future, atol=2.0**-20)
    with pytest.raises(DataError):
        seasonal_naive(hist[:5], 3, period)


def test_mint_identity_is_pseudo_inverse(tree7):
    S = TREE7_S.astype(float)
    P = mint_projection(S, np.eye(7))
    np.testing.assert_allclose(P @ S, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(P, np.linalg.inv(S.T @ S) @ S.T, atol=1e-10)
    np.testing.assert_allclose(ols_projection(tree7), np.linalg.pinv(S), atol=1e-10)


def test_mint_root_leaf_by_hand():
    tree = build_tree([("r", "l")])
    np.testing.assert_allclose(mint_projection(tree.S(), np.eye(2)), [[0.5, 0.5]], atol=1e-15)


def test_mint_random_spd_draws():
    rng = np.random.default_rng(20)
    for _ in range(20):
        tree = random_tree(rng)
        S = tree.S().astype(float)
        W = random_spd(rng, tree.n)
        P = mint_projection(S, W)
        assert np.max(np.abs(S @ P @ S - S)) <= 1e-8
        y = S @ rng.normal(size=tree.m)
        assert np.max(np.abs(S @ P @ y - y)) <= 1e-8
        np.testing.assert_allclose(mint_projection(S, np.eye(tree.n)), np.linalg.pinv(S), atol=1e-10)


def test_mint_rejects_bad_weights(tree7):
    S = tree7.S()
    with pytest.raises(DataError):
        mint_projection(S, np.eye(6))
    with pytest.raises(NumericError, match="symmetric"):
        mint_projection(S, np.triu(np.ones((7, 7))))
    W = np.eye(7)
    W[3, 3] = -1.0
    with pytest.raises(NumericError, match="eigenvalue"):
        mint_projection(S, W)


def test_mint_weights_modes(rng):
    e = rng.normal(size=(50, 5))
    np.testing.assert_array_equal(mint_weights(e, "ols"), np.eye(5))
    with pytest.raises(DataError):
        mint_weights(e, "diag")
    with pytest.raises(DataError):
        mint_weights(e[:1])


def test_shrinkage_of_identical_columns(tree7, rng):
    col = rng.normal(size=(40, 1))
    e = np.repeat(col, 7, axis=1)
    W, lam = shrinkage_covariance(e)
    C = np.cov(e, rowvar=False)
    off = ~np.eye(7, dtype=bool)
    assert 0.0 <= lam <= 1.0
    assert np.all(np.abs(W[off]) <= np.abs(C[off]) + 1e-12)
    jitter = 1e-8 * np.trace(W) / 7
    assert np.linalg.eigvalsh(W + jitter * np.eye(7)).min() > 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        P = mint_projection(tree7.S(), W + jitter * np.eye(7))
    S = tree7.S()
    assert np.max(np.abs(S @ P @ S - S)) <= 1e-6


def test_jitter_rescues_semidefinite_weights(tree7):
    W = np.ones((7, 7))
    W[0, 1] = W[1, 0] = 1.0 + 1e-9
    with pytest.warns(RuntimeWarning, match="jitter"):
        P = mint_projection(tree7.S(), W)
    S = tree7.S()
    assert np.max(np.abs(S @ P @ S - S)) <= 1e-6


def test_shrinkage_strength_tracks_noise(rng):
    base = rng.normal(size=(60, 1))
    tight = base + 0.05 * rng.normal(size=(60, 4))
    loose = base + 2.0 * rng.normal(size=(60, 4))
    assert shrinkage_covariance(tight)[1] < shrinkage_covariance(loose)[1]


def test_shrinkage_unit_noise_near_identity():
    e = np.random.default_rng(3).normal(size=(5000, 6))
    W = mint_weights(e, "shr")
    assert np.max(np.abs(W - np.eye(6))) < 0.1


def test_shrinkage_matches_reference_formula(rng):
    e = rng.normal(size=(30, 4)) @ rng.normal(size=(4, 4))
    T = e.shape[0]
    # direct transcription with explicit loops
    x = (e - e.mean(0)) / e.std(0, ddof=1)
    num = den = 0.0
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            w = x[:, i] * x[:, j]
            r = w.sum() / (T - 1)
            num += T / (T - 1) ** 3 * ((w - w.mean()) ** 2).sum()
            den += r * r
    lam = min(max(num / den, 0.0), 1.0)
    C = np.cov(e, rowvar=False)
    ref = lam * np.diag(np.diag(C)) + (1 - lam) * C
    W, got = shrinkage_covariance(e)
    assert got == pytest.approx(lam, abs=1e-12)
    np.testing.assert_allclose(W, ref, atol=1e-12)


def _check_projection(A):
    M = hier_e2e_projection(A)
    assert np.max(np.abs(M @ M - M)) <= 1e-10
    assert np.max(np.abs(A @ M)) <= 1e-10
    assert np.max(np.abs(M - M.T)) <= 1e-10
    return M


def test_hier_e2e_fig2(tree7, rng):
    M = _check_projection(tree7.A())
    y = TREE7_S @ rng.normal(size=4)
    np.testing.assert_allclose(M @ y, y, atol=1e-10)


def test_hier_e2e_random_trees():
    rng = np.random.default_rng(5)
    for _ in range(20):
        tree = random_tree(rng, 30)
        M = _check_projection(tree.A())
        assert np.linalg.matrix_rank(M) == tree.m


def test_hier_e2e_without_constraints():
    np.testing.assert_array_equal(hier_e2e_projection(np.zeros((0, 1))), np.eye(1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_every_reconciler_is_coherent(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    base = rng.normal(scale=10, size=(3, 8, tree.n))
    resid = rng.normal(size=(40, tree.n))
    for method in METHODS:
        out = reconcile(base, tree, method, resid)
        assert out.shape == base.shape
        assert ForecastEnsemble(out, tree).step_coherency().max() <= 1e-8 * max(1.0, np.abs(out).max())


def test_reconcile_errors(tree7):
    base = np.zeros((2, 7))
    with pytest.raises(DataError, match="residuals"):
        reconcile(base, tree7, "mint-shr")
    with pytest.raises(DataError, match="unknown"):
        reconcile(base, tree7, "erm")
    with pytest.raises(DataError, match="series"):
        reconcile(np.zeros((2, 6)), tree7, "naive-bu")


def test_ensemble_validation(tree7):
    with pytest.raises(DataError):
        ForecastEnsemble(np.zeros((2, 7)), tree7)
    ens = ForecastEnsemble(np.zeros((2, 3, 7)), tree7)
    assert (ens.count, ens.horizon) == (2, 3)
    assert coherency_error(ens.samples, tree7) == 0.0
