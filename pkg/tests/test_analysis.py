import itertools

import numpy as np
import pytest

from protoquad.analysis import (
    appendix_suite,
    brute_force_optimum,
    hessian_gram_check,
    orthoproj_residuals,
    random_instance,
    sparse_eigenvalue,
    subset_value,
    submodularity_ratio,
    variance_mmd_gap,
    verify_convergence_bound,
)
from protoquad.embedding import Dataset, ParamVector, train_logistic
from protoquad.errors import GuardExceeded, PremiseError

from conftest import logistic_data


def test_sparse_eigenvalue_identity_and_closed_form():
    for s in (1, 2, 3):
        assert sparse_eigenvalue(np.eye(3), s, "min") == pytest.approx(1.0)
        assert sparse_eigenvalue(np.eye(3), s, "max") == pytest.approx(1.0)
    K = np.array([[1.0, 0.5], [0.5, 1.0]])
    assert sparse_eigenvalue(K, 2, "min") == pytest.approx(0.5)
    assert sparse_eigenvalue(K, 2, "max") == pytest.approx(1.5)


def test_sparse_eigenvalue_matches_support_enumeration(rng):
    A = rng.standard_normal((8, 8))
    K = A @ A.T
    lo, hi = np.inf, -np.inf
    for S in itertools.combinations(range(8), 3):
        ev = np.linalg.eigh(K[np.ix_(S, S)])[0]
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
    assert sparse_eigenvalue(K, 3, "min") == pytest.approx(lo, rel=1e-10)
    assert sparse_eigenvalue(K, 3, "max") == pytest.approx(hi, rel=1e-10)
    ev = np.linalg.eigvalsh(K)
    assert abs(sparse_eigenvalue(K, 8, "min") - ev[0]) <= 1e-10 * ev[-1]
    assert abs(sparse_eigenvalue(K, 8, "max") - ev[-1]) <= 1e-10 * ev[-1]


def test_brute_force_identity():
    S, v = brute_force_optimum(np.eye(3), np.array([0.5, 0.2, 0.9]), 2, mu_pp=2.0)
    assert S == (0, 2)
    assert v == pytest.approx(2.0 - 1.06)


def test_brute_force_full_set_and_dominance(rng):
    K, z, mu, _, _ = random_instance(6, rng)
    _, v = brute_force_optimum(K, z, 6, mu)
    assert v == pytest.approx(mu - z @ np.linalg.solve(K, z), rel=1e-9)
    K, z, mu, _, _ = random_instance(10, rng)
    S, v = brute_force_optimum(K, z, 3, mu)
    for _ in range(50):
        R = rng.choice(10, size=int(rng.integers(1, 4)), replace=False)
        assert v <= mu - subset_value(K, z, R) + 1e-12


def test_brute_force_guard():
    with pytest.raises(GuardExceeded):
        brute_force_optimum(np.eye(40), np.ones(40), 20)


def test_bound_identity_is_exact():
    z = np.array([0.1, 0.7, 0.3, 0.5, 0.2])
    rep = verify_convergence_bound(np.eye(5), z, 2, 0.1)
    assert rep.m == rep.M == 1.0
    assert rep.optimum == (1, 3)
    # greedy at k = r already reaches the optimum; the bound's k is larger
    assert rep.greedy[:2] == (1, 3)
    assert rep.g_greedy >= rep.g_opt and rep.epsilon == 0.0
    assert rep.holds and rep.corollary_holds


def test_bound_random_instances(rng):
    for _ in range(30):
        K, z, _, _, _ = random_instance(int(rng.integers(3, 9)), rng)
        rep = verify_convergence_bound(K, z, int(rng.integers(1, 4)), 0.1)
        assert rep.holds and rep.corollary_holds and rep.corollary_holds_at_r


def test_bound_rejects_singular():
    K = np.ones((3, 3))
    with pytest.raises(PremiseError):
        verify_convergence_bound(K, np.ones(3), 2, 0.1)


def test_submodularity_identity_and_random(rng):
    rep = submodularity_ratio(np.eye(4), np.array([0.3, 0.2, 0.5, 0.1]))
    assert rep["min_ratio"] == pytest.approx(1.0)
    for _ in range(5):
        K, z, _, _, _ = random_instance(int(rng.integers(4, 9)), rng)
        assert submodularity_ratio(K, z)["holds"]


def test_projection_and_variance_lemmas(rng):
    _, _, _, oracle, aff = random_instance(8, rng)
    assert max(orthoproj_residuals(oracle, aff, 8)) <= 1e-8
    assert max(variance_mmd_gap(oracle, aff, 8)) <= 1e-8


def test_appendix_suite_rows():
    rows = appendix_suite(seed=1, n_instances=5)
    assert [r[0] for r in rows] == ["orthoproj", "mmd-equivalence", "theorem-bound", "submodularity-ratio"]
    assert all(ok for _, ok, _ in rows)


def test_hessian_gram_small_sample_reports(rng):
    data = logistic_data(rng, 50, 2)
    rep = hessian_gram_check(data, train_logistic(data, tol=1e-10))
    assert rep.n == 50 and np.isfinite(rep.rel_frobenius)


def test_hessian_gram_gate(rng):
    data = logistic_data(rng, 50, 2)
    with pytest.raises(PremiseError):
        hessian_gram_check(data, ParamVector(np.ones(3)))


def test_hessian_gram_saturated():
    X = np.array([[-30.0], [-20.0], [20.0], [30.0], [0.0], [0.0]])
    y = np.array([0, 0, 1, 1, 0, 1])
    params = ParamVector(np.array([5.0, 0.0]))
    rep = hessian_gram_check(Dataset(X[:4], y[:4]), params, gate=1.0)
    assert rep.hessian_norm < 1e-30 and rep.gram_norm < 1e-30
