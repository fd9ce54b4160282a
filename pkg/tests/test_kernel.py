import numpy as np
import pytest

from protoquad.embedding import FisherMetric
from protoquad.kernel import KernelOracle, affinity_vector, mmd_squared, rkhs_distance
from protoquad.selection import InverseState, greedy_step, posterior_variance, quadrature_weights

from conftest import random_spd


def test_practical_kernel_is_dot_product():
    o = KernelOracle(np.array([[1.0, 2.0], [3.0, -1.0]]))
    assert o.kernel_value(0, 1) == 1.0
    assert o.mode == "practical"


def test_scalar_metric_divides():
    F = np.array([[1.0, 2.0], [3.0, -1.0]])
    o = KernelOracle(F, metric=FisherMetric(4.0 * np.eye(2), ridge=0.0))
    assert o.kernel_value(0, 1) == pytest.approx(0.25)


def test_full_kernel_matches_dense_solve(rng):
    F = rng.standard_normal((6, 4))
    T = rng.standard_normal((3, 4))
    M = random_spd(rng, 4, cond=50)
    o = KernelOracle(F, T, FisherMetric(M, ridge=0.0))
    expected = F @ np.linalg.solve(M, F.T)
    K = o.gram()
    assert np.max(np.abs(K - expected)) <= 1e-10 * np.max(np.abs(expected))
    C = o.cross(range(6), range(3))
    np.testing.assert_allclose(C, F @ np.linalg.solve(M, T.T), rtol=1e-10)


def test_symmetry_psd_and_cache(rng):
    F = rng.standard_normal((40, 6))
    M = random_spd(rng, 6)
    lazy = KernelOracle(F, metric=FisherMetric(M, 0.0))
    cached = KernelOracle(F, metric=FisherMetric(M, 0.0), cache=True)
    K = lazy.gram()
    assert np.max(np.abs(K - K.T)) <= 1e-12
    np.testing.assert_allclose(cached.gram(), K, atol=1e-12)
    for _ in range(20):
        S = rng.choice(40, size=int(rng.integers(1, 21)), replace=False)
        assert np.linalg.eigvalsh(lazy.block(S, S))[0] >= -1e-8


def test_eval_count_exact(rng):
    o = KernelOracle(rng.standard_normal((5, 3)), rng.standard_normal((2, 3)))
    for i in range(5):
        o.kernel_value(i, 0)
        o.kernel_value(i, 1, test=True)
    assert o.eval_count == 10
    o.block([0, 1], [2, 3, 4])
    assert o.eval_count == 16


def test_out_of_range_index():
    o = KernelOracle(np.eye(2))
    with pytest.raises(IndexError):
        o.kernel_value(0, 2)


def test_affinity_single_test_point_equals_self_kernel(rng):
    F = rng.standard_normal((4, 3))
    aff = affinity_vector(KernelOracle(F, F[2:3]))
    assert aff.z[2] == pytest.approx(F[2] @ F[2])
    assert aff.test_self_term == pytest.approx(F[2] @ F[2])


def test_affinity_zero_targets():
    aff = affinity_vector(KernelOracle(np.ones((3, 2)), np.zeros((4, 2))))
    assert np.all(aff.z == 0) and aff.test_self_term == 0


def test_affinity_matches_double_loop(rng):
    F, T = rng.standard_normal((8, 4)), rng.standard_normal((5, 4))
    M = random_spd(rng, 4)
    o = KernelOracle(F, T, FisherMetric(M, 0.0))
    aff = affinity_vector(o)
    Minv = np.linalg.inv(M)
    z = [sum(F[i] @ Minv @ T[j] for j in range(5)) / 5 for i in range(8)]
    mu = sum(T[a] @ Minv @ T[b] for a in range(5) for b in range(5)) / 25
    np.testing.assert_allclose(aff.z, z, rtol=1e-12)
    assert aff.test_self_term == pytest.approx(mu, rel=1e-12)


def test_mmd_empty_and_exact_match(rng):
    T = rng.standard_normal((4, 3))
    F = np.vstack([T, rng.standard_normal((3, 3))])
    o = KernelOracle(F, T)
    aff = affinity_vector(o)
    assert mmd_squared(o, [], [], aff) == aff.test_self_term
    assert mmd_squared(o, [0, 1, 2, 3], np.full(4, 0.25), aff) == pytest.approx(0.0, abs=1e-12)


def test_mmd_equals_posterior_variance(rng):
    o = KernelOracle(rng.standard_normal((12, 6)), rng.standard_normal((4, 6)) + 1.0)
    aff = affinity_vector(o)
    state = InverseState()
    for _ in range(5):
        _, state = greedy_step(state, o, aff)
        w = quadrature_weights(state)
        mmd = mmd_squared(o, state.indices, w, aff)
        var = posterior_variance(state, aff)
        assert abs(mmd - var) <= 1e-8 * aff.test_self_term


def test_rkhs_distance_cases(rng):
    o = KernelOracle(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert rkhs_distance(o, 0, 0) == 0.0
    assert rkhs_distance(o, 0, 1) == pytest.approx(np.sqrt(2))


def test_rkhs_distance_matches_matrix_square_root(rng):
    F, T = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    M = random_spd(rng, 4)
    o = KernelOracle(F, T, FisherMetric(M, 0.0))
    ev, Q = np.linalg.eigh(M)
    inv_root = (Q / np.sqrt(ev)) @ Q.T
    expected = np.linalg.norm(inv_root @ (F[1] - T[0]))
    assert rkhs_distance(o, 1, 0) == pytest.approx(expected, rel=1e-8)


def test_nugget_only_on_train_diagonal(rng):
    F = rng.standard_normal((4, 2))
    o = KernelOracle(F, F[:1], nugget=0.5)
    K = o.gram()
    np.testing.assert_allclose(K, F @ F.T + 0.5 * np.eye(4))
    np.testing.assert_allclose(o.cross([0], [0]), F[:1] @ F[:1].T)


def test_shard_view_accounting(rng):
    o = KernelOracle(rng.standard_normal((10, 3)))
    view = o.restrict([1, 3, 5])
    view.block([1, 3], [5])
    view.diag([1])
    assert view.eval_count == 3
    assert view.footprint == 5
    with pytest.raises(IndexError):
        view.block([0], [1])


def test_singular_metric_rejected():
    from protoquad.errors import SingularMetricError

    with pytest.raises(SingularMetricError):
        KernelOracle(np.eye(2), metric=FisherMetric(np.zeros((2, 2)), 0.0))
