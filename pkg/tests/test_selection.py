import json

import numpy as np
import pytest

from protoquad.errors import DegenerateCandidate, PoolExhausted
from protoquad.kernel import AffinityVector, KernelOracle, affinity_vector
from protoquad.selection import (
    InverseState,
    SelectionReport,
    extend_inverse,
    greedy_step,
    influence_scores,
    posterior_variance,
    quadrature_weights,
    rank_descending,
    select_sbq,
)



def gram_instance(K, z, mu=0.0):
    return KernelOracle.from_gram(np.asarray(K, float)), AffinityVector(np.asarray(z, float), mu)


def dense_greedy(K, z, k):
    """Reference greedy: evaluate g(S + j) by a fresh dense solve for every candidate."""
    S = []
    for _ in range(k):
        best, best_g = None, -np.inf
        for j in range(len(z)):
            if j in S:
                continue
            T = S + [j]
            g = z[T] @ np.linalg.solve(K[np.ix_(T, T)], z[T])
            if g > best_g + 1e-12:
                best, best_g = j, g
        S.append(best)
    return S


def test_extend_from_empty():
    st = extend_inverse(InverseState(), [], 2.0)
    np.testing.assert_allclose(st.inv, [[0.5]])


def test_extend_two_by_two():
    st = extend_inverse(InverseState(), [], 2.0, index=0)
    st = extend_inverse(st, [1.0], 2.0, index=1)
    np.testing.assert_allclose(st.inv, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]], atol=1e-15)


def test_random_growth_keeps_inverse(rng):
    A = rng.standard_normal((50, 80))
    K = A @ A.T / 80 + 0.1 * np.eye(50)
    st = InverseState()
    for s in range(50):
        st = extend_inverse(st, K[s, :s], K[s, s], index=s)
        assert st.fidelity() <= 1e-8
        np.testing.assert_allclose(st.inv, np.linalg.inv(K[: s + 1, : s + 1]), rtol=1e-6, atol=1e-8)


def test_extend_rejects_duplicate():
    st = extend_inverse(InverseState(), [], 1.0, index=0)
    with pytest.raises(DegenerateCandidate):
        extend_inverse(st, [1.0], 1.0)


def test_identity_kernel_first_pick():
    o, aff = gram_instance(np.eye(3), [0.5, 0.2, 0.9])
    chosen, st = greedy_step(InverseState(), o, aff)
    assert chosen == 2
    assert st.objective == pytest.approx(0.81)


def test_near_duplicates_small_second_gain():
    K = np.array([[1.0, 0.9], [0.9, 1.0]])
    z = np.array([0.8, 0.8])
    expected = z @ np.linalg.solve(K, z)
    assert expected == pytest.approx(0.6737, abs=5e-5)
    o, aff = gram_instance(K, z)
    c1, st = greedy_step(InverseState(), o, aff)
    c2, st = greedy_step(st, o, aff)
    assert (c1, c2) == (0, 1)
    assert st.objective == pytest.approx(expected, rel=1e-12)
    assert st.objective - 0.64 < 0.04


def test_exact_duplicate_skipped():
    F = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    o = KernelOracle(F, np.array([[1.0, 0.3]]))
    rep = select_sbq(3, o, affinity_vector(o))
    assert rep.selections == [0, 2]
    assert rep.truncated


def test_ties_break_to_lowest_index():
    o, aff = gram_instance(np.eye(4), [0.5, 0.9, 0.9, 0.1])
    assert greedy_step(InverseState(), o, aff)[0] == 1


def test_matches_dense_greedy_oracle(rng):
    for _ in range(10):
        F = rng.standard_normal((10, 12))
        o = KernelOracle(F, rng.standard_normal((3, 12)) + 0.5)
        aff = affinity_vector(o)
        K = F @ F.T
        rep = select_sbq(4, o, aff)
        assert rep.selections == dense_greedy(K, aff.z, 4)


def test_train_equals_test_full_selection():
    F = np.eye(5) + 0.1
    o = KernelOracle(F, F)
    aff = affinity_vector(o)
    rep = select_sbq(5, o, aff)
    assert rep.variance_trace[-1] == pytest.approx(0.0, abs=1e-12)


def test_exhaustion_truncates():
    o, aff = gram_instance(np.eye(3), [1.0, 0.5, 0.2], 2.0)
    rep = select_sbq(10, o, aff)
    assert rep.truncated and len(rep.selections) == 3


def test_report_invariants(rng):
    F = rng.standard_normal((30, 8))
    o = KernelOracle(F, rng.standard_normal((6, 8)) + 0.3)
    aff = affinity_vector(o)
    rep = select_sbq(8, o, aff)
    assert np.all(np.diff(rep.variance_trace) <= 1e-12)
    S = rep.selections
    K = F[S] @ F[S].T
    w = np.array(rep.weights)
    assert np.max(np.abs(K @ w - aff.z[S])) <= 1e-8
    assert aff.test_self_term - w @ aff.z[S] == pytest.approx(rep.variance_trace[-1], rel=1e-8)
    again = select_sbq(8, o, aff)
    assert again.to_json() == rep.to_json()
    d = json.loads(rep.to_json())
    assert set(SelectionReport.CORE_KEYS) <= set(d) and "kernel_evals" in d and "config" in d
    assert SelectionReport.from_dict(d).to_json() == rep.to_json()


def test_weights_simple_cases():
    o, aff = gram_instance(np.diag([2.0, 1.0, 1.0]), [0.6, 0.3, 0.1], 1.0)
    _, st = greedy_step(InverseState(), o, aff)
    np.testing.assert_allclose(quadrature_weights(st), [0.3])
    o, aff = gram_instance(np.eye(3), [0.5, 0.2, 0.9])
    st = InverseState()
    for _ in range(2):
        _, st = greedy_step(st, o, aff)
    np.testing.assert_allclose(quadrature_weights(st), aff.z[st.indices])


def test_posterior_variance_empty():
    _, aff = gram_instance(np.eye(2), [0.1, 0.2], 0.7)
    assert posterior_variance(InverseState(), aff) == 0.7


def test_influence_scores_dot_products(rng):
    F, T = rng.standard_normal((7, 3)), rng.standard_normal((2, 3))
    o = KernelOracle(F, T)
    s = influence_scores(o, 1)
    np.testing.assert_allclose(s, F @ T[1])
    assert list(rank_descending(s)) == list(np.argsort(-(F @ T[1]), kind="stable"))
    zero = KernelOracle(F, np.zeros((1, 3)))
    assert np.all(influence_scores(zero, 0) == 0)


def test_influence_scores_match_dense_solve(rng):
    from protoquad.embedding import estimate_fisher_info

    G, T = rng.standard_normal((40, 5)), rng.standard_normal((3, 5))
    metric = estimate_fisher_info(G, 1e-3)
    o = KernelOracle(G, T, metric)
    expected = G @ np.linalg.solve(metric.info, T[2])
    np.testing.assert_allclose(influence_scores(o, 2), expected, rtol=1e-10)
    # H -> cH rescales every score by 1/c, leaving the ranking unchanged
    scaled = KernelOracle(G, T, type(metric)(3.0 * metric.info, metric.ridge))
    assert list(rank_descending(influence_scores(scaled, 2))) == list(rank_descending(expected))


def test_pool_exhausted_when_all_degenerate():
    o, aff = gram_instance(np.zeros((2, 2)), [0.0, 0.0])
    with pytest.raises(PoolExhausted):
        greedy_step(InverseState(), o, aff)
