"""Randomized invariants checked with hypothesis."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from protoquad.embedding import estimate_fisher_info
from protoquad.kernel import KernelOracle, affinity_vector, mmd_squared
from protoquad.selection import InverseState, extend_inverse, select_sbq
from protoquad.variants import select_mp, select_stochastic

seeds = st.integers(0, 2**31 - 1)


def make(seed, t, p, n=4, full=False):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((t, p))
    T = rng.standard_normal((n, p)) + rng.standard_normal(p)
    metric = estimate_fisher_info(F, 1e-3) if full else None
    o = KernelOracle(F, T, metric)
    return o, affinity_vector(o)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(2, 25), st.integers(1, 12), st.booleans())
def test_sbq_report_invariants(seed, t, p, full):
    o, aff = make(seed, t, p, full=full)
    rep = select_sbq(min(t, 8), o, aff)
    v = np.array(rep.variance_trace)
    assert np.all(np.diff(v) <= 1e-9 * max(1.0, aff.test_self_term))
    S = rep.selections
    assert len(set(S)) == len(S)
    if S:
        K = o.block(S, S)
        w = np.array(rep.weights)
        scale = max(1.0, np.max(np.abs(aff.z)))
        assert np.max(np.abs(K @ w - aff.z[S])) <= 1e-6 * scale * np.linalg.cond(K) ** 0.5
        mmd = mmd_squared(o, S, w, aff)
        assert abs(mmd - v[-1]) <= 1e-7 * max(1.0, aff.test_self_term)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 30))
def test_bordered_inverse_fidelity(seed, size):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((size, size + 5))
    K = A @ A.T + 0.05 * np.eye(size)
    state = InverseState()
    for s in range(size):
        state = extend_inverse(state, K[s, :s], K[s, s], index=s)
    assert state.fidelity() <= 1e-8 * max(1.0, np.linalg.cond(K) / 1e6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(3, 30), st.integers(1, 6))
def test_variants_valid(seed, t, k):
    o, aff = make(seed, t, 6)
    for rep in (select_mp(k, o, aff), select_stochastic(k, 0.2, seed, o, aff)):
        assert len(rep.selections) <= k
        assert np.all(np.diff(rep.variance_trace) <= 1e-9 * max(1.0, aff.test_self_term))
        assert rep.variance_trace == [aff.test_self_term - g for g in rep.objective_trace]


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_kernel_symmetric(seed):
    o, _ = make(seed, 12, 5, full=True)
    K = o.gram()
    assert np.max(np.abs(K - K.T)) <= 1e-12 * max(1.0, np.max(np.abs(K)))
