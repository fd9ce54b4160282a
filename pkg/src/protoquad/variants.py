"""Scalable alternatives to full greedy selection.

All three return the same :class:`SelectionReport` as ``select_sbq``:

* matching pursuit: rank by normalized residual correlation, refit weights;
* delta-stochastic: score a random sample of the pool at every step;
* distributed: greedy per random shard, then greedy over the shortlists.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .errors import DegenerateCandidate
from .kernel import AffinityVector, KernelOracle
from .selection import (
    InverseState,
    _report,
    accept,
    quadrature_weights,
    run_greedy,
    score_candidates,
)

logger = logging.getLogger(__name__)

METHODS = ("sbq", "mp", "stochastic", "distributed")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("PROTOQUAD_THREADS", "1")))
    except ValueError:
        return 1


def _pool(oracle, candidates):
    if candidates is None:
        return np.arange(oracle.n_train)
    return np.unique(np.asarray(candidates, dtype=np.int64))


def select_mp(k: int, oracle: KernelOracle, affinity: AffinityVector,
              tol_d: float | None = None, candidates: Sequence[int] | None = None):
    """Orthogonal matching pursuit in the kernel's feature space.

    Each step picks the atom with the largest ``|z_j - k(j, S) w_S| / sqrt(k(j, j))``,
    i.e. the largest correlation with the current residual of the target mean
    embedding, then refits ``w`` by exact projection. The diagonal is read once
    and no tentative inverses are formed, so per step the cost is
    ``O(t |S|)`` kernel entries and arithmetic.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    start = oracle.eval_count
    z = affinity.z
    pool = _pool(oracle, candidates)
    diag = oracle.diag(pool)
    alive = diag > 0
    state = InverseState()
    w = np.zeros(0)
    trace = []
    truncated = False
    for _ in range(k):
        cand_pos = np.flatnonzero(alive)
        if cand_pos.size == 0:
            truncated = True
            break
        cands = pool[cand_pos]
        if state.size:
            B = oracle.block(state.indices, cands)
            resid = z[cands] - B.T @ w
        else:
            B = np.zeros((0, cands.size))
            resid = z[cands]
        score = np.abs(resid) / np.sqrt(diag[cand_pos])
        accepted = False
        for m in np.argsort(-score, kind="stable"):
            j = int(cands[m])
            try:
                state = accept(state, j, B[:, m], diag[cand_pos[m]], z, tol_d)
            except DegenerateCandidate:
                # an atom inside span(S) stays there as S grows
                alive[cand_pos[m]] = False
                continue
            alive[cand_pos[m]] = False
            accepted = True
            break
        if not accepted:
            truncated = True
            break
        w = quadrature_weights(state)
        trace.append(state.objective)
    config = {"method": "mp", "k": int(k), "tol_d": tol_d, "mode": oracle.mode,
              "nugget": oracle.nugget, "n_candidates": int(pool.size)}
    return _report(state, affinity, trace, truncated, oracle.eval_count - start, config, method="mp")


def stochastic_sample_size(t: int, k: int, delta: float) -> int:
    """``ceil((t / k) ln(1 / delta))`` clamped to ``[1, t]``."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    nominal = math.ceil((t / k) * math.log(1.0 / delta))
    return int(min(t, max(1, nominal)))


def select_stochastic(k: int, delta: float, seed: int, oracle: KernelOracle,
                      affinity: AffinityVector, tol_d: float | None = None,
                      candidates: Sequence[int] | None = None):
    """Greedy selection that scores only a uniform random sample per step.

    The sample is drawn without replacement from the unselected pool. When it
    would cover the whole remaining pool, the pool is used as is, which makes
    the run identical to full greedy. If every sampled candidate is degenerate,
    that step falls back to scanning the rest of the pool.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    start = oracle.eval_count
    z = affinity.z
    pool = _pool(oracle, candidates)
    size = stochastic_sample_size(pool.size, k, delta)
    rng = np.random.default_rng(seed)
    state = InverseState()
    trace = []
    step_evals = []
    truncated = False
    for _ in range(k):
        before = oracle.eval_count
        remaining = np.setdiff1d(pool, state.indices)
        if remaining.size == 0:
            truncated = True
            break
        if size >= remaining.size:
            sample = remaining
        else:
            sample = np.sort(rng.choice(remaining, size=size, replace=False))
        gain, B, c = score_candidates(state, oracle, z, sample, tol_d)
        if not np.any(np.isfinite(gain)) and sample.size < remaining.size:
            sample = np.setdiff1d(remaining, sample)
            gain, B, c = score_candidates(state, oracle, z, sample, tol_d)
        best = int(np.argmax(gain))
        if not np.isfinite(gain[best]):
            truncated = True
            break
        state = accept(state, int(sample[best]), B[:, best], c[best], z, tol_d)
        trace.append(state.objective)
        step_evals.append(oracle.eval_count - before)
    config = {"method": "stochastic", "k": int(k), "delta": float(delta), "sample_size": size,
              "tol_d": tol_d, "mode": oracle.mode, "nugget": oracle.nugget,
              "n_candidates": int(pool.size), "step_kernel_evals": step_evals}
    return _report(state, affinity, trace, truncated, oracle.eval_count - start, config,
                   method="stochastic", seed=seed)


def select_distributed(k: int, n_shards: int, seed: int, oracle: KernelOracle,
                       affinity: AffinityVector, tol_d: float | None = None,
                       candidates: Sequence[int] | None = None, threads: int | None = None):
    """Two-round partitioned greedy.

    Round one splits the pool uniformly at random into ``n_shards`` shards and
    runs greedy selection inside each, touching only same-shard kernel
    entries. Round two runs greedy over the union of the shortlists. The best
    of the merged solution and the individual shard solutions is returned, so
    the result never scores below any single shard.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if n_shards < 1:
        raise ValueError("number of shards must be at least 1")
    start = oracle.eval_count
    pool = _pool(oracle, candidates)
    rng = np.random.default_rng(seed)
    shards = [np.sort(s) for s in np.array_split(rng.permutation(pool), n_shards) if s.size]
    workers = threads or default_threads()

    def run_shard(idx):
        view = oracle.restrict(idx)
        state, trace, truncated = run_greedy(k, view, affinity, idx, tol_d)
        return view, state, trace, truncated

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_shard, shards))
    else:
        results = [run_shard(s) for s in shards]

    stats = []
    for i, (view, state, trace, _) in enumerate(results):
        stats.append({"shard": i, "size": int(view.indices.size), "kernel_evals": int(view.eval_count),
                      "footprint": view.footprint, "selections": [int(j) for j in state.indices],
                      "objective": float(state.objective)})

    if len(results) == 1:
        _, state, trace, truncated = results[0]
        best = (state, trace, truncated)
        source = "shard-0"
    else:
        shortlist = np.unique(np.concatenate([np.asarray(r[1].indices, dtype=np.int64) for r in results]))
        view = oracle.restrict(shortlist)
        m_state, m_trace, m_trunc = run_greedy(k, view, affinity, shortlist, tol_d)
        stats.append({"shard": "merge", "size": int(shortlist.size), "kernel_evals": int(view.eval_count),
                      "footprint": view.footprint, "selections": [int(j) for j in m_state.indices],
                      "objective": float(m_state.objective)})
        best = (m_state, m_trace, m_trunc)
        source = "merge"
        for i, (_, state, trace, truncated) in enumerate(results):
            if state.objective > best[0].objective:
                best = (state, trace, truncated)
                source = f"shard-{i}"
    state, trace, truncated = best
    config = {"method": "distributed", "k": int(k), "n_shards": int(n_shards), "tol_d": tol_d,
              "mode": oracle.mode, "nugget": oracle.nugget, "n_candidates": int(pool.size),
              "source": source}
    return _report(state, affinity, trace, truncated, oracle.eval_count - start, config,
                   method="distributed", seed=seed, shard_stats=stats)


def select(method: str, k: int, oracle: KernelOracle, affinity: AffinityVector, *,
           delta: float = 0.1, n_shards: int = 1, seed: int = 0, tol_d: float | None = None,
           candidates=None, threads: int | None = None):
    """Dispatch to a selection method by name."""
    from .selection import select_sbq

    if method == "sbq":
        return select_sbq(k, oracle, affinity, tol_d, candidates)
    if method == "mp":
        return select_mp(k, oracle, affinity, tol_d, candidates)
    if method == "stochastic":
        return select_stochastic(k, delta, seed, oracle, affinity, tol_d, candidates)
    if method == "distributed":
        return select_distributed(k, n_shards, seed, oracle, affinity, tol_d, candidates, threads)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
