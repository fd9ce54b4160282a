"""Sequential Bayesian quadrature over a discrete pool of training points.

The greedy loop grows a selection ``S`` one atom at a time, maximizing
``g(S) = z_S^T K_SS^{-1} z_S``; equivalently it minimizes the posterior
variance ``mu_pp - g(S)`` of the quadrature estimate. ``K_SS^{-1}`` is kept
up to date with bordered (Schur complement) updates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from .errors import DegenerateCandidate, PoolExhausted
from .kernel import AffinityVector, KernelOracle

logger = logging.getLogger(__name__)

FIDELITY_TOL = 1e-8


def default_tol_d(c):
    return 1e-10 * np.maximum(c, 1.0)


@dataclass
class InverseState:
    """Selected atoms and the matrices maintained alongside them.

    ``inv == K_SS^{-1}`` (bordered updates), ``gram == K_SS``, ``chol`` is the
    lower Cholesky factor of ``K_SS`` and ``alpha == chol^{-1} z_S``. Candidate
    scoring goes through ``chol``: Schur complements computed as
    ``c - ||chol^{-1} b||^2`` stay accurate when ``K_SS`` is ill-conditioned,
    whereas ``c - b^T inv b`` loses every digit once ``inv`` is large.
    """

    indices: list = field(default_factory=list)
    inv: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    gram: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    chol: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = 0.0

    @property
    def size(self) -> int:
        return len(self.indices)

    def fidelity(self) -> float:
        """Infinity-norm of ``K_SS inv - I``."""
        if not self.indices:
            return 0.0
        R = self.gram @ self.inv - np.eye(self.size)
        return float(np.linalg.norm(R, np.inf))

    def rebuild(self) -> None:
        """Recompute ``inv`` by dense factorization of ``gram``."""
        try:
            factor = linalg.cho_factor(self.gram, lower=True)
        except linalg.LinAlgError:
            factor = (self.chol, True)
        self.inv = linalg.cho_solve(factor, np.eye(self.size))
        self.inv = 0.5 * (self.inv + self.inv.T)

    def project(self, B: np.ndarray) -> np.ndarray:
        """``chol^{-1} B`` for a block of border columns."""
        if self.size == 0:
            return np.zeros((0,) + B.shape[1:])
        return linalg.solve_triangular(self.chol, B, lower=True, check_finite=False)


def extend_inverse(state: InverseState, b, c: float, index: int = -1, z: float = 0.0,
                   tol_d: float | None = None) -> InverseState:
    """Inverse of the bordered matrix ``[[K_SS, b], [b^T, c]]`` in O(|S|^2).

    With ``u = inv b`` and Schur complement ``d = c - b^T K_SS^{-1} b``::

        [[inv + u u^T / d, -u / d],
         [-u^T / d,         1 / d]]

    ``z`` is the affinity of the new atom; the objective grows by
    ``(z - b^T K_SS^{-1} z_S)^2 / d``. Raises :class:`DegenerateCandidate`
    when ``d <= tol_d``. The input state is not modified.
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    c = float(c)
    if b.size != state.size:
        raise ValueError(f"border has length {b.size}, state has {state.size} atoms")
    if tol_d is None:
        tol_d = float(default_tol_d(c))
    v = state.project(b)
    d = c - float(v @ v)
    if not d > tol_d:
        raise DegenerateCandidate(d, tol_d)
    s = state.size
    u = state.inv @ b
    inv = np.empty((s + 1, s + 1))
    inv[:s, :s] = state.inv + np.outer(u, u) / d
    inv[:s, s] = -u / d
    inv[s, :s] = -u / d
    inv[s, s] = 1.0 / d
    gram = np.empty((s + 1, s + 1))
    gram[:s, :s] = state.gram
    gram[:s, s] = b
    gram[s, :s] = b
    gram[s, s] = c
    root = np.sqrt(d)
    chol = np.zeros((s + 1, s + 1))
    chol[:s, :s] = state.chol
    chol[s, :s] = v
    chol[s, s] = root
    a_new = (float(z) - float(v @ state.alpha)) / root
    return InverseState(
        indices=state.indices + [int(index)],
        inv=inv,
        gram=gram,
        chol=chol,
        targets=np.append(state.targets, float(z)),
        alpha=np.append(state.alpha, a_new),
        objective=state.objective + a_new * a_new,
    )


def score_candidates(state: InverseState, oracle, z: np.ndarray, candidates: np.ndarray,
                     tol_d: float | None = None):
    """Marginal gains ``g(S + j) - g(S)`` for every candidate ``j``.

    Returns ``(gain, B, c)`` where ``B[:, m] = k(S, candidates[m])`` and
    ``c[m] = k(j, j)``. Degenerate candidates get ``gain = -inf``.
    """
    S = np.asarray(state.indices, dtype=np.int64)
    c = oracle.diag(candidates)
    if S.size:
        B = oracle.block(S, candidates)
        V = state.project(B)
        d = c - np.einsum("ij,ij->j", V, V)
        r = z[candidates] - V.T @ state.alpha
    else:
        B = np.zeros((0, candidates.size))
        d = c.copy()
        r = z[candidates].copy()
    tol = default_tol_d(c) if tol_d is None else tol_d
    ok = d > tol
    gain = np.full(candidates.size, -np.inf)
    gain[ok] = r[ok] ** 2 / d[ok]
    return gain, B, c


def accept(state: InverseState, index: int, b, c: float, z: np.ndarray,
           tol_d: float | None = None) -> InverseState:
    """Extend ``state`` with ``index`` and check inverse fidelity."""
    new = extend_inverse(state, b, c, index=index, z=z[index], tol_d=tol_d)
    err = new.fidelity()
    if not err <= FIDELITY_TOL:
        logger.debug("inverse drift %.3e after %d atoms; rebuilding by factorization", err, new.size)
        try:
            new.rebuild()
        except linalg.LinAlgError:
            logger.warning("dense refactorization failed; keeping bordered inverse")
    return new


def greedy_step(state: InverseState, oracle, affinity: AffinityVector,
                candidates: Sequence[int] | None = None, tol_d: float | None = None):
    """One greedy step: add the candidate maximizing ``z_S^T K_SS^{-1} z_S``.

    ``candidates`` defaults to every unselected training point. Ties go to
    the lowest index. Returns ``(chosen, new_state)``.
    """
    z = affinity.z
    if candidates is None:
        pool = np.setdiff1d(np.arange(oracle.n_train), state.indices)
    else:
        pool = np.setdiff1d(np.asarray(candidates, dtype=np.int64), state.indices)
    if pool.size == 0:
        raise PoolExhausted("no unselected candidates left")
    gain, B, c = score_candidates(state, oracle, z, pool, tol_d)
    best = int(np.argmax(gain))
    if not np.isfinite(gain[best]):
        raise PoolExhausted(f"all {pool.size} remaining candidates are degenerate")
    chosen = int(pool[best])
    return chosen, accept(state, chosen, B[:, best], c[best], z, tol_d)


@dataclass
class SelectionReport:
    selections: list
    weights: list
    objective_trace: list
    variance_trace: list
    kernel_evals: int
    config: dict
    truncated: bool = False
    method: str = "sbq"
    seed: Any = None
    shard_stats: list | None = None

    CORE_KEYS = ("selections", "weights", "objective_trace", "variance_trace", "truncated")

    def to_dict(self) -> dict:
        out = {
            "selections": [int(i) for i in self.selections],
            "weights": [float(w) for w in self.weights],
            "objective_trace": [float(v) for v in self.objective_trace],
            "variance_trace": [float(v) for v in self.variance_trace],
            "kernel_evals": int(self.kernel_evals),
            "config": self.config,
            "truncated": bool(self.truncated),
            "method": self.method,
            "seed": self.seed,
        }
        if self.shard_stats is not None:
            out["shard_stats"] = self.shard_stats
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def core_json(self) -> str:
        """Serialized selection outcome, excluding method-specific bookkeeping."""
        d = self.to_dict()
        return json.dumps({k: d[k] for k in self.CORE_KEYS}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionReport":
        return cls(
            selections=list(d["selections"]),
            weights=list(d["weights"]),
            objective_trace=list(d["objective_trace"]),
            variance_trace=list(d["variance_trace"]),
            kernel_evals=int(d["kernel_evals"]),
            config=dict(d.get("config", {})),
            truncated=bool(d.get("truncated", False)),
            method=d.get("method", "sbq"),
            seed=d.get("seed"),
            shard_stats=d.get("shard_stats"),
        )


def quadrature_weights(state: InverseState, affinity: AffinityVector | None = None) -> np.ndarray:
    """Weights ``w = K_SS^{-1} z_S``; they project the target mean embedding onto span(S)."""
    if state.size == 0:
        return np.zeros(0)
    zS = state.targets if affinity is None else affinity.z[state.indices]
    return state.inv @ zS


def posterior_variance(state: InverseState, affinity: AffinityVector) -> float:
    return affinity.test_self_term - state.objective


def _report(state, affinity, obj_trace, truncated, evals, config, method="sbq", seed=None,
            shard_stats=None) -> SelectionReport:
    mu = affinity.test_self_term
    return SelectionReport(
        selections=list(state.indices),
        weights=quadrature_weights(state).tolist(),
        objective_trace=list(obj_trace),
        variance_trace=[mu - g for g in obj_trace],
        kernel_evals=evals,
        config=config,
        truncated=truncated,
        method=method,
        seed=seed,
        shard_stats=shard_stats,
    )


def run_greedy(k: int, oracle, affinity: AffinityVector, candidates=None,
               tol_d: float | None = None):
    """Greedy loop shared by the SBQ front-ends. Returns ``(state, trace, truncated)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    state = InverseState()
    trace = []
    truncated = False
    for _ in range(k):
        try:
            _, state = greedy_step(state, oracle, affinity, candidates, tol_d)
        except PoolExhausted as exc:
            logger.info("selection stopped after %d atoms: %s", state.size, exc)
            truncated = True
            break
        trace.append(state.objective)
    return state, trace, truncated


def select_sbq(k: int, oracle: KernelOracle, affinity: AffinityVector,
               tol_d: float | None = None, candidates: Sequence[int] | None = None) -> SelectionReport:
    """Greedy prototype selection with incremental inverse maintenance.

    Stops early (``truncated=True``) if every remaining candidate is
    degenerate or the pool runs out.
    """
    start = oracle.eval_count
    state, trace, truncated = run_greedy(k, oracle, affinity, candidates, tol_d)
    config = {"method": "sbq", "k": int(k), "tol_d": tol_d, "mode": oracle.mode,
              "nugget": oracle.nugget,
              "n_candidates": oracle.n_train if candidates is None else len(candidates)}
    return _report(state, affinity, trace, truncated, oracle.eval_count - start, config)


def influence_scores(oracle: KernelOracle, test_index: int) -> np.ndarray:
    """``k(i, test_j)`` for every training point ``i``.

    With the oracle's metric built from the training-gradient Gram matrix
    this is the influence score ``grad_i^T H^{-1} grad_test``.
    """
    if not 0 <= test_index < oracle.n_test:
        raise IndexError(f"test index {test_index} out of range")
    return oracle.cross(np.arange(oracle.n_train), [test_index]).ravel()


def rank_descending(scores) -> np.ndarray:
    """Indices by descending score, lowest index first among ties."""
    return np.argsort(-np.asarray(scores), kind="stable")
