"""Brute-force instruments for checking the greedy guarantees on small instances."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .embedding import Dataset, ParamVector, design_matrix
from .errors import GuardExceeded, PoolExhausted, PremiseError
from .kernel import AffinityVector, KernelOracle, affinity_vector, mmd_squared
from .selection import InverseState, greedy_step, posterior_variance, quadrature_weights, run_greedy

MAX_SUBSETS = 10**6


def _guard(count, what):
    if count > MAX_SUBSETS:
        raise GuardExceeded(
            f"{what} needs {count} subsets (> {MAX_SUBSETS}); shrink the instance or the sparsity level"
        )


def sparse_eigenvalue(K: np.ndarray, s: int, which: str = "min") -> float:
    """Extreme ``s``-sparse eigenvalue of a symmetric matrix by support enumeration.

    By eigenvalue interlacing it suffices to scan supports of size exactly ``s``.
    """
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if not 1 <= s <= n:
        raise ValueError(f"sparsity {s} outside [1, {n}]")
    if which not in ("min", "max"):
        raise ValueError("which must be 'min' or 'max'")
    _guard(math.comb(n, s), "sparse eigenvalue")
    best = np.inf if which == "min" else -np.inf
    combos = itertools.combinations(range(n), s)
    while True:
        batch = np.array(list(itertools.islice(combos, 4096)), dtype=np.int64)
        if batch.size == 0:
            break
        subs = K[batch[:, :, None], batch[:, None, :]]
        ev = np.linalg.eigvalsh(subs)
        if which == "min":
            best = min(best, float(ev[:, 0].min()))
        else:
            best = max(best, float(ev[:, -1].max()))
    return best


def subset_value(K: np.ndarray, z: np.ndarray, S) -> float:
    """``g(S) = z_S^T K_SS^+ z_S`` by a dense solve (pseudo-inverse if singular)."""
    S = list(S)
    if not S:
        return 0.0
    KS = K[np.ix_(S, S)]
    zS = z[S]
    try:
        sol = np.linalg.solve(KS, zS)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KS, zS, rcond=None)[0]
    return float(zS @ sol)


def brute_force_optimum(K: np.ndarray, z: np.ndarray, r: int, mu_pp: float = 0.0):
    """Best subset of size at most ``r`` for ``v(S) = mu_pp - g(S)``.

    Subsets are scanned by size, then lexicographically; the first strict
    improvement wins, so ties resolve to the earliest subset. Returns
    ``(subset, v)``.
    """
    K = np.asarray(K, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = K.shape[0]
    r = min(r, t)
    _guard(sum(math.comb(t, s) for s in range(r + 1)), "brute-force optimum")
    best_S, best_g = (), 0.0
    for s in range(1, r + 1):
        for S in itertools.combinations(range(t), s):
            g = subset_value(K, z, S)
            if g > best_g:
                best_S, best_g = S, g
    return best_S, mu_pp - best_g


@dataclass
class BoundReport:
    m: float
    M: float
    r: int
    k: int
    epsilon: float
    target_epsilon: float
    holds: bool
    g_greedy: float
    g_opt: float
    corollary_factor: float
    corollary_holds: bool
    corollary_holds_at_r: bool
    optimum: tuple
    greedy: tuple

    def to_dict(self):
        return asdict(self)


def _bound_tol(scale):
    return 1e-9 * max(1.0, abs(scale))


def verify_convergence_bound(K: np.ndarray, z: np.ndarray, r: int, epsilon: float) -> BoundReport:
    """Run greedy long enough for the linear-rate bound and check it against brute force.

    ``m`` is the smallest ``2r``-sparse and ``M`` the largest ``(r+1)``-sparse
    eigenvalue of ``K`` (sparsities are capped at the matrix size). Greedy runs
    for ``k = ceil((M/m) r ln(1/epsilon))`` steps and the report checks
    ``g(S*) - g(S_G) <= epsilon g(S*)`` together with the multiplicative form
    ``g(S_G) >= (1 - exp(-m k / (M r))) g(S*)``, the latter also at ``k = r``.
    """
    K = np.asarray(K, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = K.shape[0]
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    m = sparse_eigenvalue(K, min(2 * r, t), "min")
    M = sparse_eigenvalue(K, min(r + 1, t), "max")
    if m <= 1e-12:
        raise PremiseError(f"smallest {2 * r}-sparse eigenvalue is {m:.3e}; the bound is vacuous")
    k = math.ceil((M / m) * r * math.log(1.0 / epsilon))
    optimum, _ = brute_force_optimum(K, z, r)
    g_opt = subset_value(K, z, optimum)

    oracle = KernelOracle.from_gram(K)
    affinity = AffinityVector(z=z, test_self_term=0.0)
    state, _, _ = run_greedy(min(k, t), oracle, affinity)
    g_greedy = state.objective
    state_r, _, _ = run_greedy(r, oracle, affinity)

    tol = _bound_tol(g_opt)
    achieved = max(0.0, (g_opt - g_greedy) / g_opt) if g_opt > 0 else 0.0
    holds = g_opt - g_greedy <= epsilon * g_opt + tol
    factor = 1.0 - math.exp(-m * k / (M * r))
    factor_r = 1.0 - math.exp(-m / M)
    return BoundReport(
        m=m, M=M, r=r, k=k, epsilon=achieved, target_epsilon=epsilon, holds=bool(holds),
        g_greedy=g_greedy, g_opt=g_opt, corollary_factor=factor,
        corollary_holds=bool(g_greedy >= factor * g_opt - tol),
        corollary_holds_at_r=bool(state_r.objective >= factor_r * g_opt - tol),
        optimum=tuple(int(i) for i in optimum), greedy=tuple(state.indices),
    )


def submodularity_ratio(K: np.ndarray, z: np.ndarray, trials: int | None = None, seed: int = 0) -> dict:
    """Empirical weak-submodularity ratios of ``g`` over disjoint pairs ``(L, S)``.

    For each pair the ratio ``sum_j [g(L+j) - g(L)] / [g(L+S) - g(L)]`` is
    compared with ``m_{|L|+|S|} / M_{|L|+1}`` (smallest and largest sparse
    eigenvalues at those sizes). With ``trials=None`` every disjoint pair is
    enumerated (``3^t`` of them); otherwise ``trials`` random pairs are drawn.
    """
    K = np.asarray(K, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = K.shape[0]
    g_cache: dict = {}

    def g(mask):
        if mask not in g_cache:
            g_cache[mask] = subset_value(K, z, [i for i in range(t) if mask >> i & 1])
        return g_cache[mask]

    eig_cache: dict = {}

    def eig(s, which):
        key = (s, which)
        if key not in eig_cache:
            eig_cache[key] = sparse_eigenvalue(K, s, which)
        return eig_cache[key]

    if trials is None:
        _guard(3**t, "pair enumeration")
        pairs = []
        for labels in itertools.product(range(3), repeat=t):
            L = sum(1 << i for i, c in enumerate(labels) if c == 1)
            S = sum(1 << i for i, c in enumerate(labels) if c == 2)
            if S:
                pairs.append((L, S))
    else:
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(trials):
            labels = rng.integers(0, 3, size=t)
            S = sum(1 << i for i, c in enumerate(labels) if c == 2)
            if not S:
                continue
            L = sum(1 << i for i, c in enumerate(labels) if c == 1)
            pairs.append((L, S))

    scale = max(g((1 << t) - 1), 1e-300)
    min_ratio, min_margin = np.inf, np.inf
    used = skipped = violations = 0
    worst = None
    for L, S in pairs:
        base = g(L)
        joint = g(L | S) - base
        if joint <= 1e-12 * scale:
            skipped += 1
            continue
        singles = sum(g(L | (1 << j)) - base for j in range(t) if S >> j & 1)
        ratio = singles / joint
        nL, nS = bin(L).count("1"), bin(S).count("1")
        bound = eig(nL + nS, "min") / eig(nL + 1, "max")
        used += 1
        if ratio < bound - 1e-8:
            violations += 1
        if ratio < min_ratio:
            min_ratio = ratio
            worst = {"L": [i for i in range(t) if L >> i & 1], "S": [i for i in range(t) if S >> i & 1],
                     "bound": bound}
        min_margin = min(min_margin, ratio - bound)
    if used == 0:
        raise PremiseError("every sampled pair had zero joint gain")
    return {"pairs": used, "skipped": skipped, "min_ratio": float(min_ratio),
            "min_margin": float(min_margin), "violations": violations, "holds": violations == 0,
            "worst": worst}


@dataclass
class HessianGramReport:
    n: int
    grad_norm: float
    rel_frobenius: float
    top_alignment: float
    hessian_norm: float
    gram_norm: float

    def to_dict(self):
        return asdict(self)


def hessian_gram_check(data: Dataset, params: ParamVector, gate: float = 1e-6) -> HessianGramReport:
    """Compare the logistic NLL Hessian with the per-example gradient Gram matrix.

    Both are averaged over ``data``. They agree in expectation when the model
    is well specified; on a finite sample the gap shrinks like ``n^{-1/2}``.
    """
    X = design_matrix(data.features, params.intercept)
    if X.shape[1] != params.p:
        raise ValueError("parameter dimension does not match features")
    n = X.shape[0]
    y = data.labels.astype(np.float64)
    sig = expit(X @ params.values)
    grad = X.T @ (sig - y) / n
    grad_norm = float(np.max(np.abs(grad)))
    if grad_norm > gate:
        raise PremiseError(f"mean gradient norm {grad_norm:.3e} exceeds gate {gate:.1e}; "
                           "parameters are not at the unregularized optimum")
    H = (X * (sig * (1 - sig))[:, None]).T @ X / n
    G = (X * ((y - sig) ** 2)[:, None]).T @ X / n
    hn = float(np.linalg.norm(H))
    gn = float(np.linalg.norm(G))
    diff = float(np.linalg.norm(H - G))
    rel = diff / hn if hn > 0 else (0.0 if diff == 0 else np.inf)
    if hn > 0 and gn > 0:
        vh = np.linalg.eigh(H)[1][:, -1]
        vg = np.linalg.eigh(G)[1][:, -1]
        align = float(abs(vh @ vg))
    else:
        align = float("nan")
    return HessianGramReport(n=n, grad_norm=grad_norm, rel_frobenius=rel, top_alignment=align,
                             hessian_norm=hn, gram_norm=gn)


def random_instance(t: int, rng: np.random.Generator, p: int | None = None, n_test: int = 5):
    """Random linear-kernel instance ``(K, z, mu_pp, oracle, affinity)`` built from embeddings."""
    p = t if p is None else p
    F = rng.standard_normal((t, p))
    T = rng.standard_normal((n_test, p)) + rng.standard_normal(p)
    oracle = KernelOracle(F, T)
    aff = affinity_vector(oracle)
    K = F @ F.T
    return K, aff.z.copy(), aff.test_self_term, oracle, aff


def orthoproj_residuals(oracle: KernelOracle, affinity: AffinityVector, k: int) -> list:
    """Max projection residual ``|z_i - sum_j w_j k(j, i)|`` over the selection, after every step."""
    state = InverseState()
    out = []
    for _ in range(k):
        try:
            _, state = greedy_step(state, oracle, affinity)
        except PoolExhausted:
            break
        w = quadrature_weights(state)
        K = oracle.block(state.indices, state.indices)
        out.append(float(np.max(np.abs(affinity.z[state.indices] - K @ w))))
    return out


def variance_mmd_gap(oracle: KernelOracle, affinity: AffinityVector, k: int) -> list:
    """Relative gap between ``mu_pp - g(S)`` and the MMD^2 expansion at every greedy step."""
    state = InverseState()
    out = []
    for _ in range(k):
        try:
            _, state = greedy_step(state, oracle, affinity)
        except PoolExhausted:
            break
        var = posterior_variance(state, affinity)
        mmd = mmd_squared(oracle, state.indices, quadrature_weights(state), affinity)
        scale = max(abs(affinity.test_self_term), 1e-300)
        out.append(abs(var - mmd) / scale)
    return out


def appendix_suite(seed: int = 0, n_instances: int = 20) -> list:
    """Seeded run of the appendix checks; returns ``(name, passed, detail)`` rows."""
    rng = np.random.default_rng(seed)
    worst_proj, worst_gap = 0.0, 0.0
    bound_ok = corollary_ok = ratio_ok = 0
    worst_eps = 0.0
    min_margin = np.inf
    for _ in range(n_instances):
        t = int(rng.integers(4, 9))
        r = int(rng.integers(1, 4))
        K, z, mu, oracle, aff = random_instance(t, rng)
        worst_proj = max(worst_proj, max(orthoproj_residuals(oracle, aff, t), default=0.0))
        worst_gap = max(worst_gap, max(variance_mmd_gap(oracle, aff, t), default=0.0))
        rep = verify_convergence_bound(K, z, r, 0.1)
        bound_ok += rep.holds
        corollary_ok += rep.corollary_holds and rep.corollary_holds_at_r
        worst_eps = max(worst_eps, rep.epsilon)
        sr = submodularity_ratio(K, z)
        ratio_ok += sr["holds"]
        min_margin = min(min_margin, sr["min_margin"])
    return [
        ("orthoproj", worst_proj <= 1e-8, f"max residual {worst_proj:.2e} (tol 1e-8)"),
        ("mmd-equivalence", worst_gap <= 1e-8, f"max rel gap {worst_gap:.2e} (tol 1e-8)"),
        ("theorem-bound", bound_ok == n_instances and corollary_ok == n_instances,
         f"{bound_ok}/{n_instances} bound, {corollary_ok}/{n_instances} corollary, worst eps {worst_eps:.3g}"),
        ("submodularity-ratio", ratio_ok == n_instances,
         f"{ratio_ok}/{n_instances} instances, min margin over m/M {min_margin:.3g}"),
    ]
