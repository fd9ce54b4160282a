"""Desk-scale end-to-end experiments: data cleaning, label fixing, summarization.

Each runner takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentReport` whose curves are lists of
``{"method", "budget", "metric", "value", "seed"}`` rows. Every method in one
run sees the same splits and the same noise realization.

Fisher kernels built from logistic-regression gradients have rank at most
``d + 1``, so without help the greedy loop stops after about ``d + 1`` atoms.
The workflows therefore add a small nugget (``nugget`` times the mean kernel
diagonal) to the training kernel, the usual Bayesian-quadrature treatment of
a noisy or rank-deficient Gram matrix. If a selection still ends early the
rest of its ordering is filled in random order and the report says so.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import (
    Dataset,
    ParamVector,
    estimate_fisher_info,
    log_likelihood,
    per_example_gradients,
    predict_proba,
    train_logistic,
)
from .errors import DataFormatError, ProtoquadError, TrainingError
from .io import load_dataset
from .kernel import KernelOracle, affinity_vector
from .variants import METHODS, select

logger = logging.getLogger(__name__)

TASKS = ("clean", "mislabel", "summarize")
BASELINES = ("random", "self_influence")

# the curated set is 500 of 4137 training points, scaled to the dataset size
CURATED_FRACTION = 500 / 4137


class ExperimentError(ProtoquadError):
    """An experiment cannot run as configured."""


@dataclass
class ExperimentConfig:
    task: str
    dataset: str | None = None
    synthetic: dict = field(default_factory=dict)
    test_size: float = 0.2
    val_fraction: float = 0.1
    noise_fraction: float = 0.05
    flip_fraction: float = 0.2
    curated_size: int | None = None
    curated_indices: list | None = None
    removal_counts: list = field(default_factory=lambda: [25, 50, 100])
    inspect_fractions: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3])
    subset_sizes: list = field(default_factory=lambda: [50, 100, 200])
    method: str = "sbq"
    delta: float = 0.1
    n_shards: int = 1
    mode: str = "full"
    ridge_coeff: float = 1e-6
    nugget: float = 1e-3
    l2: float = 1.0
    weighted: bool = False
    baselines: list = field(default_factory=lambda: ["random"])
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ExperimentError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in METHODS:
            raise ExperimentError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("noise_fraction", "flip_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ExperimentError(f"{name} must lie in [0, 1), got {v}")
        if not (0 < self.test_size < 1 or (float(self.test_size).is_integer() and self.test_size >= 1)):
            raise ExperimentError(f"test_size must be a fraction in (0, 1) or a positive count, got {self.test_size}")
        for name in ("removal_counts", "subset_sizes"):
            if any(int(c) != c or c < 0 for c in getattr(self, name)):
                raise ExperimentError(f"{name} must hold nonnegative integers")
        if any(not 0 < f <= 1 for f in self.inspect_fractions):
            raise ExperimentError("inspect_fractions must lie in (0, 1]")
        if self.curated_size is not None and self.curated_size < 1:
            raise ExperimentError("curated_size must be positive")
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ExperimentError(f"unknown baselines {sorted(bad)}; expected a subset of {BASELINES}")
        if self.nugget < 0:
            raise ExperimentError("nugget must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ExperimentError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    task: str
    config: dict
    curves: list
    summary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "config": self.config, "curves": self.curves,
                "summary": self.summary, "flags": self.flags}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False)

    def curve(self, method: str, metric: str) -> list:
        """``[(budget, value), ...]`` for one method and metric."""
        return [(r["budget"], r["value"]) for r in self.curves
                if r["method"] == method and r["metric"] == metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "budget", "metric", "value", "seed"])
        for r in self.curves:
            w.writerow([r["method"], r["budget"], r["metric"], format(r["value"], ".17g"), r["seed"]])
        return buf.getvalue()


# ---------------------------------------------------------------- data


def make_synthetic(n: int = 2000, d: int = 10, seed: int = 0, scale: float = 2.0,
                   bias: float = 0.3) -> Dataset:
    """Well-specified logistic data: ``x ~ N(0, I)``, ``y ~ Bernoulli(sigmoid(theta.x + bias))``.

    ``theta`` points in a random direction with norm ``scale``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    theta = rng.standard_normal(d)
    theta *= scale / np.linalg.norm(theta)
    prob = 1.0 / (1.0 + np.exp(-(X @ theta + bias)))
    y = (rng.random(n) < prob).astype(np.int64)
    return Dataset(X, y)


def _load(config: ExperimentConfig, rng) -> Dataset:
    if config.dataset is not None:
        return load_dataset(config.dataset)
    gen = {"n": 2000, "d": 10, "scale": 2.0, "bias": 0.3}
    gen.update(config.synthetic)
    gen.setdefault("seed", int(rng.integers(2**31)))
    return make_synthetic(**gen)


def split_data(data: Dataset, test_size, rng):
    """Random train/test split; ``test_size`` is a fraction or an absolute count."""
    n_test = int(test_size) if test_size >= 1 else int(round(test_size * data.n))
    if not 0 < n_test < data.n:
        raise ExperimentError(f"test split of {n_test} leaves no data on one side (n={data.n})")
    perm = rng.permutation(data.n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def _fit(data: Dataset, config: ExperimentConfig, flags: list, tag: str, sample_weight=None) -> ParamVector:
    params = train_logistic(data, l2=config.l2, sample_weight=sample_weight)
    if not params.converged:
        flags.append(f"{tag}: retrain did not converge (gradient norm {params.grad_norm:.3e})")
    return params


def _accuracy(params: ParamVector, data: Dataset) -> float:
    pred = (predict_proba(params, data.features) > 0.5).astype(np.int64)
    return float(np.mean(pred == data.labels))


def _mean_ll(params: ParamVector, data: Dataset) -> float:
    return float(np.mean(log_likelihood(params, data)))


def _oracle(config: ExperimentConfig, train_grads, target_grads, metric_grads):
    metric = estimate_fisher_info(metric_grads, config.ridge_coeff, mode=config.mode)
    oracle = KernelOracle(train_grads, target_grads, metric if config.mode == "full" else None)
    if config.nugget:
        W = oracle.whitened("train")
        oracle.nugget = config.nugget * float(np.mean(np.einsum("ij,ij->i", W, W)))
    return oracle


def _order(config: ExperimentConfig, oracle, budget: int, rng, flags: list, tag: str):
    """Selection order of length ``budget``, padded in random order if the method stops early."""
    aff = affinity_vector(oracle)
    budget = min(budget, oracle.n_train)
    report = select(config.method, budget, oracle, aff, delta=config.delta,
                    n_shards=config.n_shards, seed=int(rng.integers(2**31)))
    order = list(report.selections)
    if len(order) < budget:
        flags.append(f"{tag}: {config.method} stopped after {len(order)} of {budget}; rest filled at random")
        rest = np.setdiff1d(np.arange(oracle.n_train), order)
        order += [int(i) for i in rng.permutation(rest)[: budget - len(order)]]
    return np.asarray(order, dtype=np.int64), report


def _self_influence(oracle) -> np.ndarray:
    W = oracle.whitened("train")
    return np.argsort(-np.einsum("ij,ij->i", W, W), kind="stable")


def _row(method, budget, metric, value, seed):
    value = float(value)
    if not math.isfinite(value):
        raise ExperimentError(f"non-finite {metric} for {method} at budget {budget}")
    return {"method": method, "budget": int(budget), "metric": metric, "value": value, "seed": seed}


# ---------------------------------------------------------------- cleaning


def run_cleaning(config: ExperimentConfig) -> ExperimentReport:
    """Remove the training points that best explain validation mistakes, then retrain.

    Synthetic data gets ``noise_fraction`` of its training labels flipped.
    For each budget ``b`` the top-``b`` selected points are dropped and the
    model is retrained; random removal is the paired baseline. An optional
    ``curated_indices`` list stands in for a manual curation step.
    """
    rng = np.random.default_rng(config.seed)
    flags: list = []
    data = _load(config, rng)
    pool, test = split_data(data, config.test_size, rng)
    n_val = max(1, int(round(config.val_fraction * pool.n)))
    perm = rng.permutation(pool.n)
    val, train = pool.subset(np.sort(perm[:n_val])), pool.subset(np.sort(perm[n_val:]))
    labels = train.labels.copy()
    n_noise = int(round(config.noise_fraction * train.n))
    noisy = np.sort(rng.choice(train.n, n_noise, replace=False)) if n_noise else np.zeros(0, np.int64)
    labels[noisy] = 1 - labels[noisy]
    train = Dataset(train.features, labels, train.ids)

    budgets = [int(b) for b in config.removal_counts]
    if max(budgets, default=0) >= train.n:
        raise ExperimentError(f"removal budget {max(budgets)} must be below t={train.n}")
    params = _fit(train, config, flags, "base")
    base_acc = _accuracy(params, test)
    pred = (predict_proba(params, val.features) > 0.5).astype(np.int64)
    wrong = np.flatnonzero(pred != val.labels)
    if wrong.size == 0:
        raise ExperimentError("no misclassified validation points; nothing to explain")

    G = per_example_gradients(params, train)
    oracle = _oracle(config, G, per_example_gradients(params, val.subset(wrong)), G)
    order, report = _order(config, oracle, max(budgets, default=0) or 1, rng, flags, "clean")
    orders = {config.method: order}
    if "random" in config.baselines:
        orders["random"] = rng.permutation(train.n)
    if "self_influence" in config.baselines:
        orders["self_influence"] = _self_influence(oracle)

    curves = []
    for name, ordr in orders.items():
        for b in budgets:
            if b == 0:
                acc = base_acc
            else:
                keep = np.setdiff1d(np.arange(train.n), ordr[:b])
                acc = _accuracy(_fit(train.subset(keep), config, flags, f"{name}@{b}"), test)
            curves.append(_row(name, b, "test_accuracy", acc, config.seed))
            hit = np.isin(ordr[:b], noisy).sum() / max(1, noisy.size)
            curves.append(_row(name, b, "noise_removed", hit, config.seed))
    if config.curated_indices is not None:
        cur = np.unique(np.asarray(config.curated_indices, dtype=np.int64))
        if cur.size and (cur.min() < 0 or cur.max() >= train.n):
            raise ExperimentError(f"curated index out of range [0, {train.n})")
        keep = np.setdiff1d(np.arange(train.n), cur)
        acc = _accuracy(_fit(train.subset(keep), config, flags, "curated"), test)
        curves.append(_row("curated", int(cur.size), "test_accuracy", acc, config.seed))

    summary = {"base_accuracy": base_acc, "n_train": train.n, "n_validation": val.n, "n_test": test.n,
               "n_misclassified_validation": int(wrong.size), "n_noisy": int(noisy.size),
               "selection_kernel_evals": report.kernel_evals}
    return ExperimentReport("clean", config.to_dict(), curves, summary, flags)


# ---------------------------------------------------------------- mislabel


def run_mislabel(config: ExperimentConfig) -> ExperimentReport:
    """Simulate label curation in the order suggested by each method.

    A clean curated subset (default: 500/4137 of the training pool) is held
    out of the noise and doubles as validation data; ``flip_fraction`` of the
    remaining labels are flipped. The model trains on everything. Candidates
    are the noisy points, ranked against the misclassified curated points.
    Inspecting a point fixes its label if it was flipped.
    """
    if config.flip_fraction == 0:
        raise ExperimentError("flip_fraction is 0: the fraction of flips fixed is undefined")
    rng = np.random.default_rng(config.seed)
    flags: list = []
    data = _load(config, rng)
    pool, test = split_data(data, config.test_size, rng)
    n_cur = config.curated_size or max(1, int(round(CURATED_FRACTION * pool.n)))
    if n_cur >= pool.n:
        raise ExperimentError(f"curated_size {n_cur} leaves no candidates (pool has {pool.n})")
    perm = rng.permutation(pool.n)
    curated, cands = pool.subset(np.sort(perm[:n_cur])), pool.subset(np.sort(perm[n_cur:]))
    t = cands.n
    n_flip = max(1, int(round(config.flip_fraction * t)))
    flipped = np.sort(rng.choice(t, n_flip, replace=False))
    noisy = cands.labels.copy()
    noisy[flipped] = 1 - noisy[flipped]
    is_flip = np.zeros(t, dtype=bool)
    is_flip[flipped] = True

    def assemble(labels):
        return Dataset(np.vstack([cands.features, curated.features]),
                       np.concatenate([labels, curated.labels]))

    train = assemble(noisy)
    params = _fit(train, config, flags, "base")
    pred = (predict_proba(params, curated.features) > 0.5).astype(np.int64)
    wrong = np.flatnonzero(pred != curated.labels)
    if wrong.size == 0:
        raise ExperimentError("no misclassified curated points; nothing to explain")
    G = per_example_gradients(params, train)
    oracle = _oracle(config, G[:t], per_example_gradients(params, curated.subset(wrong)), G)

    budgets = sorted({min(t, int(math.ceil(f * t))) for f in config.inspect_fractions})
    partial = [b for b in budgets if b < t]
    reach = max(partial, default=0)
    if reach:
        order, report = _order(config, oracle, reach, rng, flags, "mislabel")
        kevals = report.kernel_evals
    else:
        order, kevals = np.zeros(0, np.int64), 0
    orders = {config.method: order}
    if "random" in config.baselines:
        orders["random"] = rng.permutation(t)
    if "self_influence" in config.baselines:
        orders["self_influence"] = _self_influence(oracle)

    curves = []
    for name, ordr in orders.items():
        for b in budgets:
            seen = np.arange(t) if b >= t else ordr[:b]
            fixed = float(is_flip[seen].sum()) / n_flip
            labels = noisy.copy()
            labels[seen] = cands.labels[seen]
            acc = _accuracy(_fit(assemble(labels), config, flags, f"{name}@{b}"), test)
            curves.append(_row(name, b, "fraction_fixed", fixed, config.seed))
            curves.append(_row(name, b, "test_accuracy", acc, config.seed))
    summary = {"base_accuracy": _accuracy(params, test), "n_candidates": t, "n_curated": n_cur,
               "n_flipped": n_flip, "n_misclassified_curated": int(wrong.size), "n_test": test.n,
               "budgets": budgets, "selection_kernel_evals": kevals}
    return ExperimentReport("mislabel", config.to_dict(), curves, summary, flags)


# ---------------------------------------------------------------- summarization


def _subset_ll(train, test, idx, config, flags, tag, weights=None):
    idx = np.asarray(idx, dtype=np.int64)
    sub = train.subset(np.sort(idx))
    if sub.n < 2 or np.all(sub.labels == sub.labels[0]):
        logger.warning("%s: subset of size %d is too small or single-class; skipped", tag, sub.n)
        flags.append(f"{tag}: skipped (size {sub.n} or single class)")
        return None
    sw = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)[np.argsort(idx, kind="stable")]
        w = np.clip(w, 0.0, None)
        if not np.any(w > 0):
            flags.append(f"{tag}: all quadrature weights clipped to 0; skipped")
            return None
        sw = w * (w.size / w.sum())
    try:
        params = _fit(sub, config, flags, tag, sample_weight=sw)
    except TrainingError as exc:
        flags.append(f"{tag}: skipped ({exc})")
        return None
    return _mean_ll(params, test)


def run_summarize(config: ExperimentConfig) -> ExperimentReport:
    """Retrain on ``k`` selected prototypes and compare held-out log-likelihood.

    A ``val_fraction`` slice of the training pool acts as a proxy for the
    unseen test set when building affinities. Sizes ``k >= t`` use the whole
    training set, so they reproduce the full-data reference exactly.
    """
    rng = np.random.default_rng(config.seed)
    flags: list = []
    data = _load(config, rng)
    pool, test = split_data(data, config.test_size, rng)
    n_val = max(1, int(round(config.val_fraction * pool.n)))
    perm = rng.permutation(pool.n)
    val, train = pool.subset(np.sort(perm[:n_val])), pool.subset(np.sort(perm[n_val:]))
    t = train.n
    sizes = [int(k) for k in config.subset_sizes]
    if any(k < 1 for k in sizes):
        raise ExperimentError("subset sizes must be positive")

    params = _fit(train, config, flags, "full")
    full_ll = _mean_ll(params, test)
    G = per_example_gradients(params, train)
    oracle = _oracle(config, G, per_example_gradients(params, val), G)
    aff = affinity_vector(oracle)

    prefix = config.method in ("sbq", "mp")
    reach = max([k for k in sizes if k < t], default=0)
    shared = None
    if prefix and reach:
        shared = select(config.method, reach, oracle, aff, seed=config.seed)

    curves = []
    kevals = 0
    for k in sizes:
        if k >= t:
            ll = full_ll
            curves.append(_row(config.method, k, "test_log_likelihood", ll, config.seed))
            if "random" in config.baselines:
                curves.append(_row("random", k, "test_log_likelihood", ll, config.seed))
            continue
        rep = shared if shared is not None else select(
            config.method, k, oracle, aff, delta=config.delta, n_shards=config.n_shards,
            seed=int(rng.integers(2**31)))
        kevals = max(kevals, rep.kernel_evals)
        idx = list(rep.selections[:k])
        weights = None
        if config.weighted:
            weights = rep.weights if len(rep.selections) == len(idx) else _refit_weights(oracle, aff, idx)
        if len(idx) < k:
            flags.append(f"summarize@{k}: {config.method} stopped after {len(idx)}; rest filled at random")
            rest = rng.permutation(np.setdiff1d(np.arange(t), idx))[: k - len(idx)]
            if weights is not None:
                weights = list(weights) + [0.0] * rest.size
            idx += [int(i) for i in rest]
        ll = _subset_ll(train, test, idx, config, flags, f"{config.method}@{k}", weights)
        if ll is not None:
            curves.append(_row(config.method, k, "test_log_likelihood", ll, config.seed))
        if "random" in config.baselines:
            ridx = rng.choice(t, k, replace=False)
            ll = _subset_ll(train, test, ridx, config, flags, f"random@{k}")
            if ll is not None:
                curves.append(_row("random", k, "test_log_likelihood", ll, config.seed))

    summary = {"full_log_likelihood": full_ll, "n_train": t, "n_validation": val.n, "n_test": test.n,
               "selection_kernel_evals": kevals}
    return ExperimentReport("summarize", config.to_dict(), curves, summary, flags)


def _refit_weights(oracle, aff, idx):
    """Quadrature weights ``K_SS^{-1} z_S`` for a prefix of a longer selection."""
    K = oracle.block(idx, idx)
    return np.linalg.solve(K, aff.z[idx]).tolist()


RUNNERS = {"clean": run_cleaning, "mislabel": run_mislabel, "summarize": run_summarize}


def run_experiment(config: ExperimentConfig | dict) -> ExperimentReport:
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    try:
        return RUNNERS[config.task](config)
    except DataFormatError:
        raise
    except ValueError as exc:
        raise ExperimentError(str(exc)) from exc


def run_seeds(config: ExperimentConfig | dict, seeds, threads: int = 1) -> list:
    """Run one experiment per seed; independent seeds may run on parallel threads."""
    base = config.to_dict() if isinstance(config, ExperimentConfig) else dict(config)
    cfgs = [ExperimentConfig.from_dict({**base, "seed": int(s)}) for s in seeds]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run_experiment, cfgs))
    return [run_experiment(c) for c in cfgs]


def median_curve(reports, method: str, metric: str) -> dict:
    """Per-budget median over seeds."""
    vals: dict[int, list] = {}
    for rep in reports:
        for b, v in rep.curve(method, metric):
            vals.setdefault(b, []).append(v)
    return {b: float(np.median(v)) for b, v in sorted(vals.items())}
