"""Fisher kernel evaluation, test affinities, MMD and RKHS distances."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .embedding import FisherMetric
from .errors import SingularMetricError

logger = logging.getLogger(__name__)

MMD_CLIP = 1e-10


def _as_index(idx) -> np.ndarray:
    return np.atleast_1d(np.asarray(idx, dtype=np.int64))


class KernelOracle:
    """Lazily evaluated Fisher kernel over train x train and train x test pairs.

    ``k(i, j) = f_i^T info^{-1} f_j`` in ``full`` mode and ``f_i^T f_j`` in
    ``practical`` mode. The metric is Cholesky-factored once and every
    embedding is whitened by a triangular solve, so no explicit inverse is
    formed. ``eval_count`` counts every kernel entry handed out, whether it
    came from the cache or was computed on demand.

    ``nugget`` adds a constant to the train x train diagonal (GP observation
    noise). It is zero unless a caller asks for it.
    """

    def __init__(
        self,
        train_grads: np.ndarray,
        test_grads: np.ndarray | None = None,
        metric: FisherMetric | None = None,
        nugget: float = 0.0,
        cache: bool = False,
    ):
        train = np.atleast_2d(np.asarray(train_grads, dtype=np.float64))
        p = train.shape[1]
        test = None
        if test_grads is not None:
            test = np.atleast_2d(np.asarray(test_grads, dtype=np.float64))
            if test.shape[1] != p:
                raise ValueError(f"train has {p} columns, test has {test.shape[1]}")
        self.metric = metric
        self.mode = "practical" if metric is None else metric.mode
        self.nugget = float(nugget)
        self.train_grads = train
        self.test_grads = test
        if self.mode == "full":
            if metric.p != p:
                raise ValueError(f"metric is {metric.p}x{metric.p}, embeddings have {p} columns")
            self._chol = self._factor(metric.info)
            self._train = self._whiten(train)
            self._test = None if test is None else self._whiten(test)
        else:
            self._chol = None
            self._train = train
            self._test = test
        self._gram = None
        self._lock = threading.Lock()
        self.eval_count = 0
        if cache:
            self._gram = self._train @ self._train.T
            self._gram = 0.5 * (self._gram + self._gram.T)

    @classmethod
    def from_gram(cls, K: np.ndarray, nugget: float = 0.0) -> "KernelOracle":
        """Oracle over a precomputed symmetric train x train kernel matrix."""
        K = np.asarray(K, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel matrix must be square, got {K.shape}")
        self = cls.__new__(cls)
        self.metric = None
        self.mode = "precomputed"
        self.nugget = float(nugget)
        self.train_grads = None
        self.test_grads = None
        self._chol = None
        self._train = None
        self._test = None
        self._gram = 0.5 * (K + K.T)
        self._lock = threading.Lock()
        self.eval_count = 0
        return self

    @staticmethod
    def _factor(info):
        try:
            return linalg.cholesky(info, lower=True)
        except linalg.LinAlgError:
            w = np.linalg.eigvalsh(info)
            raise SingularMetricError(
                f"Fisher metric is not positive definite (eigenvalues in [{w[0]:.3e}, {w[-1]:.3e}]); "
                "increase ridge_coeff or use mode='practical'"
            ) from None

    def _whiten(self, G):
        U = linalg.solve_triangular(self._chol, G.T, lower=True)
        if not np.all(np.isfinite(U)):
            raise SingularMetricError("metric solve produced non-finite values")
        return np.ascontiguousarray(U.T)

    def _count(self, n):
        with self._lock:
            self.eval_count += int(n)

    @property
    def n_train(self) -> int:
        return self._gram.shape[0] if self._train is None else self._train.shape[0]

    @property
    def n_test(self) -> int:
        return 0 if self._test is None else self._test.shape[0]

    @property
    def cached(self) -> bool:
        return self._gram is not None

    def whitened(self, which: str = "train") -> np.ndarray:
        """Embeddings in coordinates where the kernel is a plain dot product."""
        if self._train is None:
            raise TypeError("precomputed-kernel oracle has no embeddings")
        return self._train if which == "train" else self._test

    def _train_entries(self, rows, cols):
        if self._gram is not None:
            out = self._gram[np.ix_(rows, cols)]
        else:
            out = self._train[rows] @ self._train[cols].T
        if self.nugget:
            out = out + self.nugget * (rows[:, None] == cols[None, :])
        return out

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        """Train x train kernel block."""
        rows, cols = _as_index(rows), _as_index(cols)
        self._count(rows.size * cols.size)
        return self._train_entries(rows, cols)

    def diag(self, idx: Sequence[int]) -> np.ndarray:
        idx = _as_index(idx)
        self._count(idx.size)
        if self._gram is not None:
            out = self._gram[idx, idx]
        else:
            W = self._train[idx]
            out = np.einsum("ij,ij->i", W, W)
        return out + self.nugget

    def cross(self, rows: Sequence[int], test_cols: Sequence[int]) -> np.ndarray:
        """Train x test kernel block."""
        if self._test is None:
            raise TypeError("oracle has no test embeddings")
        rows, test_cols = _as_index(rows), _as_index(test_cols)
        self._count(rows.size * test_cols.size)
        return self._train[rows] @ self._test[test_cols].T

    def test_block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        if self._test is None:
            raise TypeError("oracle has no test embeddings")
        rows, cols = _as_index(rows), _as_index(cols)
        self._count(rows.size * cols.size)
        return self._test[rows] @ self._test[cols].T

    def kernel_value(self, i: int, j: int, test: bool = False) -> float:
        """Single kernel entry between train point ``i`` and train (or test) point ``j``."""
        n = self.n_test if test else self.n_train
        if not (0 <= i < self.n_train and 0 <= j < n):
            raise IndexError(f"kernel index ({i}, {j}) out of range")
        if test:
            return float(self.cross([i], [j])[0, 0])
        return float(self.block([i], [j])[0, 0])

    def gram(self) -> np.ndarray:
        """Full train x train matrix (counted as t^2 evaluations)."""
        idx = np.arange(self.n_train)
        return self.block(idx, idx)

    def restrict(self, indices: Sequence[int]) -> "ShardView":
        return ShardView(self, indices)


class ShardView:
    """Accounting view of an oracle limited to a subset of training points.

    Requests touching indices outside the subset raise ``IndexError``.
    ``footprint`` is the number of distinct kernel entries materialised
    through the view, which bounds the storage a shard worker would need.
    """

    def __init__(self, parent: KernelOracle, indices: Sequence[int]):
        self.parent = parent
        self.indices = np.unique(_as_index(indices))
        self._local = np.full(parent.n_train, -1, dtype=np.int64)
        self._local[self.indices] = np.arange(self.indices.size)
        self._touched = np.zeros((self.indices.size, self.indices.size), dtype=bool)
        self.eval_count = 0
        self._lock = threading.Lock()

    @property
    def n_train(self) -> int:
        return self.parent.n_train

    @property
    def mode(self) -> str:
        return self.parent.mode

    @property
    def nugget(self) -> float:
        return self.parent.nugget

    @property
    def footprint(self) -> int:
        return int(np.count_nonzero(self._touched | self._touched.T))

    def _map(self, idx):
        idx = _as_index(idx)
        loc = self._local[idx]
        if np.any(loc < 0):
            raise IndexError(f"index {idx[loc < 0][0]} is outside this shard")
        return loc

    def block(self, rows, cols):
        r, c = self._map(rows), self._map(cols)
        with self._lock:
            self._touched[np.ix_(r, c)] = True
            self.eval_count += r.size * c.size
        return self.parent.block(rows, cols)

    def diag(self, idx):
        loc = self._map(idx)
        with self._lock:
            self._touched[loc, loc] = True
            self.eval_count += loc.size
        return self.parent.diag(idx)


@dataclass
class AffinityVector:
    """Mean kernel affinity of each training point to the target set.

    ``z[i] = mean_j k(train_i, test_j)`` and ``test_self_term`` is the mean
    of ``k`` over all target pairs.
    """

    z: np.ndarray
    test_self_term: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.test_self_term = float(self.test_self_term)


def affinity_vector(oracle: KernelOracle) -> AffinityVector:
    """Precompute z and the target self-term in one sweep.

    Uses the mean whitened target embedding, which is the same row-sum
    written as a single matrix-vector product. Counted as ``t*n + n*n``
    evaluations.
    """
    if oracle.n_test == 0:
        raise ValueError("affinity needs a non-empty target set")
    t, n = oracle.n_train, oracle.n_test
    oracle._count(t * n + n * n)
    mean = oracle._test.mean(axis=0)
    z = oracle._train @ mean
    mu = float(mean @ mean)
    return AffinityVector(z=z, test_self_term=mu)


def mmd_squared(oracle: KernelOracle, selection: Sequence[int], weights: Sequence[float],
                affinity: AffinityVector) -> float:
    """Squared MMD between the target mean embedding and a weighted set of atoms."""
    S = _as_index(selection) if len(selection) else np.zeros(0, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if S.size != w.size:
        raise ValueError(f"{S.size} atoms but {w.size} weights")
    if S.size and (S.min() < 0 or S.max() >= oracle.n_train):
        raise IndexError("selection index out of range")
    mu = affinity.test_self_term
    if S.size == 0:
        return mu
    K = oracle.block(S, S)
    value = mu - 2.0 * float(w @ affinity.z[S]) + float(w @ K @ w)
    if value < 0.0:
        if value >= -MMD_CLIP:
            logger.debug("clipping MMD^2 round-off %.3e to 0", value)
            return 0.0
        logger.warning("MMD^2 is negative (%.3e); kernel may not be PSD", value)
    return value


def rkhs_distance(oracle: KernelOracle, i: int, j: int) -> float:
    """RKHS distance between training point ``i`` and target point ``j``."""
    kii = oracle.kernel_value(i, i)
    kij = oracle.kernel_value(i, j, test=True)
    kjj = float(oracle.test_block([j], [j])[0, 0])
    if oracle.nugget:
        kii -= oracle.nugget
    return float(np.sqrt(max(kii - 2.0 * kij + kjj, 0.0)))
