"""Fisher embeddings for binary logistic regression.

The embedding of an example is the gradient of its log-likelihood with
respect to the fitted parameters. Gradients for external models can be
ingested from file (see :mod:`protoquad.io`) and used interchangeably with
the ones computed here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DataFormatError, SingularMetricError, TrainingError

logger = logging.getLogger(__name__)

MODES = ("full", "practical")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: list = field(default=None)
    feature_names: list = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DataFormatError(f"features must be a non-empty n x d matrix, got {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DataFormatError(f"expected {n} labels, got shape {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("features contain NaN or Inf")
        bad = np.flatnonzero((self.labels != 0) & (self.labels != 1))
        if bad.size:
            raise DataFormatError(f"labels must be 0/1; row {bad[0]} has {self.labels[bad[0]]!r}")
        self.labels = self.labels.astype(np.int64)
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        elif len(self.ids) != n:
            raise DataFormatError(f"expected {n} ids, got {len(self.ids)}")
        else:
            self.ids = [str(i) for i in self.ids]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], [self.ids[i] for i in idx], self.feature_names)


@dataclass
class ParamVector:
    """Fitted logistic-regression parameters.

    When ``intercept`` is set, the last coordinate multiplies a constant 1
    appended to every feature vector.
    """

    values: np.ndarray
    intercept: bool = True
    converged: bool = True
    grad_norm: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise TrainingError("parameter vector has non-finite entries")

    @property
    def p(self) -> int:
        return self.values.shape[0]


@dataclass
class FisherMetric:
    info: np.ndarray
    ridge: float
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.info = np.asarray(self.info, dtype=np.float64)

    @property
    def p(self) -> int:
        return self.info.shape[0]


def design_matrix(features: np.ndarray, intercept: bool) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if intercept:
        return np.hstack([features, np.ones((features.shape[0], 1))])
    return features


def _check_dims(params: ParamVector, features: np.ndarray) -> np.ndarray:
    X = design_matrix(features, params.intercept)
    if X.shape[1] != params.p:
        raise DataFormatError(
            f"parameter dimension {params.p} does not match features "
            f"({features.shape[-1]} columns, intercept={params.intercept})"
        )
    return X


def log_likelihood(params: ParamVector, data: Dataset) -> np.ndarray:
    """Per-example Bernoulli log-likelihood log p(y | x, theta)."""
    X = _check_dims(params, data.features)
    s = X @ params.values
    # log sigma(s) = -log(1 + e^-s); log(1 - sigma(s)) = -log(1 + e^s)
    return np.where(data.labels == 1, -np.logaddexp(0.0, -s), -np.logaddexp(0.0, s))


def predict_proba(params: ParamVector, features: np.ndarray) -> np.ndarray:
    X = _check_dims(params, features)
    return expit(X @ params.values)


def _objective(theta, X, y, l2, mask, sw):
    s = X @ theta
    n = X.shape[0]
    nll = np.mean(sw * (np.logaddexp(0.0, s) - y * s))
    w = theta * mask
    value = nll + 0.5 * l2 / n * float(w @ w)
    grad = X.T @ (sw * (expit(s) - y)) / n + l2 / n * w
    return value, grad, s


def train_logistic(
    data: Dataset,
    l2: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
    intercept: bool = True,
    sample_weight=None,
) -> ParamVector:
    """Fit logistic regression by damped Newton iterations.

    Minimizes ``mean(sample_weight * NLL) + l2 / (2 n) * ||w||^2`` where ``w``
    excludes the intercept. Stops once the infinity norm of the gradient is at
    most ``tol``. If ``max_iter`` is hit first the result carries
    ``converged=False``.
    """
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    y = data.labels.astype(np.float64)
    if np.all(y == y[0]):
        raise TrainingError(f"all labels equal {int(y[0])}; logistic fit is degenerate")

    X = design_matrix(data.features, intercept)
    n, p = X.shape
    if sample_weight is None:
        sw = np.ones(n)
    else:
        sw = np.asarray(sample_weight, dtype=np.float64)
        if sw.shape != (n,) or np.any(sw < 0) or not np.all(np.isfinite(sw)):
            raise ValueError("sample_weight must be n finite nonnegative values")
    mask = np.ones(p)
    if intercept:
        mask[-1] = 0.0
    theta = np.zeros(p)
    value, grad, s = _objective(theta, X, y, l2, mask, sw)
    gnorm = float(np.max(np.abs(grad)))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        sig = expit(s)
        H = (X * (sw * sig * (1.0 - sig))[:, None]).T @ X / n + np.diag(l2 / n * mask)
        # tiny Levenberg shift keeps the step defined on (near-)separable data
        H[np.diag_indices(p)] += 1e-12 * max(1.0, np.trace(H) / p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        slope = float(grad @ step)
        t = 1.0
        for _ in range(60):
            cand = theta - t * step
            new_value, new_grad, new_s = _objective(cand, X, y, l2, mask, sw)
            if np.isfinite(new_value) and new_value <= value - 1e-4 * t * slope:
                break
            # near the optimum the decrease drowns in round-off; accept a full step that shrinks the gradient
            if (t == 1.0 and np.isfinite(new_value) and new_value <= value + 1e-14 * abs(value)
                    and np.max(np.abs(new_grad)) < 0.5 * gnorm):
                break
            t *= 0.5
        else:
            if not np.isfinite(new_value):
                raise TrainingError(f"non-finite loss at iteration {it}")
            break
        if not np.isfinite(new_value):
            raise TrainingError(f"non-finite loss at iteration {it}")
        theta, value, grad, s = cand, new_value, new_grad, new_s
        gnorm = float(np.max(np.abs(grad)))

    converged = gnorm <= tol
    if not converged:
        logger.warning("logistic fit stopped after %d iterations, gradient norm %.3e > tol %.1e",
                       it, gnorm, tol)
    return ParamVector(theta, intercept=intercept, converged=converged, grad_norm=gnorm, n_iter=it)


def per_example_gradients(params: ParamVector, data: Dataset) -> np.ndarray:
    """Row i is d/dtheta log p(y_i | x_i, theta), i.e. (y_i - sigma(theta.x_i)) x_i."""
    X = _check_dims(params, data.features)
    resid = data.labels - expit(X @ params.values)
    return X * resid[:, None]


def prediction_gradients(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Gradients taken at the model's own predicted labels.

    Used for target points whose true labels must not be read: the embedding
    then describes the prediction being explained.
    """
    X = _check_dims(params, features)
    prob = expit(X @ params.values)
    return X * ((prob > 0.5).astype(np.float64) - prob)[:, None]


def estimate_fisher_info(grads: np.ndarray, ridge_coeff: float = 1e-6, mode: str = "full") -> FisherMetric:
    """Empirical Fisher information (1/n) G^T G plus a trace-relative ridge.

    The ridge added to the diagonal is ``ridge_coeff * trace(I0) / p`` so its
    effect does not depend on the overall gradient scale.
    """
    G = np.asarray(grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise DataFormatError(f"gradient matrix must be non-empty n x p, got {G.shape}")
    if ridge_coeff < 0:
        raise ValueError("ridge_coeff must be nonnegative")
    n, p = G.shape
    info0 = G.T @ G / n
    info0 = 0.5 * (info0 + info0.T)
    scale = np.trace(info0) / p
    if mode == "full" and scale == 0.0:
        raise SingularMetricError("all gradients are zero; Fisher information is singular")
    ridge = ridge_coeff * scale
    info = info0 + ridge * np.eye(p)
    return FisherMetric(info=info, ridge=ridge, mode=mode)
