"""Prototype selection with Fisher kernels and sequential Bayesian quadrature."""

from .embedding import (
    Dataset,
    FisherMetric,
    ParamVector,
    estimate_fisher_info,
    log_likelihood,
    per_example_gradients,
    prediction_gradients,
    predict_proba,
    train_logistic,
)
from .errors import (
    DataFormatError,
    DegenerateCandidate,
    GuardExceeded,
    PoolExhausted,
    PremiseError,
    ProtoquadError,
    SingularMetricError,
    TrainingError,
)
from .io import load_dataset, load_embeddings, save_dataset, save_embeddings
from .kernel import AffinityVector, KernelOracle, affinity_vector, mmd_squared, rkhs_distance
from .selection import InverseState, SelectionReport, extend_inverse, greedy_step, select_sbq
from .variants import select, select_distributed, select_mp, select_stochastic
from .workflows import ExperimentConfig, ExperimentReport, run_experiment

__version__ = "0.1.0"
