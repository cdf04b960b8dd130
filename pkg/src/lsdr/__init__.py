"""Label-shift semi-supervised estimation.

Synthetic long-tailed data generation, maximum-likelihood and EM training of
a classifier plus labeling mechanism, doubly robust class-prior estimation
with influence-function confidence intervals, and a Monte Carlo harness that
verifies the estimator's efficiency properties.
"""

from .data import Dataset, GenerationTruth, MissingnessMechanism, Observation
from .estimators import (
    EstimateReport,
    NuisancePair,
    confidence_interval,
    dr_estimate,
    influence_values,
    ipw_estimate,
    or_estimate,
)
from .montecarlo import (
    McScenario,
    benchmark_scenario,
    bias_decay_study,
    run_replications,
    shape_sweep,
)
from .network import (
    ClassifierParams,
    forward,
    logit_adjusted_loss_and_grad,
    optimizer_step,
    posthoc_adjust,
    pseudo_label,
    softmax,
    weighted_ce_loss_and_grad,
)
from .reporting import ExperimentRecord, aggregate, uniform_test_eval
from .simplex import (
    project_to_simplex,
    recover_unlabeled_prior,
    top1_accuracy,
    tv_distance,
)
from .synth import (
    MixtureSpec,
    ShiftConfig,
    apply_shape,
    augment,
    bayes_linear_params,
    bayes_posterior,
    bayes_posterior_matrix,
    generate,
    longtail_counts,
    sample_iid,
)
from .training import (
    BatchUpdateDRClassifier,
    DRRiskClassifier,
    EMClassifier,
    EmState,
    MLEClassifier,
    SupervisedClassifier,
    TrainConfig,
    TwoStageClassifier,
    dr_risk_loss_and_grad,
    dr_risk_loss_direct,
    e_step,
    m_step,
    marginal_loglik,
)

__version__ = "0.1.0"

__all__ = [
    "BatchUpdateDRClassifier",
    "ClassifierParams",
    "Dataset",
    "DRRiskClassifier",
    "EMClassifier",
    "EmState",
    "EstimateReport",
    "ExperimentRecord",
    "GenerationTruth",
    "McScenario",
    "MissingnessMechanism",
    "MixtureSpec",
    "MLEClassifier",
    "NuisancePair",
    "Observation",
    "ShiftConfig",
    "SupervisedClassifier",
    "TrainConfig",
    "TwoStageClassifier",
    "aggregate",
    "apply_shape",
    "augment",
    "bayes_linear_params",
    "bayes_posterior",
    "bayes_posterior_matrix",
    "benchmark_scenario",
    "bias_decay_study",
    "confidence_interval",
    "dr_estimate",
    "dr_risk_loss_and_grad",
    "dr_risk_loss_direct",
    "e_step",
    "forward",
    "generate",
    "influence_values",
    "ipw_estimate",
    "logit_adjusted_loss_and_grad",
    "longtail_counts",
    "m_step",
    "marginal_loglik",
    "optimizer_step",
    "or_estimate",
    "posthoc_adjust",
    "project_to_simplex",
    "pseudo_label",
    "recover_unlabeled_prior",
    "run_replications",
    "sample_iid",
    "shape_sweep",
    "softmax",
    "top1_accuracy",
    "tv_distance",
    "uniform_test_eval",
    "weighted_ce_loss_and_grad",
]
