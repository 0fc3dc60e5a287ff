from .toy import (
    ToyData,
    ToyVariant,
    ToyModel,
    conjugate_posterior,
    simulate_toy_data,
    toy_exceedance_prob,
    toy_logposterior,
)
from .nmr import (
    NetworkModel,
    ParameterVector,
    Priors,
    StudyKind,
    StudyRecord,
    SubgroupSummarySet,
    bsl_study_loglik,
    full_ipd_loglik,
    linear_predictor,
    marginal_loglik,
    network_logposterior,
    pattern_probs,
    subgroup_logor_diff,
)

__all__ = [
    "ToyData", "ToyVariant", "ToyModel", "conjugate_posterior",
    "simulate_toy_data", "toy_exceedance_prob", "toy_logposterior",
    "NetworkModel", "ParameterVector", "Priors", "StudyKind", "StudyRecord",
    "SubgroupSummarySet", "bsl_study_loglik", "full_ipd_loglik",
    "linear_predictor", "marginal_loglik", "network_logposterior",
    "pattern_probs", "subgroup_logor_diff",
]
