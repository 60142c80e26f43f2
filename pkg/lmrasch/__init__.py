from lmrasch.bundle import RunManifest, load_bundle, write_bundle
from lmrasch.config import FitConfig, load_config
from lmrasch.data import Batch, Cluster, Dataset, ItemDesign, Subject
from lmrasch.estimation import (
    FitResult,
    complete_data_loglik,
    fit,
    initialize,
    mstep_cluster_logit,
    mstep_initial,
    mstep_rasch,
    mstep_transition,
)
from lmrasch.exceptions import (
    ConstraintViolation,
    FitFailure,
    InvalidArgument,
    InvalidDesign,
    LatentMarkovError,
    LikelihoodRatioError,
    LoadError,
    MStepFailure,
    UsageError,
)
from lmrasch.likelihood import (
    cluster_loglik,
    emission_logprobs,
    forward_states,
    subject_loglik_given_u,
    total_loglik,
)
from lmrasch.params import (
    ParamId,
    Parameters,
    bic,
    cluster_class_probs,
    count_parameters,
    cumulative_logits,
    initial_probs,
    invert_global_logits,
    rasch_prob,
    transition_matrix,
)
from lmrasch.posterior import (
    PosteriorQuantities,
    average_transitions,
    cluster_posterior_w,
    decode,
    estep,
    state_distribution,
    subject_posteriors_given_u,
)
from lmrasch.selection import (
    GridResult,
    StandardError,
    class_profile,
    grid_search,
    lr_test,
    profile_se,
    standard_errors,
    wald_pvalue,
)
from lmrasch.simulation import CovariateSpec, LatentTruth, SimSpec, empirical_transitions, simulate

__all__ = [
    "average_transitions",
    "Batch",
    "bic",
    "class_profile",
    "Cluster",
    "cluster_class_probs",
    "cluster_loglik",
    "cluster_posterior_w",
    "complete_data_loglik",
    "ConstraintViolation",
    "count_parameters",
    "CovariateSpec",
    "cumulative_logits",
    "Dataset",
    "decode",
    "emission_logprobs",
    "empirical_transitions",
    "estep",
    "fit",
    "FitConfig",
    "FitFailure",
    "FitResult",
    "forward_states",
    "grid_search",
    "GridResult",
    "initial_probs",
    "initialize",
    "InvalidArgument",
    "InvalidDesign",
    "invert_global_logits",
    "ItemDesign",
    "LatentMarkovError",
    "LatentTruth",
    "LikelihoodRatioError",
    "load_bundle",
    "load_config",
    "LoadError",
    "lr_test",
    "mstep_cluster_logit",
    "mstep_initial",
    "mstep_rasch",
    "mstep_transition",
    "MStepFailure",
    "ParamId",
    "Parameters",
    "PosteriorQuantities",
    "profile_se",
    "rasch_prob",
    "RunManifest",
    "SimSpec",
    "simulate",
    "standard_errors",
    "StandardError",
    "state_distribution",
    "subject_loglik_given_u",
    "subject_posteriors_given_u",
    "Subject",
    "total_loglik",
    "transition_matrix",
    "UsageError",
    "wald_pvalue",
    "write_bundle",
]
