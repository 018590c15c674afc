"""Full conformal prediction sets by Bayesian model averaging."""

from .baselines import MergeRule, bayes_credible_set, bma_credible_set, majority_vote_merge
from .bma import ModelPosterior, ModelSpace, bma_mixture_predictive, model_posterior
from .conformal import (
    ConformalResult,
    ConformityTable,
    LabelGrid,
    PredictionSet,
    aoi_scores_one_model,
    build_set,
    cbma_aggregate,
    conformal_rank,
    exact_cbma_score_oracle,
    full_conformal_set,
)
from .experiments import (
    ExperimentReport,
    GeneratorSpec,
    convergence_study,
    generate,
    hermite_space,
    pairs_space,
    quadratic_space,
    run_experiment,
    synthetic_coverage,
)
from .linear import (
    BasisSpec,
    Dataset,
    FittedModel,
    HalfNormalNoise,
    KnownNoise,
    ModelSpec,
    PosteriorDraws,
    conjugate_posterior,
    expand_basis,
    fit_model,
    log_marginal_likelihood_conjugate,
    posterior_predictive_density_exact,
    sample_posterior,
)

__version__ = "0.1.0"
