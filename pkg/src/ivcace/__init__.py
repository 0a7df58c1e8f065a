"""Instrumental-variable estimation of complier average causal effects
with nonignorably missing categorical covariates."""

from .model import (
    ComplianceClass,
    CovariateSpec,
    Dataset,
    ModelError,
    ParamSet,
    Record,
    cace,
    cell_joint_prob,
    prob_compliance,
    prob_iv,
    prob_outcome,
    prob_response,
)
from .baselines import (
    EstimateCI,
    ImputationConfig,
    complete_case_fit,
    mar_impute_fit,
    propensity_subclassification,
    regression_adjusted,
    unadjusted_difference,
)
from .estimands import (
    BootstrapConfig,
    CaceReport,
    bootstrap_ci,
    cace_table,
    compliance_proportions,
    weighted_cace,
)
from .estimator import IVCaceEstimator
from .sensitivity import (
    SensitivityGrid,
    SensitivityParams,
    cace_with_q,
    fit_with_q,
    sensitivity_grid,
    shifted_ci,
)
from .simulation import (
    SINGLE_COV_SPEC,
    SingleCovScenario,
    StudyConfig,
    generate,
    nicu_like_params,
    run_study,
    sample_from_params,
    scenario_params,
)
from .em import (
    CellExpectations,
    EStepError,
    FitConfig,
    FitResult,
    ObservedCounts,
    e_step,
    fit_em,
    latent_support,
    m_step,
    observed_loglik,
    tabulate_observed,
)

__all__ = [
    "ComplianceClass",
    "CovariateSpec",
    "Dataset",
    "ModelError",
    "ParamSet",
    "Record",
    "cace",
    "cell_joint_prob",
    "prob_compliance",
    "prob_iv",
    "prob_outcome",
    "prob_response",
    "CellExpectations",
    "EStepError",
    "FitConfig",
    "FitResult",
    "ObservedCounts",
    "e_step",
    "fit_em",
    "latent_support",
    "m_step",
    "observed_loglik",
    "tabulate_observed",
    "EstimateCI",
    "ImputationConfig",
    "complete_case_fit",
    "mar_impute_fit",
    "propensity_subclassification",
    "regression_adjusted",
    "unadjusted_difference",
    "BootstrapConfig",
    "CaceReport",
    "bootstrap_ci",
    "cace_table",
    "compliance_proportions",
    "weighted_cace",
    "IVCaceEstimator",
    "SensitivityGrid",
    "SensitivityParams",
    "cace_with_q",
    "fit_with_q",
    "sensitivity_grid",
    "shifted_ci",
    "SINGLE_COV_SPEC",
    "SingleCovScenario",
    "StudyConfig",
    "generate",
    "nicu_like_params",
    "run_study",
    "sample_from_params",
    "scenario_params",
]

__version__ = "0.1.0"
