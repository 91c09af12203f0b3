"""Matched observational study pipeline with data-turnover replicability analysis."""

from dataturnover.cohort import (
    Cohort,
    Covariate,
    CovariateSpec,
    OutcomeSpec,
    Schema,
    Subject,
    apply_eligibility,
    impute_from_siblings,
    ingest_csv,
    write_csv,
)
from dataturnover.synthetic import generate_synthetic
from dataturnover.matching import (
    BalanceTable,
    DesignMatrix,
    MatchedDesign,
    PropensityFit,
    balance_table,
    build_design_matrix,
    effective_sample_size,
    fit_propensity,
    match,
    trim_overlap,
)
from dataturnover.inference import (
    EffectInterval,
    OutcomeSample,
    OutcomeTest,
    extract_outcome_sample,
    invert_ci,
    m_statistic_pvalues,
    mcnemar_pvalues,
)
from dataturnover.turnover import (
    DecisionReport,
    ProtocolViolation,
    StepOneCommitment,
    StepTwoRegistration,
    TurnoverSession,
    assemble_report,
    fcr_levels,
    holm,
    screen_hypotheses,
    select_directions,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceTable",
    "Cohort",
    "Covariate",
    "CovariateSpec",
    "DecisionReport",
    "DesignMatrix",
    "EffectInterval",
    "MatchedDesign",
    "OutcomeSample",
    "OutcomeSpec",
    "OutcomeTest",
    "PropensityFit",
    "ProtocolViolation",
    "Schema",
    "StepOneCommitment",
    "StepTwoRegistration",
    "Subject",
    "TurnoverSession",
    "apply_eligibility",
    "assemble_report",
    "balance_table",
    "build_design_matrix",
    "effective_sample_size",
    "extract_outcome_sample",
    "fcr_levels",
    "fit_propensity",
    "generate_synthetic",
    "holm",
    "impute_from_siblings",
    "ingest_csv",
    "invert_ci",
    "m_statistic_pvalues",
    "match",
    "mcnemar_pvalues",
    "screen_hypotheses",
    "select_directions",
    "trim_overlap",
    "write_csv",
]
