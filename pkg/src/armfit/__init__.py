"""Design-based covariate adjustment for multi-armed and factorial
randomized experiments: assignment generation, ordinary and restricted
least squares with robust covariances, factorial-effect extraction,
restriction testing, and a deterministic replication harness.
"""

from .api import FactorialEffectEstimator, TreatmentEffectEstimator
from .design import (
    Assignment,
    BalanceFilter,
    FactorSpec,
    TreatmentStructure,
    complete_randomize,
    count_assignments,
    enumerate_assignments,
    fractional_subset,
    mahalanobis_imbalance,
    rerandomize,
)
from .errors import (
    BalanceExhaustedError,
    NumericalError,
    RankError,
    ValidationError,
)
from .estimators import (
    EstimationResult,
    ExperimentData,
    adjusted_means,
    build_spec,
    estimate,
    rem_plugin_cov,
    rem_reference_sample,
    restriction_equal_correlation,
    restriction_separable,
    restriction_zero_correlation,
    wald_restriction_test,
    within_group_slopes,
)
from .factorial import (
    EffectSet,
    FactorialResult,
    baseline_contrasts,
    canonical_subsets,
    effect_contrast,
    factor_regress,
    standard_contrasts,
    subset_label,
    unsaturated_restriction,
)
from .harness import (
    FactorialSpec,
    StudyConfig,
    StudySummary,
    TreatmentSpec,
    dgp_fractional,
    dgp_section6,
    export_results,
    run_fractional_study,
    run_section6_study,
    run_study,
    table2_specs,
)
from .lsq import (
    DesignMatrix,
    FitResult,
    Restriction,
    ddt_cov,
    ehw_cov,
    ols_fit,
    rls_fit,
    transform_regressors,
)
from .oracle import (
    PotentialTable,
    exact_randomization_moments,
    is_constant_effects,
    is_equal_correlation,
    is_zero_correlation,
    nu_factor,
    pop_gamma,
    pop_means,
    theory_quantities,
    u_mu,
    v_matrix,
)
from .special import chi2_cdf, chi2_quantile, chi2_sf, regularized_gamma_p

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
