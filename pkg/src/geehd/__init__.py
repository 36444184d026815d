"""Estimating-equation analysis of clustered binary and count data with many covariates."""

from ._kernels import active_backend
from .correlation import (
    AutoRegressive1,
    CorrelationEstimate,
    Exchangeable,
    Independence,
    SingularCorrelationError,
    Unstructured,
    correlation_matrix,
    estimate_ar1_tau,
    estimate_exchangeable_tau,
    estimate_unstructured,
    inverse_correlation,
)
from .estimator import (
    FitOptions,
    FitResult,
    exact_jacobian,
    fisher_information,
    fit_gee,
    fit_independence,
    score,
)
from .harness import (
    RegularityReport,
    StudyAbortedError,
    StudyConfig,
    check_regularity,
    fit_csv,
    read_csv,
    run_mse_study,
    run_sandwich_study,
    run_study,
    run_wald_study,
    write_csv,
)
from .inference import (
    ConsistencyReport,
    HighDimTestResult,
    Hypothesis,
    WaldResult,
    confidence_interval,
    high_dim_test,
    sandwich_consistency_probe,
    sandwich_covariance,
    wald_test,
)
from .model import (
    BINARY_LOGIT,
    POISSON_LOG,
    ClusterObservation,
    ClusteredDataset,
    DegenerateFitError,
    DimensionError,
    MarginalModel,
    get_model,
    linear_predictor,
    marginal_mean,
    marginal_variance,
    pearson_residuals,
)
from .numerics import NotSpdError, eigen_extremes, invert_spd, solve_spd
from .simulate import (
    BahadurInvalidError,
    GenerationDiagnostics,
    SimDesign,
    ValidityRateError,
    bahadur_pmf,
    beta_pattern,
    gen_covariates,
    gen_dataset,
    gen_poisson_dataset,
    gen_responses,
    make_stream,
    pn_rule,
)

__version__ = "0.1.0"
