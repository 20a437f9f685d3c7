"""Individual-level counterfactual outcome estimation under rank preservation.

The core object is a convex, piecewise-linear surrogate of the query's ideal
objective; its exact minimizer is the rank-matched counterfactual outcome.
Everything else (simulators, quantile-regression baselines, metrics, the
experiment harness and CLI) exists to exercise and evaluate that estimator.
"""

from .baselines import (
    BilevelModel,
    FourStepModel,
    QuantileModel,
    TauGrid,
    bilevel_estimate,
    check_loss,
    fit_quantile,
    fit_quantile_grid,
    fourstep_estimate,
)
from .dataset import (
    CsvSchema,
    Evidence,
    ObservationalDataset,
    PotentialOutcomeTable,
    consistency_check,
    load_csv,
    standardize_covariates,
    write_csv,
)
from .errors import (
    AlignmentError,
    ConfigurationWarning,
    CoverageError,
    CoverageWarning,
    DegenerateInputError,
    ParseError,
    RankcfError,
    SchemaError,
    SeparationWarning,
    ValidationError,
)
from .estimator import (
    CounterfactualEstimate,
    LossProfile,
    build_profile,
    build_profile_continuous,
    build_profile_weighted,
    estimate_counterfactual,
    estimate_units,
    ideal_loss_population,
    minimize_profile,
    population_loss_derivative,
    population_minimizer,
    select_bandwidth,
)
from .harness import ExperimentPlan, ExperimentResult, PropensityPlan, run_experiment, sweep
from .kernels import EPANECHNIKOV, GAUSSIAN, KernelSpec, kernel_value, scaled_weight, weight_row
from .metrics import ItePredictions, ate_error, att_error, pehe, policy_risk
from .propensity import (
    PropensityModel,
    PropensityOverride,
    fit_logistic,
    override_propensity,
    predict,
    sigmoid,
)
from .rank import RankReport, binned_kendall, kendall, sign3
from .simulator import (
    GaussianConditionalLaws,
    GroundTruth,
    SimConfig,
    analytic_laws,
    calibrate_beta,
    simulate,
)

__version__ = "0.1.0"
