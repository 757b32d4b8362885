"""Treatment-effect-on-the-treated estimation for recurrent-event panels.

Estimates time-varying treatment effects from longitudinal event-count data
under time-varying confounding: covariate trajectories that the treated
would have followed without treatment are forecast with a lag-1 vector
autoregression, an additive event-rate regression is solved interval by
interval, and the forecast error is compensated by an explicit Gram-matrix
correction. Includes the cohort simulator and the Monte-Carlo benchmark
harness used to compare the corrected and uncorrected estimators.
"""

from .additive import (CoefficientPaths, FallbackPolicy, cumulative_effects,
                       empirical_risk, fit, fit_debiased, solve_interval)
from .benchmark import (BenchmarkResult, TruthCurve, mise, monte_carlo_truth,
                        run_benchmark, wilcoxon_signed_rank)
from .errors import AttkitError, ConfigError, DataError, NumericalError
from .panel import (CovariateSource, PanelDataset, RegressorVector,
                    SubjectRecord, TimeGrid, ValidationReport,
                    assemble_regressor, concat_panels, load_panel,
                    validate_panel, write_panel)
from .simulate import (IntensitySpec, SimParams, draw_baseline, draw_treatment,
                       preset, simulate_cohort, step_covariates,
                       thinning_sample)
from .varmodel import (ErrorCovariance, ForecastPath, VarModel,
                       build_design_matrix, error_covariance,
                       error_covariance_from, fit_var, forecast_all,
                       forecast_counterfactuals, load_var_model,
                       save_var_model)

__version__ = "0.1.0"

__all__ = [
    "AttkitError", "BenchmarkResult", "CoefficientPaths", "ConfigError",
    "CovariateSource", "DataError", "ErrorCovariance", "FallbackPolicy",
    "ForecastPath", "IntensitySpec", "NumericalError", "PanelDataset",
    "RegressorVector", "SimParams", "SubjectRecord", "TimeGrid", "TruthCurve",
    "ValidationReport", "VarModel", "assemble_regressor",
    "build_design_matrix", "concat_panels", "cumulative_effects",
    "draw_baseline", "draw_treatment", "empirical_risk", "error_covariance",
    "error_covariance_from", "fit", "fit_debiased", "fit_var", "forecast_all",
    "forecast_counterfactuals", "load_panel", "load_var_model", "mise",
    "monte_carlo_truth", "preset", "run_benchmark", "save_var_model",
    "simulate_cohort", "solve_interval", "step_covariates", "thinning_sample",
    "validate_panel", "wilcoxon_signed_rank", "write_panel",
]
