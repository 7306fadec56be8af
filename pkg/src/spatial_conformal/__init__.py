"""Spatial conformal prediction over Kriging residuals.

Global (GSCP), local (LSCP) and kernel-smoothed local (sLSCP) conformal
prediction sets with an exact step-function plausibility contour, plus a
scenario simulator, variogram fitting and a leave-one-out evaluation harness.
"""

from .conformal import (
    ABSOLUTE_RESIDUAL,
    SQUARED_RESIDUAL,
    BreakpointError,
    KernelWeights,
    NonConformity,
    PlausibilityContour,
    PredictionSet,
    SampledContour,
    choose_M,
    conformal_threshold,
    grid_scan_contour,
    gscp_contour,
    gscp_interval,
    kernel_weights,
    lscp_contour,
    lscp_interval,
    quadratic_breakpoints,
    quadratic_coefficients,
    slscp_contour,
    slscp_interval,
    user_measure,
)
from .covariance import (
    DegenerateCovarianceError,
    MaternParams,
    covariance_matrix,
    matern_correlation,
    matern_covariance,
    precision_matrix,
)
from .evaluate import (
    EvalReport,
    MethodConfig,
    interval_score,
    loo_evaluate,
    run_replicates,
    select_bandwidth,
    sensitivity_sweep,
)
from .ingest import IngestError, IngestReport, load_csv, write_csv
from .kriging import LooPrediction, SpatialDataset, loo_predictions, predict_at
from .simulate import ScenarioSpec, generate_scenario, sample_gp
from .variogram import EmpiricalVariogram, empirical_variogram, estimate_params, fit_matern

__all__ = [name for name in dir() if not name.startswith("_")]
