"""Filtering with an initial condition that anticipates the observation noise."""

from ._validation import make_grid
from .corrkernel import (
    CorrelationSpec,
    KernelTable,
    bump_correlation,
    build_kernel_table,
    correlation_from_dict,
    kernel_table,
    lambda_kernel,
    linear_correlation,
    power_correlation,
    radar_correlation,
    ramp_correlation,
    zero_correlation,
)
from .errors import AnticipativeError, ModelError, NumericalError
from .estimators import AnticipativeKalmanBucy, ClassicalKalmanBucy, ParticleFilter, VolterraFilter
from .experiments import RatioReport, ScenarioConfig, convergence_study, emit_report, monte_carlo_ratios
from .kalman import (
    FilterRun,
    anticipative_filter,
    classical_baseline,
    gaussian_conditioning_oracle,
    riccati_integrate,
)
from .models import LinearModel, NonlinearModel, build_augmented, load_model, radar_model, scenario
from .particle import Ensemble, run_particle_filter
from .simulate import PathBundle, sample_bundle, sample_bundles, tilde_n_path
from .stability import solve_are, spectral_margin, stability_report, wasserstein_gaussian
from .volterra import VolterraKernel, VolterraModel, compare_readings, highdim_filter, reduced_filter

__all__ = [
    "anticipative_filter",
    "AnticipativeError",
    "AnticipativeKalmanBucy",
    "build_augmented",
    "build_kernel_table",
    "bump_correlation",
    "classical_baseline",
    "ClassicalKalmanBucy",
    "compare_readings",
    "convergence_study",
    "correlation_from_dict",
    "CorrelationSpec",
    "emit_report",
    "Ensemble",
    "FilterRun",
    "gaussian_conditioning_oracle",
    "highdim_filter",
    "kernel_table",
    "KernelTable",
    "lambda_kernel",
    "linear_correlation",
    "LinearModel",
    "make_grid",
    "load_model",
    "ModelError",
    "monte_carlo_ratios",
    "NonlinearModel",
    "NumericalError",
    "ParticleFilter",
    "PathBundle",
    "power_correlation",
    "radar_correlation",
    "radar_model",
    "ramp_correlation",
    "RatioReport",
    "reduced_filter",
    "riccati_integrate",
    "run_particle_filter",
    "sample_bundle",
    "sample_bundles",
    "scenario",
    "ScenarioConfig",
    "solve_are",
    "spectral_margin",
    "stability_report",
    "tilde_n_path",
    "VolterraFilter",
    "VolterraKernel",
    "VolterraModel",
    "wasserstein_gaussian",
    "zero_correlation",
]

__version__ = "0.1.0"
