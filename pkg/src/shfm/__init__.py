"""Spatially hierarchical Bayesian factor models for tract-within-city indicator panels."""

from .errors import DegenerateError, InputError, NumericalError, ParseError, ShfmError
from .kernels import CarStructure, Geometry, MaternParams, build_car, build_between_city_correlation, matern_correlation
from .model import HyperPriors, IndicatorPanel, ModelSpec, ParamState, Variant, aggregate_panel
from .sampler import ChainOutput, Fit, McmcConfig, fit, gibbs_sweep, log_posterior
from .predict import posterior_ranks, predict_theta, summarize_index
from .select import compare, criteria_row, crps_gaussian, dic
from .diagnostics import convergence_report, psrf

__version__ = "0.1.0"
