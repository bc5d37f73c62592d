"""Coherent probabilistic forecasts for tree-structured time series."""

from .errors import ConfigError, DataError, HierarchyError, HierflowError, NumericError
from .hierarchy import HierarchyTree, PanelSeries, aggregation_matrix, build_tree, coherency_error, structure_matrix
from .metrics import ScoreReport, crps, crps_matrix
from .pipeline import Checkpoint, ModelConfig, TrainConfig, baseline_forecast, forecast, train
from .reconcile import ForecastEnsemble, hier_e2e_projection, mint_projection, ols_projection, reconcile

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DataError",
    "ForecastEnsemble",
    "HierarchyError",
    "HierarchyTree",
    "HierflowError",
    "ModelConfig",
    "NumericError",
    "PanelSeries",
    "ScoreReport",
    "TrainConfig",
    "aggregation_matrix",
    "baseline_forecast",
    "build_tree",
    "coherency_error",
    "crps",
    "crps_matrix",
    "forecast",
    "hier_e2e_projection",
    "mint_projection",
    "ols_projection",
    "reconcile",
    "structure_matrix",
    "train",
]
