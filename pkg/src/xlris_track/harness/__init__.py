"""Config loading, staged pipeline execution and report emission."""

from .config import STAGES, ConfigError, ExperimentConfig, config_from_dict, load_config, load_profile
from .pipeline import Pipeline, RunLockedError, StageFailure, run_pipeline
from .report import RunReport, read_loss_curves, read_mse_csv

__all__ = [
    "STAGES", "ConfigError", "ExperimentConfig", "Pipeline", "RunLockedError", "RunReport",
    "StageFailure", "config_from_dict", "load_config", "load_profile", "read_loss_curves",
    "read_mse_csv", "run_pipeline",
]
