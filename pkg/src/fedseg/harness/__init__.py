"""Experiment configuration, baselines, model selection, reporting, checkpoints and the CLI."""
from .baselines import EarlyStopping, centralized_modes, train_centralized, train_local_baselines
from .checkpoint import CheckpointError, load_checkpoint, load_into_model, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .experiment import run_comparison, run_experiment, run_strategy, run_sweep
from .report import Report, load_report
from .selection import global_validation_score, select_winner

__all__ = [
    "CheckpointError", "ConfigError", "EarlyStopping", "ExperimentConfig", "Report",
    "centralized_modes", "global_validation_score", "load_checkpoint", "load_into_model", "load_report",
    "run_comparison", "run_experiment", "run_strategy", "run_sweep", "save_checkpoint", "select_winner",
    "train_centralized", "train_local_baselines",
]
