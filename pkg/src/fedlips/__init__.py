"""Deterministic desk-scale federated learning with transient sparsity."""

from .config import ExperimentConfig, parse_config, load_config
from .fedcore import run_experiment, setup_experiment
from .metrics import MetricsLog

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "MetricsLog",
    "load_config",
    "parse_config",
    "run_experiment",
    "setup_experiment",
    "__version__",
]
