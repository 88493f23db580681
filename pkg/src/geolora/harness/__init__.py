"""Experiment runner, verification suites and command-line entry point."""

from .checks import run_checks
from .config import ExperimentConfig, config_from_dict, load_config
from .runner import run_comparison, run_experiment
