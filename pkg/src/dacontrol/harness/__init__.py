"""Experiment harness: configs, comparators, regret reports, certification CLI."""
from .comparators import best_linear_comparator, dac_cost_series, linear_cost_series, offline_best_dac
from .config import ConfigError, ExperimentConfig, cost_stream, load_config, parse_config
from .experiment import run_experiment, surrogate_vs_realized
from .verify import verify_suite

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "best_linear_comparator",
    "cost_stream",
    "dac_cost_series",
    "linear_cost_series",
    "load_config",
    "offline_best_dac",
    "parse_config",
    "run_experiment",
    "surrogate_vs_realized",
    "verify_suite",
]
