"""Experiment orchestration: configs, seeded runs, reports, sweeps and plots."""

from .config import MODES, ConfigError, RunConfig, load_config
from .experiment import run_experiment, run_mode, sweep
from .plots import emit_plots
from .reports import ReportError, load_report, save_report

__all__ = [
    "MODES",
    "ConfigError",
    "RunConfig",
    "load_config",
    "run_experiment",
    "run_mode",
    "sweep",
    "emit_plots",
    "ReportError",
    "load_report",
    "save_report",
]
