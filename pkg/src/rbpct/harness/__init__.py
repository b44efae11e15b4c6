"""Experiment harness: sweeps, config files, self-checks and the CLI."""

from ..metrics import PERFECT_SNR, snr
from .config import ConfigFile, load_config, parse_config_text
from .methods import METHODS, ConfigError, reconstruct
from .sweep import SweepReport, SweepSpec, read_summary, run_sweep

__all__ = [
    "PERFECT_SNR", "snr", "ConfigFile", "load_config", "parse_config_text", "METHODS", "ConfigError",
    "reconstruct", "SweepReport", "SweepSpec", "read_summary", "run_sweep",
]
