"""Policy-gradient training with fixed simplex-ETF action heads, plus collapse diagnostics."""

from .config import TrainConfig, parse_config
from .etf import EtfMatrix, generate_etf
from .experiment import run_experiment, sweep
from .net import PolicyNet

__all__ = ["EtfMatrix", "PolicyNet", "TrainConfig", "generate_etf", "parse_config",
           "run_experiment", "sweep"]
__version__ = "0.1.0"
