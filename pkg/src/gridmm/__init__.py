"""Regional AC-OPF decomposition with one- and two-level consensus ADMM,
learned warm starts and a deterministic multi-agent runtime."""

from .grid import PowerNetwork, load_fixture, load_network, partition
from .admm import AdmmConfig, admm_iterate, cold_start, warm_start
from .twolevel import two_level_cold_start, two_level_iterate, two_level_warm_start
from .agents import privacy_audit, run_decentralized
from .ml import PredictorBank, predict_warmstart, train_bank

__all__ = [
    "PowerNetwork", "load_fixture", "load_network", "partition",
    "AdmmConfig", "admm_iterate", "cold_start", "warm_start",
    "two_level_cold_start", "two_level_iterate", "two_level_warm_start",
    "privacy_audit", "run_decentralized",
    "PredictorBank", "predict_warmstart", "train_bank",
]
__version__ = "0.1.0"
