"""Adversarial 3-player steganography: Alice embeds, Bob extracts, Eve detects."""

from .agents import AgentConfig, AliceBob, Eve
from .config import TrainConfig, load_config, parse_config
from .errors import (CapacityError, CheckpointError, ConfigurationError, CorruptFileError, NonFiniteError,
                     StegoError, UnsupportedFormatError)
from .evaluation import StegoSystem, compute_pe, evaluate_extraction, steganalysis_experiment
from .losses import LossWeights
from .trainer import TrainSession

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "AliceBob", "Eve", "TrainConfig", "load_config", "parse_config", "CapacityError",
    "CheckpointError", "ConfigurationError", "CorruptFileError", "NonFiniteError", "StegoError",
    "UnsupportedFormatError", "StegoSystem", "compute_pe", "evaluate_extraction", "steganalysis_experiment",
    "LossWeights", "TrainSession",
]
