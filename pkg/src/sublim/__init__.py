"""Subliminal-learning simulator: quantum and classical models, distillation
protocols, and public-channel susceptibility diagnostics."""
from .base import AUX_LAYOUT, TASK_LAYOUT, LogitLayout, ModelHandle, model_from_config
from .checkpoint import Checkpoint
from .data import LabeledSet, NoiseSpec, PoisonSpec
from .diagnostics import ChiReport, PublicChannelSpec
from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    SublimError,
)
from .nets import MicroCNNModel, MLPModel
from .qsim import QNNModel, QnnConfig
from .training import AdamState, ProtocolConfig

__version__ = "0.1.0"

__all__ = [
    "AUX_LAYOUT", "TASK_LAYOUT", "LogitLayout", "ModelHandle", "model_from_config",
    "Checkpoint", "LabeledSet", "NoiseSpec", "PoisonSpec", "ChiReport", "PublicChannelSpec",
    "ConfigError", "DataError", "NumericalError", "SublimError",
    "MLPModel", "MicroCNNModel", "QNNModel", "QnnConfig", "AdamState", "ProtocolConfig",
]
