"""Dual-stream text/image language model with dynamic gated fusion."""

__version__ = "0.1.0"

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .errors import DataFormatError, GatefuseError, InvalidArgument, NumericError
from .model import DualStreamModel, count_parameters
from .trainer import Trainer, load_model_from_checkpoint

__all__ = [
    "__version__",
    "DataConfig", "ModelConfig", "RunConfig", "TrainConfig", "load_config",
    "DataFormatError", "GatefuseError", "InvalidArgument", "NumericError",
    "DualStreamModel", "count_parameters",
    "Trainer", "load_model_from_checkpoint",
]
