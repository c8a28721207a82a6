"""Task-routed dynamic networks with single-iteration-multiple-tasks training."""

__version__ = "0.1.0"

from .autodiff import Parameter, Tape, Tensor
from .engine import SIMTConfig, Trainer
from .model import MultiTaskModel
from .network import Backbone, Path, TaskController

__all__ = [
    "Backbone",
    "MultiTaskModel",
    "Parameter",
    "Path",
    "SIMTConfig",
    "TaskController",
    "Tape",
    "Tensor",
    "Trainer",
    "__version__",
]
