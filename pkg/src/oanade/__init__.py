"""Order-agnostic deep NADE: one set of weights, a NADE for every variable ordering."""

from .model import MaskContext, ModelConfig, Parameters, init_parameters, zero_parameters
from .numerics import Rng
from .training import TrainConfig, fit, train

__all__ = [
    "MaskContext",
    "ModelConfig",
    "Parameters",
    "Rng",
    "TrainConfig",
    "fit",
    "init_parameters",
    "train",
    "zero_parameters",
]
__version__ = "0.1.0"
