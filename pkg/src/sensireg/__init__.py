"""Sensitivity-regularized robust training with an L2 attack evaluation harness."""

from .tensor import Tensor, backward, no_grad, sample_sphere
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    Relu,
    forward,
    init_parameters,
    load_model,
    predict_labels,
    save_model,
)

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "sample_sphere",
    "Conv2D",
    "Dense",
    "Flatten",
    "Model",
    "Relu",
    "forward",
    "init_parameters",
    "load_model",
    "predict_labels",
    "save_model",
]

__version__ = "0.1.0"
