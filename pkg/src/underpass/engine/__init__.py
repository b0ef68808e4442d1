"""Minimal deterministic tensor engine with reverse-mode autodiff."""

from .functional import cross_entropy, l1, mse
from .layers import (
    Conv2d,
    Dense,
    Dropout,
    InstanceNorm,
    LayerKind,
    MaxPool2x2,
    ReLU,
    ResidualBlock,
    Sequential,
    Softmax,
    Tanh,
    TransposeConv2d,
    forward,
    output_shape,
    param_specs,
)
from .optim import Adam, MissingGradientError
from .tensor import GraphError, ShapeError, Tensor, concat, no_grad

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "Dropout",
    "GraphError",
    "InstanceNorm",
    "LayerKind",
    "MaxPool2x2",
    "MissingGradientError",
    "ReLU",
    "ResidualBlock",
    "Sequential",
    "ShapeError",
    "Softmax",
    "Tanh",
    "Tensor",
    "TransposeConv2d",
    "concat",
    "cross_entropy",
    "forward",
    "l1",
    "mse",
    "no_grad",
    "output_shape",
    "param_specs",
]
