"""Minimal reverse-mode autodiff, layers and the model zoo."""
from .functional import (ShapeError, batchnorm2d, conv2d, flatten, global_avg_pool, linear, log_softmax,
                         maxpool2d, pcen, relu, softmax, softmax_cross_entropy)
from .layers import (BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, Module, Parameter,
                     PCENFrontend, ReLU, ResidualBlock, Sequential)
from .models import ARCHITECTURES, Model, ModelSpec, build_model, count_parameters, forward
from .tensor import GradError, Tensor, backward, no_grad

__all__ = [
    "ShapeError", "batchnorm2d", "conv2d", "flatten", "global_avg_pool", "linear", "log_softmax",
    "maxpool2d", "pcen", "relu", "softmax", "softmax_cross_entropy",
    "BatchNorm2d", "Conv2d", "Flatten", "GlobalAvgPool", "Linear", "MaxPool2d", "Module", "Parameter",
    "PCENFrontend", "ReLU", "ResidualBlock", "Sequential",
    "ARCHITECTURES", "Model", "ModelSpec", "build_model", "count_parameters", "forward",
    "GradError", "Tensor", "backward", "no_grad",
]
