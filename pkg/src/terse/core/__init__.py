"""Dense-array layers, losses and optimizers with hand-written gradients."""
from .init import init_network, xavier_uniform
from .layers import (BatchNorm, Conv2d, Dropout, Flatten, InstanceNorm2d,
                     LeakyReLU, Linear, MaxPool2d, Module, Param, ReLU,
                     Sequential, ShapeError)
from .losses import floored_log, sigmoid, softmax, softmax_cross_entropy
from .optim import SGD, Adam

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Dropout", "Flatten", "InstanceNorm2d",
    "LeakyReLU", "Linear", "MaxPool2d", "Module", "Param", "ReLU", "SGD",
    "Sequential", "ShapeError", "floored_log", "init_network", "sigmoid",
    "softmax", "softmax_cross_entropy", "xavier_uniform",
]
