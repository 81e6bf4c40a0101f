from .layers import (
    DTYPE,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LeakyRelu,
    Relu,
    Reshape,
    Sequential,
    Sigmoid,
    Tanh,
    Upsample2x,
)
from .optim import Adam

__all__ = [
    "DTYPE", "Adam", "Conv2d", "Dense", "Dropout", "Flatten", "Layer",
    "LeakyRelu", "Relu", "Reshape", "Sequential", "Sigmoid", "Tanh", "Upsample2x",
]
