"""Small differentiable-layer engine with hand-written backward passes."""
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    BatchNorm,
    Conv2d,
    Deconv2d,
    Dense,
    Flatten,
    Layer,
    LeakyReLU,
    MaxPool2d,
    ReLU,
    Reshape,
    Sigmoid,
    Softplus,
)
from .losses import softmax, softmax_xent
from .network import Sequential
from .optim import Adam, NonFiniteGradientError

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Deconv2d", "Dense", "Flatten", "Layer", "LeakyReLU",
    "MaxPool2d", "NonFiniteGradientError", "ReLU", "Reshape", "Sequential", "Sigmoid",
    "Softplus", "load_checkpoint", "save_checkpoint", "softmax", "softmax_xent",
]
