"""Emulate CMSIS-NN inference traces and recover architectures from them."""

from .model import Architecture, ConvSpec, DenseSpec, MaxPoolSpec, ActivationSpec, TensorShape
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ConvSpec", "DenseSpec", "MaxPoolSpec", "ActivationSpec", "TensorShape",
    "BACKEND", "__version__",
]
