"""Desk-scale instrumentation for studying fine-tuning of convolutional nets."""

from ftscope.tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "__version__"]
