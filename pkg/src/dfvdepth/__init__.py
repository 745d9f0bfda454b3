"""Depth-from-focus toolkit built around differential focus volumes."""

from .autodiff import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
