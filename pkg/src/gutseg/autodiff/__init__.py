"""Tape-based reverse-mode autodiff with swappable conv/pool kernels."""

from .engine import Tape, Tensor, backward
from . import kernels, ops

__all__ = ["Tape", "Tensor", "backward", "kernels", "ops"]
