"""Continual learning by freezing the leading bits of quantized parameters."""

from blip.kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
