"""Backend selection for the per-parameter hot loops.

The compiled extension is used when it imports; ``BLIP_KERNELS=numpy``
forces the pure-Python fallback.
"""

import os

from blip import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("BLIP_KERNELS", "").lower() != "numpy":
    try:
        from blip import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def bounded_step(theta, grad, lr, lo, hi):
    """``theta <- clip(theta - lr * grad, lo, hi)`` in place; False on a non-finite grad."""
    return _impl.bounded_step(theta, grad, float(lr), lo, hi)


def quantize_into(theta, bits, scale, out):
    return _impl.quantize_into(theta, bits, float(scale), out)
