"""Numpy implementations of the per-parameter kernels.

Used when the compiled extension is unavailable or ``BLIP_KERNELS=numpy``.
Operation order mirrors ``_kernels.pyx`` so both give identical bits.
"""

import numpy as np


def bounded_step(theta, grad, lr, lo, hi):
    if not (len(grad) == len(theta) == len(lo) == len(hi)):
        raise ValueError("length mismatch")
    if not np.isfinite(grad).all():
        return False
    np.subtract(theta, lr * grad, out=theta)
    np.maximum(theta, lo, out=theta)
    np.minimum(theta, hi, out=theta)
    return True


def round_half_away(x):
    whole = np.trunc(x)
    frac = x - whole  # exact
    return whole + np.sign(x) * (np.abs(frac) >= 0.5)


def quantize_into(theta, bits, scale, out):
    if not (len(bits) == len(theta) == len(out)):
        raise ValueError("length mismatch")
    b = np.asarray(bits, dtype=np.int64)
    levels = np.ldexp(1.0, b)
    lim = 1.0 - np.ldexp(1.0, -(b + 1))
    v = np.clip(theta / scale, -lim, lim)
    code = round_half_away(v * levels)
    code = np.clip(code, 1.0 - levels, levels - 1.0)
    out[...] = scale * code / levels + 0.0  # -0.0 -> 0.0
    return out
