"""Fixed-point quantization, frozen-bit intervals and entropy helpers.

Values live in ``[-scale, scale]`` and are quantized on a grid of step
``scale * 2**-n``. Rounding is half-away-from-zero and the integer code is
clamped to ``+-(2**n - 1)``, so ``quantize(x, 0, s) == 0`` for every ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from blip import kernels

MAX_BITS = 62


@dataclass(frozen=True)
class QuantConfig:
    total_bits: int = 20
    range_constant: float = 6.0
    ste_enabled: bool = False

    def __post_init__(self):
        if not 2 <= self.total_bits <= MAX_BITS:
            raise ValueError(f"total_bits must be in [2, {MAX_BITS}], got {self.total_bits}")
        if not self.range_constant > 0:
            raise ValueError("range_constant must be positive")


def layer_scale(range_constant: float, fan_in: int) -> float:
    """Half-width ``C / sqrt(fan_in)`` of a layer's parameter range."""
    return range_constant / math.sqrt(fan_in)


def _round_half_away(x: float) -> float:
    whole = math.trunc(x)
    frac = x - whole
    if abs(frac) >= 0.5:
        whole += 1 if x > 0 else -1
    return float(whole)


def quantize(theta: float, n_bits: int, scale: float) -> float:
    """Quantize one value to ``n_bits`` fractional bits of the range ``[-scale, scale]``."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot quantize non-finite value {theta!r}")
    if not 0 <= n_bits <= MAX_BITS:
        raise ValueError(f"n_bits out of range: {n_bits}")
    if not scale > 0:
        raise ValueError("scale must be positive")
    levels = math.ldexp(1.0, n_bits)
    lim = 1.0 - math.ldexp(1.0, -(n_bits + 1))
    v = min(max(theta / scale, -lim), lim)
    code = _round_half_away(v * levels)
    code = min(max(code, 1.0 - levels), levels - 1.0)
    return scale * code / levels


def quantize_array(theta, bits, scale: float, out=None) -> np.ndarray:
    """Vectorized :func:`quantize` with per-entry bit counts and one scale."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    bits = np.broadcast_to(np.asarray(bits, dtype=np.int8), theta.shape)
    bits = np.ascontiguousarray(bits)
    if not np.isfinite(theta).all():
        raise ValueError("cannot quantize non-finite values")
    if out is None:
        out = np.empty_like(theta)
    kernels.quantize_into(theta.ravel(), bits.ravel(), scale, out.reshape(-1))
    return out


@dataclass(frozen=True)
class FrozenInterval:
    """Clipping interval of radius ``scale * 2**-frozen_bits`` around ``anchor``."""

    anchor: float
    frozen_bits: int
    scale: float
    total_bits: int = 20

    def __post_init__(self):
        if not 0 <= self.frozen_bits <= self.total_bits:
            raise ValueError("frozen_bits must lie in [0, total_bits]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.frozen_bits == 0 and self.anchor != 0.0:
            raise ValueError("anchor must be 0 when no bits are frozen")

    @property
    def radius(self) -> float:
        return self.scale * math.ldexp(1.0, -self.frozen_bits)

    @property
    def bounds(self) -> tuple[float, float]:
        eps = self.scale * math.ldexp(1.0, -self.total_bits)
        lo = max(self.anchor - self.radius, -self.scale)
        hi = min(self.anchor + self.radius - eps, self.scale)
        return lo, hi


def clip_frozen(theta: float, interval: FrozenInterval) -> float:
    lo, hi = interval.bounds
    return min(max(theta, lo), hi)


def preserving_bounds(anchor, bits, scale: float, total_bits: int):
    """Closed interval inside which ``quantize(x, bits, scale) == anchor``.

    This is the ``bits``-bit rounding cell of ``anchor`` shrunk by
    ``scale * 2**-(total_bits + 2)`` on each open side, so ties can never flip
    the code. Cells of extreme codes extend to the range edge, and zero
    frozen bits yield the whole range. Works element-wise on arrays.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.int64)
    # work in units of scale where every edge is an exact dyadic rational, so
    # bounds from different tasks compare exactly after the final multiply
    levels = np.ldexp(1.0, bits)
    code = np.round(anchor / scale * levels)
    eps = math.ldexp(1.0, -(total_bits + 2))
    lo = np.where(code <= 1.0 - levels, -1.0, (code - 0.5) / levels + eps)
    hi = np.where(code >= levels - 1.0, 1.0, (code + 0.5) / levels - eps)
    free = bits == 0
    lo = scale * np.where(free, -1.0, lo)
    hi = scale * np.where(free, 1.0, hi)
    return lo, hi


def discrete_entropy(pmf) -> float:
    """Shannon entropy in bits; zero-probability entries contribute nothing."""
    p = np.asarray(pmf, dtype=np.float64)
    if (p < 0).any():
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def gaussian_entropy_nats(sigma: float) -> float:
    return 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma)


def binned_gaussian_pmf(sigma: float, n_bits: int) -> np.ndarray:
    """Mass of N(0, sigma^2) in each of the ``2**n - 1`` cells of width ``2**-(n-1)``
    centred at ``i / 2**(n-1) - 1``."""
    width = math.ldexp(1.0, -(n_bits - 1))
    centres = np.arange(1, 2**n_bits) * width - 1.0
    edges = np.append(centres - width / 2, centres[-1] + width / 2) / sigma
    # take differences on whichever tail is small to avoid cancellation
    lower_tail = np.diff(ndtr(edges))
    upper_tail = -np.diff(ndtr(-edges))
    return np.where(edges[1:] <= 0, lower_tail, upper_tail)


def lemma1_gap(sigma: float, n_bits: int) -> float:
    """Distance in bits between the binned entropy of N(0, sigma^2) and
    ``h / ln 2 + n_bits - 1``."""
    if n_bits < 8:
        raise ValueError("n_bits must be at least 8")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    edge = 1.0 - math.ldexp(1.0, -n_bits)
    outside = 2.0 * ndtr(-edge / sigma)
    if outside >= 1e-12:
        raise ValueError(f"support escapes range: {outside:.3g} of the mass lies outside")
    pmf = binned_gaussian_pmf(sigma, n_bits)
    pmf = pmf / pmf.sum()
    h_discrete = discrete_entropy(pmf)
    return abs(h_discrete - (gaussian_entropy_nats(sigma) / math.log(2.0) + n_bits - 1))
