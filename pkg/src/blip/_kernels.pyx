"""Compiled per-parameter kernels.

Every routine here has a numpy twin in ``_fallback`` and must agree with it
bit for bit; keep the floating-point operation order identical.
"""

from libc.math cimport isfinite, round as c_round, ldexp


def bounded_step(double[::1] theta, const double[::1] grad, double lr,
                 const double[::1] lo, const double[::1] hi):
    """In place ``theta = min(max(theta - lr * grad, lo), hi)``.

    Returns False (and leaves the remaining entries untouched) when a
    non-finite gradient is met.
    """
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double g, t
    cdef bint ok = True
    if grad.shape[0] != n or lo.shape[0] != n or hi.shape[0] != n:
        raise ValueError("length mismatch")
    with nogil:
        for i in range(n):
            g = grad[i]
            if not isfinite(g):
                ok = False
                break
            t = theta[i] - lr * g
            if t < lo[i]:
                t = lo[i]
            if t > hi[i]:
                t = hi[i]
            theta[i] = t
    return ok


def quantize_into(const double[::1] theta, const signed char[::1] bits,
                  double scale, double[::1] out):
    """Per-entry fixed-point quantization with a shared range ``scale``."""
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef int b
    cdef double levels, lim, v, code
    if bits.shape[0] != n or out.shape[0] != n:
        raise ValueError("length mismatch")
    with nogil:
        for i in range(n):
            b = bits[i]
            levels = ldexp(1.0, b)
            lim = 1.0 - ldexp(1.0, -(b + 1))
            v = theta[i] / scale
            if v < -lim:
                v = -lim
            if v > lim:
                v = lim
            code = c_round(v * levels)
            if code > levels - 1.0:
                code = levels - 1.0
            if code < 1.0 - levels:
                code = 1.0 - levels
            out[i] = scale * code / levels + 0.0  # -0.0 -> 0.0
    return out
