"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R]

The default size is the parameter count of a 784-1200-1200 MLP with five
2-way heads, i.e. what one clipped SGD step touches on split MNIST.
"""

import argparse
import timeit

import numpy as np

from blip import _fallback

try:
    from blip import _kernels
except ImportError:
    _kernels = None


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-0.1, 0.1, n)
    grad = rng.standard_normal(n) * 1e-3
    lo = theta - rng.random(n) * 1e-3
    hi = theta + rng.random(n) * 1e-3
    bits = rng.integers(0, 21, n).astype(np.int8)
    return theta, grad, lo, hi, bits


def bench(impl, n, repeat):
    theta, grad, lo, hi, bits = _inputs(n)
    out = np.empty(n)
    step = min(timeit.repeat(lambda: impl.bounded_step(theta, grad, 0.05, lo, hi), number=1, repeat=repeat))
    quant = min(timeit.repeat(lambda: impl.quantize_into(theta, bits, 0.17, out), number=1, repeat=repeat))
    return step, quant


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--size", type=int, default=784 * 1200 + 1200 + 1200 * 1200 + 1200 + 5 * (1200 * 2 + 2))
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    backends = [("numpy", _fallback)] + ([("cython", _kernels)] if _kernels is not None else [])
    print(f"{args.size} parameters, best of {args.repeat}")
    print(f"{'backend':8s} {'bounded_step ms':>16s} {'quantize ms':>12s}")
    results = {}
    for name, impl in backends:
        results[name] = bench(impl, args.size, args.repeat)
        step, quant = results[name]
        print(f"{name:8s} {step * 1e3:16.2f} {quant * 1e3:12.2f}")
    if len(results) == 2:
        (s0, q0), (s1, q1) = results["numpy"], results["cython"]
        print(f"speedup  {s0 / s1:16.2f}x {q0 / q1:11.2f}x")


if __name__ == "__main__":
    main()
