"""Timing comparison between the compiled and pure-Python scalar kernels.

Run with: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from latentsde import _kernels
from latentsde._kernels import _fallback

try:
    from latentsde._kernels import _native
except ImportError:
    _native = None


def timeit(fn, *args, repeats=20):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    print(f"selected backend: {_kernels.BACKEND}")
    if _native is None:
        print("compiled backend unavailable, nothing to compare")
        return

    rng = np.random.default_rng(0)
    n = 50_000
    eps = rng.standard_normal(n)
    returns, _ = _fallback.garch_simulate(1e-6, 0.08, 0.9, 5e-5, eps)
    returns = np.asarray(returns)

    cases = [
        ("garch_loglik_grad", (returns, 1e-6, 0.08, 0.9, 5e-5)),
        ("garch_sigma2_path", (returns, 1e-6, 0.08, 0.9, 5e-5)),
        ("garch_simulate", (1e-6, 0.08, 0.9, 5e-5, eps)),
        ("vasicek_path", (0.05, 100.0, 0.3, 99.0, 1.0, eps)),
    ]

    print(f"{'kernel':<20}{'python (ms)':>14}{'native (ms)':>14}{'speedup':>10}")
    for name, args in cases:
        t_py = timeit(getattr(_fallback, name), *args)
        t_nat = timeit(getattr(_native, name), *args)
        print(f"{name:<20}{t_py * 1e3:>14.3f}{t_nat * 1e3:>14.3f}"
              f"{t_py / t_nat:>9.1f}x")


if __name__ == "__main__":
    main()
