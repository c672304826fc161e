"""Compare the numba kernels with their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Checks that both paths agree, then prints best-of-N wall times. The first
numba call (compilation) is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from zsep import _accel
from zsep.denoiser.analytic import mixture_posterior
from zsep.rng import standard_normal, uniform01


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    B, K, D = 512, 10, 512
    x = rng.normal(size=(B, D))
    means = rng.uniform(0, 1, size=(K, D))
    vars_ = rng.uniform(0.01, 0.2, size=(K, D))
    logpi = np.log(np.full(K, 1.0 / K))

    cases = {
        "standard_normal(1e6)": lambda use: standard_normal(12345, 0, 1_000_000, use_numba=use),
        "uniform01(1e6)": lambda use: uniform01(12345, 0, 1_000_000, use_numba=use),
        f"mixture_posterior(B={B},K={K},D={D})": lambda use: mixture_posterior(x, means, vars_, logpi, 0.3,
                                                                               use_numba=use),
    }
    print(f"{'kernel':<40} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}  max|diff|")
    for name, fn in cases.items():
        a, b = fn(False), fn(True)  # warm-up, includes compilation
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(p - q))) for p, q in zip(a, b))
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:<40} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
