"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 256 1024 4096]

Each kernel runs once per backend before timing (this absorbs JIT
compilation), outputs are compared for equality, and the best of
``--repeat`` runs is reported.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from pointcal._accel import HAVE_NUMBA
from pointcal.kernels import BACKENDS


def cases(n: int, rng: np.random.Generator) -> dict[str, tuple]:
    points = rng.normal(size=(n, 3))
    m = max(1, n // 4)
    centroids = np.arange(0, n, n // m)[:m]
    risks, times = rng.normal(size=n), rng.exponential(size=n)
    events = rng.random(n) < 0.3
    return {
        "fps": (points, m, 0),
        "ball_query": (points, centroids, 0.3, 32),
        "knn": (points, centroids, 16),
        "scatter_add_rows": (np.zeros((m, 64)), rng.integers(0, m, n), rng.normal(size=(n, 64))),
        "concordance": (risks, times, events),
    }


def run_once(name: str, fn, args):
    if name == "scatter_add_rows":  # accumulates into its first argument
        args = (args[0].copy(),) + args[1:]
    return fn(*args)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=0)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare against")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'n':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  match")
    for n in args.sizes:
        for name, call_args in cases(n, rng).items():
            timings, outputs = {}, {}
            for backend in ("numpy", "numba"):
                fn = BACKENDS[backend][name]
                outputs[backend] = run_once(name, fn, call_args)
                best = min(timeit.repeat(lambda: run_once(name, fn, call_args), number=1, repeat=args.repeat))
                timings[backend] = 1e3 * best
            print(f"{name:<18}{n:>6}{timings['numpy']:>12.3f}{timings['numba']:>12.3f}"
                  f"{timings['numpy'] / timings['numba']:>9.1f}x  {same(outputs['numpy'], outputs['numba'])}")


if __name__ == "__main__":
    main()
