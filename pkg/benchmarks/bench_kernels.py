"""Time the compiled kernels against their NumPy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend and the
speedup. Outputs are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from mimic import _kernels_py
from mimic.kernels import compiled_available


def cases(rng):
    n = 64 * 64
    u = rng.uniform(-2, 66, n)
    v = rng.uniform(-2, 66, n)
    z = rng.uniform(0.5, 30, n)
    rgb = rng.random((n, 3))
    pts = rng.normal(size=(2000, 16))
    centers = rng.normal(size=(64, 16))
    poly = np.cumsum(rng.normal(size=(400, 2)), axis=0)
    q = rng.normal(size=(1000, 2)) * 10
    return {
        "splat_zbuffer 64x64 px=2": ("splat_zbuffer", (u, v, z, rgb, 64, 64, 2)),
        "kmeans_assign 2000x64 d=16": ("kmeans_assign", (pts, centers)),
        "polyline_distance 400 seg x 1000 pts": ("polyline_distance", (poly, q)),
    }


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    from mimic import _kernels
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for label, (name, argv) in cases(rng).items():
        py, cy = getattr(_kernels_py, name), getattr(_kernels, name)
        if not agree(py(*argv), cy(*argv)):
            raise SystemExit(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: py(*argv), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: cy(*argv), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:40s} {t_py:10.2f} {t_cy:12.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
