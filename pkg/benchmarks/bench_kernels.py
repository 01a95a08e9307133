"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel and shape: median seconds per backend, speedup,
and whether the outputs are bit-identical.
"""
import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from intriuap import kernels

CASES = [
    # (name, N, C, H, W, k, stride)
    ("mnist-conv1", 32, 1, 30, 30, 3, 1),
    ("mnist-conv2", 32, 16, 16, 16, 3, 1),
    ("wide", 8, 32, 34, 34, 3, 1),
]


def _ops(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    ph, pw = h // 2, w // 2
    g = np.ones((n, c * k * k, oh * ow), dtype=x.dtype)
    pg = np.ones((n, c, ph, pw), dtype=x.dtype)
    return {
        "im2col": lambda b: b.im2col(x, k, k, s, s),
        "col2im": lambda b: b.col2im(g, c, h, w, k, k, s, s),
        "maxpool_fwd": lambda b: b.maxpool_forward(x, 2, 2, 2, 2),
        "maxpool_bwd": lambda b: b.maxpool_backward(pg, b.maxpool_forward(x, 2, 2, 2, 2)[1], h, w),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(p, q) for p, q in zip(a, b))
    return a.shape == b.shape and np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        print("compiled backend not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':<14}{'kernel':<13}{'python s':>11}{'cython s':>11}{'speedup':>9}  identical")
    with threadpool_limits(1):
        for name, n, c, h, w, k, s in CASES:
            x = rng.standard_normal((n, c, h, w))
            for op, fn in _ops(x, k, s).items():
                tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
                tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
                print(f"{name:<14}{op:<13}{tp:>11.5f}{tc:>11.5f}{tp / tc:>8.2f}x  {_same(fn(py), fn(cy))}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
