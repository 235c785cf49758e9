"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N wall time per kernel and backend, the speedup, and the
max abs difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from lfsr import _pykernels

try:
    from lfsr import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.normal(size=(8, 16, 66, 66))  # a 64x64 batch with 'same' padding for 3x3
    cols = _pykernels.im2col(x, 3, 3, 1, 64, 64)
    img = rng.normal(size=(64, 64))
    padded = np.pad(img, 3 + 10, mode="reflect")
    return {
        "im2col 8x16x64x64 k3": lambda k: k.im2col(x, 3, 3, 1, 64, 64),
        "col2im 8x16x64x64 k3": lambda k: k.col2im(cols, 8, 16, 66, 66, 3, 3, 1, 64, 64),
        "nlm 64x64 p7 s21": lambda k: k.nlm(padded, 64, 64, 3, 10, 0.1, 0.05),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max diff':>9}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<24} {t_py:>10.2f} {'n/a':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(_pykernels)) - np.asarray(fn(_ckernels)))))
        print(f"{name:<24} {t_py:>10.2f} {t_c:>10.2f} {t_py / t_c:>7.2f}x {diff:>9.1e}")


if __name__ == "__main__":
    main()
