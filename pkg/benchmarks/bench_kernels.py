"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from icono import _fallback

try:
    from icono import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    # relu4_1 maps at 512px input: 512 channels x 64*64 positions
    content = rng.normal(size=(512, 64 * 64))
    style = rng.normal(2.0, 3.0, size=(512, 64 * 64))
    y_true = rng.integers(0, 2, 100_000)
    y_pred = rng.integers(0, 2, 100_000)
    return {
        "channel_stats": lambda m: m.channel_stats(content),
        "adain": lambda m: m.adain(content, style, 1e-5),
        "confusion_counts": lambda m: m.confusion_counts(y_true, y_pred, 2),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<18}{py:>12.3f}{'-':>12}{'-':>10}")
            continue
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{py:>12.3f}{cy:>12.3f}{py / cy:>9.2f}x")


if __name__ == "__main__":
    main()
