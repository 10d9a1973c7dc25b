"""Time the numpy and numba backends of every hot kernel on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is checked for bitwise agreement between backends before timing.
The numba column excludes compilation (one warm-up call per kernel).
"""
import argparse
import timeit

import numpy as np

from proxconnect import kernels


def cases(rng):
    x = rng.standard_normal((64, 8, 14, 14))
    cols = kernels.im2col_numpy(x, 3, 3, 1, 1)
    pooled, idx = kernels.maxpool_forward_numpy(x, 2)
    signs = rng.standard_normal(1_000_000)
    packed = kernels.pack_signs_numpy(signs)
    acc = rng.integers(-400, 400, size=(64, 16, 14, 14)).astype(np.float64)
    return {
        "im2col": (x, 3, 3, 1, 1),
        "col2im": (cols, x.shape, 3, 3, 1, 1),
        "maxpool_forward": (x, 2),
        "maxpool_backward": (rng.standard_normal(pooled.shape), idx, x.shape, 2),
        "pack_signs": (signs,),
        "unpack_signs": (packed, signs.size),
        "wrap_accumulator": (acc, 8),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, call in cases(rng).items():
        f_np = kernels.BACKENDS["numpy"][name]
        f_nb = kernels.BACKENDS["numba"][name]
        identical = same(f_np(*call), f_nb(*call))  # also warms up numba
        t_np = min(timeit.repeat(lambda: f_np(*call), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*call), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>9.2f}  {identical}")


if __name__ == "__main__":
    main()
