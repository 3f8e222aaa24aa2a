"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (numba compiles on first call), then the best
of ``--repeat`` runs is reported for both paths along with the speed-up.
"""
import argparse
import timeit

import numpy as np

from mvalign import kernels


def cases(rng):
    xp = rng.standard_normal((12, 64, 34, 34))
    cols = kernels._im2col_numpy(xp, 3, 3, 1)
    x = rng.standard_normal((12, 64, 32, 32))
    out, arg = kernels._maxpool2_numpy(x)
    img = rng.uniform(0, 1, (3, 256, 256))
    ys, xs = np.mgrid[0:128, 0:128] * 1.7 + 10.0
    boxes = np.column_stack([rng.uniform(0, 200, (2000, 2)), np.zeros((2000, 2))])
    boxes[:, 2:] = boxes[:, :2] + rng.uniform(10, 60, (2000, 2))
    crop = rng.uniform(0, 1, (3, 128, 128))
    cy, cx = rng.integers(0, 128, 68), rng.integers(0, 128, 68)
    return {
        "im2col": (xp, 3, 3, 1),
        "col2im": (cols, xp.shape, 3, 3, 1),
        "maxpool2": (x,),
        "maxpool2_backward": (rng.standard_normal(out.shape), arg),
        "bilinear": (img, xs, ys),
        "nms_sorted": (boxes, 0.5),
        "patches": (crop, cy, cx, 24),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, call_args in cases(rng).items():
        fast, slow = kernels.IMPLEMENTATIONS[name]
        times = []
        for fn in (fast, slow):
            fn(*call_args)
            times.append(min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat)) * 1e3)
        print(f"{name:<20}{times[0]:>12.3f}{times[1]:>12.3f}{times[1] / times[0]:>9.1f}x")


if __name__ == "__main__":
    main()
