"""Time the numba loop kernels against their numpy counterparts.

Run with ``python benchmarks/bench_kernels.py``. Both variants are imported
directly, so the DADET_NUMBA flag does not matter here; numba must be installed.
Each row reports the median over repeats after a warm-up call (which also
triggers compilation) and the max abs difference between the two outputs.
"""
import argparse
import time

import numpy as np

from dadet import kernels as k


def _median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def _boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size - 4, (n, 2))
    wh = rng.uniform(2, 24, (n, 2))
    return np.ascontiguousarray(np.concatenate([xy, np.minimum(xy + wh, size)], axis=1))


def cases(rng):
    # batch-8 trunk layer shapes: (N, C, H+2p, W+2p), (O, C, 3, 3), stride
    for name, xs, ws, stride in (
        ("conv stem 64->32", (8, 1, 66, 66), (8, 1, 3, 3), 2),
        ("conv block2 16x16", (8, 16, 18, 18), (16, 16, 3, 3), 1),
        ("conv block3 8x8", (8, 32, 10, 10), (32, 32, 3, 3), 1),
    ):
        xp, w = rng.normal(size=xs), rng.normal(size=ws)
        oh = (xs[2] - 3) // stride + 1
        ow = (xs[3] - 3) // stride + 1
        g = rng.normal(size=(xs[0], ws[0], oh, ow))
        yield (f"{name} fwd", lambda f, a=(xp, w, stride, oh, ow): f(*a),
               k.conv2d_forward_loops, k.conv2d_forward_numpy)
        yield (f"{name} bwd", lambda f, a=(xp, w, g, stride): f(*a)[1],
               k.conv2d_backward_loops, k.conv2d_backward_numpy)
    a, b = _boxes(rng, 240), _boxes(rng, 3)
    yield "iou 240x3", lambda f: f(a, b), k.iou_matrix_loops, k.iou_matrix_numpy
    sorted_boxes = _boxes(rng, 240)
    yield "nms 240", lambda f: f(sorted_boxes, 0.45).astype(float), k.nms_sorted_loops, k.nms_sorted_numpy
    mask = (rng.random((64, 64)) < 0.3).astype(np.uint8)
    boxes = _boxes(rng, 50)
    yield ("box pixel counts 50", lambda f: f(boxes, mask).astype(float),
           k.box_pixel_counts_loops, k.box_pixel_counts_numpy)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not k.USE_NUMBA:
        print("note: DADET_NUMBA=0, the 'numba' column runs the loop code uncompiled")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, call, loops, numpy_fn in cases(np.random.default_rng(args.seed)):
        t_loops = _median_ms(lambda: call(loops), args.repeats)
        t_numpy = _median_ms(lambda: call(numpy_fn), args.repeats)
        diff = float(np.max(np.abs(call(loops) - call(numpy_fn))))
        print(f"{name:28s} {t_loops:10.3f} {t_numpy:10.3f} {t_numpy / t_loops:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
