"""Time the compiled and vectorized convolution paths against each other.

Runs the forward and backward kernels on pipeline-representative shapes and
reports best-of-N wall times plus the largest elementwise disagreement.
The compiled path is skipped (with a notice) when numba is unavailable or
disabled via IBANET_DISABLE_NUMBA=1.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--scale desk|full]
"""

import argparse
import time

import numpy as np

from ibanet import kernels as K

# (label, batch, c_in, c_out, height, width, kernel, stride, pad)
SHAPES = {
    "desk": [
        ("layer1", 128, 1, 4, 3, 200, 3, 2, 1),
        ("layer2", 128, 4, 8, 3, 100, 3, 2, 1),
        ("short-view", 128, 4, 8, 3, 25, 3, 2, 1),
    ],
    "full": [
        ("layer1", 64, 1, 8, 36, 200, 5, 2, 2),
        ("layer2", 64, 8, 16, 36, 100, 5, 2, 2),
        ("layer3", 64, 16, 32, 36, 50, 5, 2, 2),
    ],
}


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(label, b, c_in, c_out, h, w, k, stride, pad, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, c_in, h, w))
    weights = rng.standard_normal((c_out, c_in, k))
    w_out = K.conv_out_width(w, k, stride, pad)
    g = rng.standard_normal((b, c_out, h, w_out))

    rows = {}
    y_np = K.conv_forward_numpy(x, weights, stride, pad)
    rows["numpy"] = (
        best_of(lambda: K.conv_forward_numpy(x, weights, stride, pad), repeats),
        best_of(lambda: K.conv_backward_numpy(x, weights, g, stride, pad), repeats),
    )
    gap = float("nan")
    if K.HAS_NUMBA:
        y_nb = K.conv_forward_numba(x, weights, stride, pad)  # warm-up compile
        K.conv_backward_numba(x, weights, g, stride, pad)
        rows["numba"] = (
            best_of(lambda: K.conv_forward_numba(x, weights, stride, pad), repeats),
            best_of(lambda: K.conv_backward_numba(x, weights, g, stride, pad), repeats),
        )
        gap = float(np.abs(y_np - y_nb).max())

    print(f"\n{label}: x=({b},{c_in},{h},{w}) w=({c_out},{c_in},{k}) "
          f"stride={stride} pad={pad}")
    for name, (fwd, bwd) in rows.items():
        print(f"  {name:<6} forward {fwd*1e3:8.2f} ms   backward {bwd*1e3:8.2f} ms")
    if K.HAS_NUMBA:
        nb_f, nb_b = rows["numba"]
        np_f, np_b = rows["numpy"]
        print(f"  speedup forward {np_f/nb_f:5.2f}x   backward {np_b/nb_b:5.2f}x"
              f"   max forward gap {gap:.2e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--scale", choices=sorted(SHAPES), default="desk")
    args = parser.parse_args()

    print(f"active backend: {K.BACKEND}"
          + ("" if K.HAS_NUMBA else "  (compiled path unavailable, timing numpy only)"))
    for case in SHAPES[args.scale]:
        bench_case(*case, repeats=args.repeats)


if __name__ == "__main__":
    main()
