"""Benchmark the two 3D convolution backends (numba JIT vs pure numpy).

Usage:
    python3 benchmarks/bench_conv.py [--repeats N]

Runs forward and backward passes at a few representative shapes and
prints per-call wall time for whichever backends are importable. The
numpy backend is always available; the numba backend is skipped when
numba is not installed or NLDENOISE_NO_NUMBA is set.
"""

import argparse
import time

import numpy as np

from nldenoise import kernels

SHAPES = [
    # (c_in, c_out, edge) — tiny-config patch, default-config patch, wide
    (4, 4, 8),
    (16, 16, 16),
    (16, 16, 32),
]


def time_call(fn, *args, repeats=5):
    fn(*args)  # warmup (includes JIT compilation for the numba backend)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = [("numpy", kernels.conv3d_forward_numpy, kernels.conv3d_backward_numpy)]
    if kernels.HAVE_NUMBA:
        backends.append(("numba", kernels.conv3d_forward_numba, kernels.conv3d_backward_numba))
    else:
        print("numba backend unavailable (not installed or NLDENOISE_NO_NUMBA set)")

    rng = np.random.default_rng(0)
    print(f"{'shape':>18}  {'pass':>8}  " + "  ".join(f"{n:>12}" for n, _, _ in backends))
    for c_in, c_out, edge in SHAPES:
        x = rng.normal(size=(c_in, edge, edge, edge)).astype(np.float32)
        w = rng.normal(size=(c_out, c_in, 3, 3, 3)).astype(np.float32)
        b = np.zeros(c_out, dtype=np.float32)
        dout = rng.normal(size=(c_out, edge, edge, edge)).astype(np.float32)
        label = f"{c_in}x{c_out}x{edge}^3"
        fwd = [time_call(f, x, w, b, repeats=args.repeats) for _, f, _ in backends]
        bwd = [time_call(g, x, w, dout, repeats=args.repeats) for _, _, g in backends]
        print(f"{label:>18}  {'forward':>8}  " + "  ".join(f"{t * 1e3:9.2f} ms" for t in fwd))
        print(f"{'':>18}  {'backward':>8}  " + "  ".join(f"{t * 1e3:9.2f} ms" for t in bwd))
    # agreement check so the benchmark doubles as a smoke test
    if kernels.HAVE_NUMBA:
        y_np = kernels.conv3d_forward_numpy(x, w, b)
        y_nb = kernels.conv3d_forward_numba(x, w, b)
        print(f"max |numpy - numba| forward: {np.abs(y_np - y_nb).max():.3g}")


if __name__ == "__main__":
    main()
