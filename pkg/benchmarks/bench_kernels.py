"""Wall time of the conv2d kernels: compiled backend vs numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Times forward and backward on cnn-tiny shaped inputs and checks that
both backends agree before timing.
"""

import argparse
import timeit

import numpy as np

from bipprune.kernels import load_backend

SHAPES = {
    "conv1 (64x1x8x8, 8x1x3x3)": ((64, 1, 8, 8), (8, 1, 3, 3)),
    "conv2 (64x8x8x8, 8x8x3x3)": ((64, 8, 8, 8), (8, 8, 3, 3)),
    "wide (16x16x16x16, 16x16x3x3)": ((16, 16, 16, 16), (16, 16, 3, 3)),
}


def bench(backend, x, w, gout, repeat):
    fwd = min(timeit.repeat(lambda: backend.conv2d_forward(x, w, 1), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: backend.conv2d_backward(x, w, gout, 1), number=1,
                            repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = {"numpy": load_backend("numpy")}
    try:
        backends["cython"] = load_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'shape':<32} {'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for name, (xs, ws) in SHAPES.items():
        x, w = rng.standard_normal(xs), rng.standard_normal(ws)
        gout = rng.standard_normal((xs[0], ws[0], xs[2], xs[3]))
        ref = backends["numpy"].conv2d_forward(x, w, 1)
        for label, be in backends.items():
            np.testing.assert_allclose(be.conv2d_forward(x, w, 1), ref, rtol=1e-10, atol=1e-10)
            fwd, bwd = bench(be, x, w, gout, args.repeat)
            print(f"{name:<32} {label:<8} {fwd * 1e3:>11.3f} {bwd * 1e3:>12.3f}")


if __name__ == "__main__":
    main()
