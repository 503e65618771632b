"""Depthwise-conv kernels: numba vs. the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also checks the two paths agree to 1e-12 on every shape before timing.
The library picks a path from QUADADAPT_NUMBA (``0`` forces numpy); this
script calls both explicitly so one run compares them.
"""
import argparse
import timeit

import numpy as np

from quadadapt import _kernels as K

SHAPES = [(1, 8, 8, 8, 3), (16, 8, 8, 8, 3), (16, 32, 16, 16, 3), (4, 16, 32, 32, 7)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        print("numba not importable; only the numpy path is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape (B,C,H,W,k)':<22}{'op':<12}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for b, c, h, w, k in SHAPES:
        x = rng.standard_normal((b, c, h, w))
        ker = rng.standard_normal((c, k, k))
        g = rng.standard_normal((b, c, h, w))
        ops = {
            "forward": lambda nb: K.dw_forward(x, ker, use_numba=nb),
            "grad_in": lambda nb: K.dw_grad_input(g, ker, use_numba=nb),
            "grad_k": lambda nb: K.dw_grad_kernel(x, g, k, k, use_numba=nb),
        }
        for name, fn in ops.items():
            ref = fn(False)
            t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
            if K._HAVE_NUMBA:
                fn(True)  # compile outside the timed region
                assert np.allclose(fn(True), ref, rtol=0, atol=1e-12), (name, b, c, h, w, k)
                t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
                print(f"{str((b, c, h, w, k)):<22}{name:<12}{t_np:>10.3f}{t_nb:>10.3f}"
                      f"{t_np / t_nb:>8.1f}x")
            else:
                print(f"{str((b, c, h, w, k)):<22}{name:<12}{t_np:>10.3f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
