"""Compare the numba and numpy implementations of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per call for both backends, the speedup, and the
max absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from simdino import _kernels as K


def _time(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(rng):
    A = rng.standard_normal((32, 32))
    spd = A @ A.T + 32 * np.eye(32)
    L = np.linalg.cholesky(spd)
    b = rng.standard_normal((32, 32))
    x = rng.standard_normal(1_000_000)
    g = rng.standard_normal(1_000_000)
    img = rng.random((3, 64, 64))
    Z = rng.standard_normal((2000, 16, 16))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    return [
        ("cholesky 32x32", lambda: K._cholesky_np(spd)[0], lambda: K._cholesky_nb(spd)[0]),
        ("cho_solve 32x32", lambda: K._backward_sub_lt_np(L, K._forward_sub_np(L, b)),
         lambda: K._backward_sub_lt_nb(L, K._forward_sub_nb(L, b))),
        ("gelu 1e6", lambda: K._gelu_np(x), lambda: K._gelu_flat_nb(x)),
        ("gelu_grad 1e6", lambda: K._gelu_grad_np(x, g), lambda: K._gelu_grad_flat_nb(x, g)),
        ("resize 64->32", lambda: K._bilinear_resize_np(img, 32, 32), lambda: K._bilinear_resize_nb(img, 32, 32)),
        ("grad norms 2000x16x16", lambda: K._grad_norms_np(Z, 1.0), lambda: K._grad_norms_nb(Z, 1.0)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba backend disabled (SIMDINO_DISABLE_NUMBA set or numba missing)")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, f_np, f_nb in cases(rng):
        t_np, t_nb = _time(f_np, args.repeat), _time(f_nb, args.repeat)
        diff = float(np.max(np.abs(np.asarray(f_np()) - np.asarray(f_nb()))))
        print(f"{name:<24}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>9.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
