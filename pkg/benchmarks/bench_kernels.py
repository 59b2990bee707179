"""Compare the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 65 129 257] [--repeat 20]

Each kernel is warmed once (JIT compile), then timed with timeit; the
printed speedup is numpy time / numba time.  Results are also checked for
agreement so a fast-but-wrong kernel shows up here too.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pqlab import _kernels as K


def _cases(N, rng):
    u = rng.standard_normal((N, N))
    h = 2.0 / (N - 1)
    flux = rng.standard_normal((N - 1, N - 1, 2))
    kernel = rng.random((15, 15))
    A = rng.standard_normal((N * N, 2, 2))
    H = A + np.swapaxes(A, -1, -2)
    return {
        "cell_gradients": ((u, h), lambda r: r),
        "scatter_cell_flux": ((flux, h), lambda r: r),
        "convolve_valid": ((u, kernel), lambda r: r),
        "sym_eig_extremes": ((H,), lambda r: np.stack(r)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[65, 129, 257])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    if K.numba_impl is None:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'N':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max diff':>12}")
    for N in args.sizes:
        for name, (inputs, norm) in _cases(N, rng).items():
            f_np = getattr(K.numpy_impl, name)
            f_nb = getattr(K.numba_impl, name)
            diff = float(np.max(np.abs(norm(f_np(*inputs)) - norm(f_nb(*inputs)))))
            t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat))
            t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat))
            print(f"{name:<20}{N:>6}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}{diff:>12.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
