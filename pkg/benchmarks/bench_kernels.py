"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--d 100]

Prints one line per kernel with the best-of-``repeat`` time of each path
and the speedup, after checking that both paths agree. The numba path is
compiled (and cached) before timing.
"""

import argparse
import timeit

import numpy as np

from sfn_opt import _kernels as K


def cases(d, rng):
    w = rng.standard_normal(d)
    V = rng.standard_normal((d, 20))
    n, m, fd = 64, 16, min(d, 50)
    A = rng.standard_normal((n, m, fd))
    b = rng.standard_normal((n, m))
    idx = np.arange(0, n, 2)
    wf = rng.standard_normal(fd)
    Vf = rng.standard_normal((fd, 20))
    return {
        "michalewicz_value": (w,),
        "michalewicz_grad": (w,),
        "michalewicz_hess_diag": (w,),
        "rosenbrock_value": (w,),
        "rosenbrock_grad": (w,),
        "rosenbrock_hessmat": (w, V),
        "finite_sum_grad": (A, b, idx, wf),
        "finite_sum_per_sample_grads": (A, b, idx, wf),
        "finite_sum_hessmat": (A, idx, Vf),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)

    if not K.NUMBA_KERNELS:
        print("numba is not available; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'numpy [us]':>12s} {'numba [us]':>12s} {'speedup':>8s}")
    for name, argv_ in cases(args.d, rng).items():
        f_np, f_nb = K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]
        np.testing.assert_allclose(f_nb(*argv_), f_np(*argv_), rtol=1e-9, atol=1e-12)
        t_np = min(timeit.repeat(lambda: f_np(*argv_), number=args.number, repeat=args.repeat)) / args.number
        t_nb = min(timeit.repeat(lambda: f_nb(*argv_), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:30s} {t_np * 1e6:12.2f} {t_nb * 1e6:12.2f} {t_np / t_nb:8.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
