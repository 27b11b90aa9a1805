"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 200000]

Both implementations are called directly, so the SIGMAK_NO_NUMBA flag does
not matter here. Outputs are compared before timing.
"""

import argparse
import time

import numpy as np

from sigmak import _kernels


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def stencil_args(points, n=3, seed=1):
    shape = (points,) * n
    N = points**n
    rng = np.random.default_rng(seed)
    strides = np.array([points ** (n - 1 - a) for a in range(n)], dtype=np.int64)
    interior = np.zeros(shape, dtype=bool)
    interior[(slice(1, -1),) * n] = True
    inv_dx = np.full(n, points - 1.0)
    return (
        rng.normal(size=(N, n, n)),
        rng.normal(size=(N, n)),
        rng.normal(size=N),
        np.arange(N, dtype=np.int64),
        strides,
        inv_dx,
        inv_dx**2,
        interior.reshape(N),
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--n", type=int, default=6)
    ap.add_argument("--points", type=int, default=33)
    args = ap.parse_args()

    if not hasattr(_kernels, "_esym_numba"):
        print("numba is not available; only the numpy path can run")
        return

    rng = np.random.default_rng(0)
    lam = rng.normal(size=(args.size, args.n))
    e = _kernels._esym_numpy(lam, args.n)
    cases = [
        ("esym", lambda: _kernels._esym_numpy(lam, args.n), lambda: _kernels._esym_numba(lam, args.n)),
        (
            "newton_diag",
            lambda: _kernels._newton_diag_numpy(lam, e, args.n - 1),
            lambda: _kernels._newton_diag_numba(lam, e, args.n - 1),
        ),
    ]
    st = stencil_args(args.points)
    cases.append(
        ("stencil_coo", lambda: _kernels._stencil_coo_numpy(*st), lambda: _kernels._stencil_coo_numba(*st))
    )

    print(f"{'kernel':<14}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}  max |diff|")
    for name, f_np, f_nb in cases:
        a, b = f_np(), f_nb()
        if isinstance(a, tuple):
            # COO triplets may come in different orders; compare as sparse matrices
            from scipy.sparse import coo_matrix

            N = int(max(a[0].max(), a[1].max())) + 1
            A = coo_matrix((a[2], (a[0], a[1])), shape=(N, N)).tocsr()
            B = coo_matrix((b[2], (b[0], b[1])), shape=(N, N)).tocsr()
            diff = abs(A - B).max()
        else:
            diff = float(np.abs(a - b).max())
        t_np = best_of(f_np, args.repeat)
        t_nb = best_of(f_nb, args.repeat)
        print(f"{name:<14}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}  {diff:.2e}")


if __name__ == "__main__":
    main()
