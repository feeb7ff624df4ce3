"""Compare the compiled and NumPy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel
is timed on identical inputs for every available backend, outputs are
checked for agreement, and a small table of median times is printed.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from spatvim.kernels import backends


def _spd(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


def _cases(rng):
    n = 300
    P = _spd(rng, n)
    rows = rng.permutation(n).astype(np.int64)
    xs = np.sort(rng.normal(size=n))
    g = rng.normal(size=n)
    B = 0.05 * rng.normal(size=(8, n))
    yield "split_scan n=300", "split_scan", (rows, xs, g, P, B, 5)

    k = 255
    feature = np.full(k, -1, dtype=np.int64)
    left = np.full(k, -1, dtype=np.int64)
    right = np.full(k, -1, dtype=np.int64)
    threshold = np.zeros(k)
    for node in range(127):
        feature[node] = node % 5
        left[node], right[node] = 2 * node + 1, 2 * node + 2
        threshold[node] = rng.normal()
    value = rng.normal(size=k)
    X = rng.normal(size=(20_000, 5))
    yield "tree_predict 20000 rows depth 7", "tree_predict", (X, feature, threshold, left, right, value)

    A = np.ascontiguousarray(rng.normal(size=(400, 400)))
    R = np.ascontiguousarray(rng.normal(size=(400, 3)))
    yield "loo_apply n=400 finite", "loo_apply", (A, R)
    Rn = R.copy()
    Rn[::7, 0] = np.nan
    yield "loo_apply n=400 with NaN", "loo_apply", (A, Rn)


def _time(fn, args, repeat):
    out = fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def _agree(a, b):
    if isinstance(a, tuple):  # split_scan returns (gain, position)
        return a[1] == b[1] and bool(np.isclose(a[0], b[0], rtol=1e-10))
    return bool(np.allclose(a, b, rtol=1e-10, atol=1e-12, equal_nan=True))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    impls = backends()
    names = sorted(impls)
    rng = np.random.default_rng(args.seed)
    print(f"{'case':34s}" + "".join(f"{n:>14s}" for n in names) + f"{'speedup':>10s}")
    ok = True
    for label, kernel, inputs in _cases(rng):
        res = {n: _time(getattr(impls[n], kernel), inputs, args.repeat) for n in names}
        ref = res[names[0]][1]
        for n in names[1:]:
            ok &= _agree(ref, res[n][1])
        speed = (f"{res['python'][0] / res['cython'][0]:9.1f}x" if "cython" in res else "       n/a")
        print(f"{label:34s}" + "".join(f"{res[n][0] * 1e3:12.3f}ms" for n in names) + speed)
    print("backends agree" if ok else "BACKENDS DISAGREE")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
