"""Time each hot kernel on its numba and pure-numpy paths.

    python benchmarks/bench_kernels.py [--repeat 5]

Numba compile time is excluded by a warm-up call. Results print as a table
of best-of-``repeat`` wall times.
"""
import argparse
import timeit

import numpy as np

from mojito import _kernels as K


def cases(rng):
    ids = rng.integers(0, 5_000, size=200_000)
    rows = rng.normal(size=(200_000, 32))
    yield ("scatter_add_rows 200k x 32 -> 5k",
           lambda: K.scatter_add_rows_numpy(np.zeros((5_000, 32)), ids, rows),
           lambda: K.scatter_add_rows_numba(np.zeros((5_000, 32)), ids, rows))

    users = rng.integers(0, 6_000, size=1_000_000)
    items = (rng.zipf(1.3, size=1_000_000) % 4_000).astype(np.int64)
    yield ("kcore_mask 1M events, k=(10,5)",
           lambda: K.kcore_mask_numpy(users, items, 6_000, 4_000, 10, 5),
           lambda: K.kcore_mask_numba(users, items, 6_000, 4_000, 10, 5))

    scores = rng.normal(size=(6_000, 1_001))
    cand = np.tile(np.arange(1, 1_002), (6_000, 1))
    yield ("target_ranks 6k users x 1001 cands",
           lambda: K.target_ranks_numpy(scores, cand),
           lambda: K.target_ranks_numba(scores, cand))


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, np_fn, nb_fn in cases(rng):
        t_np = best(np_fn, args.repeat)
        if K.HAVE_NUMBA:
            nb_fn()  # compile
            t_nb = best(nb_fn, args.repeat)
            print(f"{name:<38}{t_np * 1e3:>12.1f}{t_nb * 1e3:>12.1f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<38}{t_np * 1e3:>12.1f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
