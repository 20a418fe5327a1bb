"""Wall-clock comparison of the numba and numpy kernel paths.

Shapes follow the standard benchmark: a 128-row batch against a 500-row
memory bank, and ranking / k-occurrence over 1000 images x 5000 captions.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from hubvse import _accel, kernels


def cases(rng):
    q = rng.normal(size=(128, 32))
    bank = rng.normal(size=(500, 32))
    excluded = np.zeros((128, 500), dtype=bool)
    S = rng.normal(size=(1000, 5000))
    start = np.arange(1000, dtype=np.int64) * 5
    return {
        "knn k=10 (128 x 500)": ("knn", (q, bank, 10, excluded)),
        "best_rank i2t (1000 x 5000)": ("best_rank", (S, start, 5)),
        "k_occurrence k=10 (5000 x 1000)": ("k_occurrence", (np.ascontiguousarray(S.T), 10)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (key, a) in cases(rng).items():
        nb_fn, np_fn = kernels.KERNELS[key]
        assert np.array_equal(nb_fn(*a), np_fn(*a))  # also triggers compilation
        t_nb = min(timeit.repeat(lambda: nb_fn(*a), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: np_fn(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_nb:10.2f} {t_np:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
