"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both implementations live side by side in ``clipgrain.kernels`` so a single
process can time them without toggling CLIPGRAIN_DISABLE_NUMBA.
"""

import argparse
import timeit

import numpy as np

from clipgrain import kernels
from clipgrain._accel import NUMBA_AVAILABLE
from clipgrain.numerics import SeededRng


def cases():
    rng = SeededRng(0)
    d, h, K, n = 32, 64, 4, 32
    X = rng.normal((n, d))
    labels = rng.integers(K, n)
    w = rng.normal(d * h + h + h * K + K) * 0.1
    G = rng.normal((n, w.size))
    order = np.arange(n)
    a = rng.integers(4, 60)
    b = rng.integers(4, 60)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    buf_u, buf_f = np.empty(10_000, np.uint64), np.empty(10_000)

    def pair(name):
        return getattr(kernels, name + "_nb"), getattr(kernels, name + "_np")

    mlp_nb, mlp_np = pair("mlp_pe")
    acc_nb, acc_np = pair("accumulate_rows")
    ed_nb, ed_np = pair("edit_distance")
    u64_nb, u64_np = pair("fill_u64")
    f_nb, f_np = pair("fill_random")
    return [
        ("mlp loss+grad, 32x(32-64-4)", lambda: mlp_nb(w, X, labels, h, K, True),
         lambda: mlp_np(w, X, labels, h, K, True)),
        ("accumulate 32 rows", lambda: acc_nb(G, order), lambda: acc_np(G, order)),
        ("edit distance 60x60", lambda: ed_nb(a, b), lambda: ed_np(a, b)),
        ("10k raw u64 draws", lambda: u64_nb(state, buf_u), lambda: u64_np(state, buf_u)),
        ("10k uniform draws", lambda: f_nb(state, buf_f), lambda: f_np(state, buf_f)),
    ]


def best_of(fn, repeat):
    fn()  # compile / warm up
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba is not installed; the *_nb kernels are plain Python")
    print(f"{'kernel':32s} {'numba':>12s} {'numpy':>12s} {'speedup':>8s}")
    for name, nb, np_ in cases():
        t_nb, t_np = best_of(nb, args.repeat), best_of(np_, args.repeat)
        print(f"{name:32s} {t_nb * 1e6:10.1f}us {t_np * 1e6:10.1f}us {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
