"""Numba vs numpy timings for the three hot kernels.

    python3 benchmarks/bench_kernels.py [--graphs 2000] [--points 4000] [--repeat 5]

Numba timings exclude the first (compiling) call. With MHNAS_DISABLE_NUMBA=1
the "numba" column runs the undecorated Python loops, which is only useful
to see how slow they are.
"""

import argparse
import timeit

import numpy as np

from mhnas import _accel, hardware
from mhnas.kernels import batch_features, batch_norm_metrics, pareto_mask
from mhnas.layers import stack_tables


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--graphs", type=int, default=2000)
    ap.add_argument("--points", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    table, offsets = stack_tables([hardware.random_graph(rng) for _ in range(args.graphs)])
    lat = rng.uniform(0.5, 80.0, size=(args.points * 25, 5))
    norm = rng.uniform(1.0, 40.0, size=5)
    plat = rng.uniform(1.0, 100.0, size=args.points)
    pacc = rng.uniform(0.6, 0.8, size=args.points)

    cases = [
        (f"batch_features ({len(table)} rows)", lambda f: batch_features(table, offsets, use_numba=f)),
        (f"batch_norm_metrics ({len(lat)}x5)", lambda f: batch_norm_metrics(lat, norm, use_numba=f)),
        (f"pareto_mask ({args.points} points)", lambda f: pareto_mask(plat, pacc, use_numba=f)),
    ]
    print(f"numba enabled: {_accel.USE_NUMBA}")
    print(f"{'kernel':<36} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, call in cases:
        call(True)  # compile / warm up
        call(False)
        t_nb = best_of(lambda: call(True), args.repeat)
        t_np = best_of(lambda: call(False), args.repeat)
        print(f"{name:<36} {t_nb * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
