"""Compiled vs NumPy kernels on representative workloads.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on both backends with identical inputs; the script
reports the best wall time per backend, the speed-up and the largest
absolute difference between the two outputs.
"""

import argparse
import time

import numpy as np

from gprmap import _pykernels
from gprmap import kernels

try:
    from gprmap import _ckernels
except ImportError:
    _ckernels = None


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def workloads(rng):
    dt, freq = 0.05e-9, 900e6
    delays = rng.uniform(2e-9, 40e-9, 2000)
    amps = rng.normal(size=2000)

    def ricker(impl):
        tr = np.zeros(1024)
        kernels.superpose_ricker(tr, delays, amps, dt, freq, 1.5 / freq, impl=impl)
        return tr

    traces = rng.normal(size=(100, 512))
    pos = np.stack([np.linspace(0, 2, 100), np.zeros(100), np.zeros(100)], axis=1)
    gx, gz = np.meshgrid(np.linspace(0, 2, 96), np.linspace(0.05, 1.5, 64))
    cells = np.stack([gx.ravel(), np.zeros(gx.size), gz.ravel()], axis=1)

    def backproject(impl):
        return kernels.backproject(traces, pos, cells, dt, 1.7e8, impl=impl)

    a, b = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3))

    def nearest(impl):
        return kernels.nearest_sq_dists(a, b, impl=impl)[0]

    return {"superpose_ricker": ricker, "backproject": backproject, "nearest_sq_dists": nearest}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"threads={kernels.num_threads()} compiled={'yes' if _ckernels else 'no'}")
    print(f"{'kernel':<18} {'python s':>10} {'cython s':>10} {'speed-up':>9} {'max |diff|':>11}")
    for name, fn in workloads(rng).items():
        tp, op = best_time(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<18} {tp:>10.4f} {'-':>10} {'-':>9} {'-':>11}")
            continue
        tc, oc = best_time(lambda: fn(_ckernels), args.repeat)
        diff = float(np.max(np.abs(np.asarray(op) - np.asarray(oc))))
        print(f"{name:<18} {tp:>10.4f} {tc:>10.4f} {tp / tc:>8.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
