"""Kernel dispatch: compiled extension when importable, NumPy otherwise.

Set ``GPRMAP_PURE_PYTHON=1`` to force the fallback.  ``GPRMAP_THREADS``
sets the worker count for the parallel kernels (default: all CPUs).
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"
if os.environ.get("GPRMAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def num_threads() -> int:
    raw = os.environ.get("GPRMAP_THREADS")
    if raw:
        return max(1, int(raw))
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def superpose_ricker(trace: np.ndarray, delays, amps, dt: float, freq: float, half_support: float,
                     impl=None) -> None:
    """In-place: ``trace[k] += sum_i amps[i] * ricker(k*dt - delays[i])`` over the wavelet support."""
    impl = impl or _impl
    impl.superpose_ricker(trace, np.ascontiguousarray(delays, dtype=np.float64),
                          np.ascontiguousarray(amps, dtype=np.float64), float(dt), float(freq),
                          float(half_support))


def backproject(traces, positions, cells, dt: float, velocity: float, impl=None) -> np.ndarray:
    impl = impl or _impl
    return impl.backproject(np.ascontiguousarray(traces, dtype=np.float64),
                            np.ascontiguousarray(positions, dtype=np.float64),
                            np.ascontiguousarray(cells, dtype=np.float64),
                            float(dt), float(velocity), num_threads())


def nearest_sq_dists(a, b, impl=None):
    """Squared distance and index of the nearest ``b`` row for each ``a`` row."""
    impl = impl or _impl
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("nearest_sq_dists: empty point set")
    return impl.nearest_sq_dists(a, b, num_threads())
