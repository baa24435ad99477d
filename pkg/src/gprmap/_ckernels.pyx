# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Signatures mirror gprmap._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt, floor, ceil, M_PI

cnp.import_array()


def superpose_ricker(double[::1] trace, const double[::1] delays, const double[::1] amps,
                     double dt, double freq, double half_support):
    """Add amp * ricker(t - delay) into ``trace`` for each scatterer, in input order."""
    cdef Py_ssize_t n = delays.shape[0], T = trace.shape[0]
    cdef Py_ssize_t i, k, k0, k1
    cdef double pf2 = M_PI * M_PI * freq * freq
    cdef double tau, a, t, g, q
    # exp(-p tau^2) advanced by the exact recurrence g_{k+1} = g_k q_k, q_{k+1} = q_k r
    cdef double r = exp(-2.0 * pf2 * dt * dt)
    for i in range(n):
        t = delays[i]
        a = amps[i]
        k0 = <Py_ssize_t> ceil((t - half_support) / dt)
        k1 = <Py_ssize_t> floor((t + half_support) / dt)
        if k0 < 0:
            k0 = 0
        if k1 > T - 1:
            k1 = T - 1
        if k1 < k0:
            continue
        tau = k0 * dt - t
        g = exp(-pf2 * tau * tau)
        q = exp(-pf2 * (2.0 * tau * dt + dt * dt))
        for k in range(k0, k1 + 1):
            tau = k * dt - t
            trace[k] += a * (1.0 - 2.0 * pf2 * tau * tau) * g
            g *= q
            q *= r


def backproject(const double[:, ::1] traces, const double[:, ::1] positions,
                const double[:, ::1] cells, double dt, double velocity, int num_threads=1):
    """Mean over traces of the linearly interpolated sample at each cell's two-way time."""
    cdef Py_ssize_t ntr = traces.shape[0], T = traces.shape[1], P = cells.shape[0]
    cdef Py_ssize_t p, j, k
    cdef double dx, dy, dz, r, s, frac, acc
    out_arr = np.zeros(P, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double scale = 2.0 / (velocity * dt)
    for p in prange(P, nogil=True, num_threads=max(1, num_threads), schedule="static"):
        acc = 0.0
        for j in range(ntr):
            dx = cells[p, 0] - positions[j, 0]
            dy = cells[p, 1] - positions[j, 1]
            dz = cells[p, 2] - positions[j, 2]
            r = sqrt(dx * dx + dy * dy + dz * dz)
            s = r * scale
            k = <Py_ssize_t> floor(s)
            if k < 0 or k >= T - 1:
                if k == T - 1 and s == <double> k:
                    acc = acc + traces[j, k]
                continue
            frac = s - k
            acc = acc + (1.0 - frac) * traces[j, k] + frac * traces[j, k + 1]
        out[p] = acc / ntr
    return out_arr


def nearest_sq_dists(const double[:, ::1] a, const double[:, ::1] b, int num_threads=1):
    """For each row of ``a`` the squared distance to, and index of, its nearest row in ``b``.

    Ties go to the lowest index in ``b``.
    """
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j, best
    cdef double dx, dy, dz, d, bd
    dist_arr = np.empty(n, dtype=np.float64)
    idx_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t[::1] idx = idx_arr
    for i in prange(n, nogil=True, num_threads=max(1, num_threads), schedule="static"):
        bd = 1.0e308
        best = 0
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bd:
                bd = d
                best = j
        dist[i] = bd
        idx[i] = best
    return dist_arr, idx_arr
