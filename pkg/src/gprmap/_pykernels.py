"""NumPy implementations of the compiled kernels, used when the extension is absent."""

from __future__ import annotations

import numpy as np

_CHUNK = 2048


def superpose_ricker(trace: np.ndarray, delays: np.ndarray, amps: np.ndarray,
                     dt: float, freq: float, half_support: float) -> None:
    T = trace.shape[0]
    if delays.size == 0:
        return
    pf2 = np.pi * np.pi * freq * freq
    k0 = np.ceil((delays - half_support) / dt).astype(np.int64)
    span = int(np.ceil(2.0 * half_support / dt)) + 2
    for s in range(0, delays.size, _CHUNK):
        d = delays[s:s + _CHUNK, None]
        k = k0[s:s + _CHUNK, None] + np.arange(span)[None, :]
        ok = (k >= 0) & (k < T) & (k * dt - d <= half_support) & (k * dt - d >= -half_support)
        tau = k * dt - d
        w = amps[s:s + _CHUNK, None] * (1.0 - 2.0 * pf2 * tau * tau) * np.exp(-pf2 * tau * tau)
        trace += np.bincount(k[ok], weights=w[ok], minlength=T)[:T]


def backproject(traces: np.ndarray, positions: np.ndarray, cells: np.ndarray,
                dt: float, velocity: float, num_threads: int = 1) -> np.ndarray:
    ntr, T = traces.shape
    out = np.zeros(cells.shape[0])
    scale = 2.0 / (velocity * dt)
    for j in range(ntr):
        d = cells - positions[j]
        s = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]) * scale
        k = np.floor(s).astype(np.int64)
        inside = (k >= 0) & (k < T - 1)
        kk = np.where(inside, k, 0)
        frac = s - kk
        val = (1.0 - frac) * traces[j, kk] + frac * traces[j, np.minimum(kk + 1, T - 1)]
        edge = (k == T - 1) & (s == k)
        out += np.where(inside, val, np.where(edge, traces[j, T - 1], 0.0))
    return out / ntr


def nearest_sq_dists(a: np.ndarray, b: np.ndarray, num_threads: int = 1):
    n = a.shape[0]
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.intp)
    for s in range(0, n, 256):
        blk = a[s:s + 256]
        dx = blk[:, None, 0] - b[None, :, 0]
        dy = blk[:, None, 1] - b[None, :, 1]
        dz = blk[:, None, 2] - b[None, :, 2]
        d = dx * dx + dy * dy + dz * dz
        j = np.argmin(d, axis=1)
        idx[s:s + 256] = j
        dist[s:s + 256] = d[np.arange(len(blk)), j]
    return dist, idx
