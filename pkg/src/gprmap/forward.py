"""Ray-based GPR forward model and back-projection migration.

Each primitive's upward-facing surface is discretised into area-weighted
point scatterers.  A trace is the superposition of zero-phase Ricker
wavelets delayed by the two-way travel time to every scatterer, scaled by
1/r^2 spreading and exp(-2 alpha r) attenuation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .fileio import FormatError, Reader, atomic_write_bytes
from .scene import Primitive, Scene, SoilMaterial, Trajectory, _orthonormal_pair

C0 = 299_792_458.0
MU0 = 4e-7 * np.pi
EPS0 = 1.0 / (MU0 * C0 * C0)


def wave_velocity(material: SoilMaterial) -> float:
    return C0 / np.sqrt(material.relative_permittivity)


def attenuation(material: SoilMaterial) -> float:
    """Low-loss amplitude attenuation constant alpha in Np/m."""
    return 0.5 * material.conductivity * np.sqrt(MU0 / (EPS0 * material.relative_permittivity))


def travel_time(antenna, point, material: SoilMaterial) -> float:
    """Two-way travel time between antenna and scatterer."""
    r = np.linalg.norm(np.asarray(point, dtype=np.float64) - np.asarray(antenna, dtype=np.float64))
    return 2.0 * r / wave_velocity(material)


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def time_to_depth(t, material: SoilMaterial):
    """Depth d = v t / 2 for two-way time t."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("two-way time must be non-negative")
    return _scalar_or_array(wave_velocity(material) * t / 2.0)


def depth_to_time(d, material: SoilMaterial):
    return _scalar_or_array(2.0 * np.asarray(d, dtype=np.float64) / wave_velocity(material))


@dataclass(frozen=True)
class Wavelet:
    center_frequency: float = 900e6
    amplitude: float = 1.0
    kind: str = "ricker"

    def __post_init__(self):
        if not self.center_frequency > 0:
            raise ValueError("center frequency must be positive")
        if self.kind != "ricker":
            raise ValueError(f"unsupported wavelet kind {self.kind!r}")

    @property
    def half_support(self) -> float:
        return 1.5 / self.center_frequency

    def __call__(self, tau):
        a = (np.pi * self.center_frequency * np.asarray(tau)) ** 2
        return self.amplitude * (1.0 - 2.0 * a) * np.exp(-a)


@dataclass(frozen=True)
class ForwardConfig:
    wavelet: Wavelet = field(default_factory=Wavelet)
    dt: float = 0.05e-9
    n_samples: int = 512
    spacing_factor: float = 0.25  # scatterer spacing as a fraction of v*dt
    noise_snr_db: float | None = None

    def __post_init__(self):
        if not (self.dt > 0 and self.n_samples > 0):
            raise ValueError("dt and n_samples must be positive")


@dataclass
class AScan:
    samples: np.ndarray
    dt: float
    position: np.ndarray
    material: SoilMaterial

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.samples.ndim != 1 or self.samples.size == 0 or not self.dt > 0:
            raise ValueError("an A-scan needs a non-empty 1-D sample array and dt > 0")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("A-scan samples must be finite")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt


@dataclass
class BScan:
    traces: list[AScan]
    trace_spacing: float

    def __post_init__(self):
        if not self.traces:
            raise ValueError("a B-scan needs at least one trace")
        t0 = self.traces[0]
        for tr in self.traces[1:]:
            if tr.dt != t0.dt or tr.samples.size != t0.samples.size:
                raise ValueError("all traces must share dt and length")

    @property
    def data(self) -> np.ndarray:
        """Samples as a (time, trace) image: rows are time, columns traces."""
        return np.stack([t.samples for t in self.traces], axis=1)

    @property
    def positions(self) -> np.ndarray:
        return np.array([t.position for t in self.traces])

    @property
    def dt(self) -> float:
        return self.traces[0].dt

    @property
    def material(self) -> SoilMaterial:
        return self.traces[0].material

    def __len__(self) -> int:
        return len(self.traces)


# ---------------------------------------------------------------- scatterers

@dataclass(frozen=True)
class ScatterSet:
    points: np.ndarray   # (n, 3)
    weights: np.ndarray  # area elements, m^2

    def __len__(self) -> int:
        return len(self.points)

    def merged(self, other: "ScatterSet") -> "ScatterSet":
        return ScatterSet(np.concatenate([self.points, other.points]),
                          np.concatenate([self.weights, other.weights]))


def _sphere_cap(prim: Primitive, h: float):
    r = prim.dims[0]
    c = prim.c
    if r <= h:
        return (c - [0.0, 0.0, r])[None, :], np.array([np.pi * r * r])
    n_theta = int(np.ceil((np.pi / 2) * r / h))
    edges = np.linspace(0.0, np.pi / 2, n_theta + 1)
    pts, wts = [], []
    for k in range(n_theta):
        th = 0.5 * (edges[k] + edges[k + 1])
        band = 2.0 * np.pi * r * r * (np.cos(edges[k]) - np.cos(edges[k + 1]))
        n_phi = max(1, int(np.ceil(2.0 * np.pi * r * np.sin(th) / h)))
        phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
        ring = np.stack([r * np.sin(th) * np.cos(phi), r * np.sin(th) * np.sin(phi),
                         -r * np.cos(th) * np.ones(n_phi)], axis=1)
        pts.append(c + ring)
        wts.append(np.full(n_phi, band / n_phi))
    return np.concatenate(pts), np.concatenate(wts)


def _box_top(prim: Primitive, h: float):
    hx, hy, hz = prim.dims
    nx = max(1, int(np.ceil(2 * hx / h)))
    ny = max(1, int(np.ceil(2 * hy / h)))
    xs = -hx + (np.arange(nx) + 0.5) * (2 * hx / nx)
    ys = -hy + (np.arange(ny) + 0.5) * (2 * hy / ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, -hz)], axis=1) + prim.c
    return pts, np.full(len(pts), 4 * hx * hy / (nx * ny))


def _cylinder_upper(prim: Primitive, h: float):
    r, L = prim.dims
    a = np.asarray(prim.axis)
    e1, e2 = _orthonormal_pair(a)
    n_phi = max(4, int(np.ceil(2 * np.pi * r / h)))
    n_t = max(1, int(np.ceil(2 * L / h)))
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    t = -L + (np.arange(n_t) + 0.5) * (2 * L / n_t)
    normals = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    up = normals[:, 2] < 0
    normals = normals[up]
    pts = (prim.c + t[None, :, None] * a + r * normals[:, None, :]).reshape(-1, 3)
    wts = np.full(len(pts), (2 * np.pi * r / n_phi) * (2 * L / n_t))
    out_p, out_w = [pts], [wts]
    for sign in (-1.0, 1.0):
        if sign * a[2] < 0:  # cap faces upward
            n_r = max(1, int(np.ceil(r / h)))
            for k in range(n_r):
                rr = (k + 0.5) * r / n_r
                m = max(1, int(np.ceil(2 * np.pi * rr / h)))
                ang = (np.arange(m) + 0.5) * 2 * np.pi / m
                ring = prim.c + sign * L * a + rr * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
                out_p.append(ring)
                out_w.append(np.full(m, np.pi * r * r * ((k + 1) ** 2 - k ** 2) / n_r ** 2 / m))
    return np.concatenate(out_p), np.concatenate(out_w)


def scatterers(scene: Scene, spacing: float) -> ScatterSet:
    """Area-weighted samples of every primitive's upward-facing surface."""
    pts, wts = [np.zeros((0, 3))], [np.zeros(0)]
    for prim in scene.primitives:
        fn = {"sphere": _sphere_cap, "box": _box_top, "cylinder": _cylinder_upper}[prim.kind]
        p, w = fn(prim, spacing)
        pts.append(p)
        wts.append(w)
    return ScatterSet(np.concatenate(pts), np.concatenate(wts))


def scatter_spacing(material: SoilMaterial, config: ForwardConfig) -> float:
    return config.spacing_factor * wave_velocity(material) * config.dt


# ---------------------------------------------------------------- synthesis

def required_window(scatter: ScatterSet, antenna_z: float, material: SoilMaterial) -> float:
    """Two-way vertical time to the deepest scatterer."""
    if len(scatter) == 0:
        return 0.0
    return 2.0 * (scatter.points[:, 2].max() - antenna_z) / wave_velocity(material)


def _trace_from_scatter(scatter: ScatterSet, antenna: np.ndarray, material: SoilMaterial,
                        wavelet: Wavelet, n_samples: int, dt: float) -> np.ndarray:
    trace = np.zeros(n_samples)
    if len(scatter) == 0:
        return trace
    need = required_window(scatter, antenna[2], material)
    if need > (n_samples - 1) * dt:
        raise ValueError(f"time window {(n_samples - 1) * dt:.4g} s is too short; deepest "
                         f"two-way time needs at least {need:.4g} s "
                         f"({int(np.ceil(need / dt)) + 1} samples at dt={dt:g})")
    d = scatter.points - antenna
    r = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    v = wave_velocity(material)
    delays = 2.0 * r / v
    keep = delays - wavelet.half_support <= (n_samples - 1) * dt
    alpha = attenuation(material)
    amps = wavelet.amplitude * scatter.weights[keep] * np.exp(-2.0 * alpha * r[keep]) / (r[keep] * r[keep])
    kernels.superpose_ricker(trace, delays[keep], amps, dt, wavelet.center_frequency, wavelet.half_support)
    return trace


def synthesize_ascan(scene: Scene, antenna_position, wavelet: Wavelet | None = None,
                     n_samples: int = 512, dt: float = 0.05e-9,
                     scatter: ScatterSet | None = None, spacing_factor: float = 0.25) -> AScan:
    wavelet = wavelet or Wavelet()
    antenna = np.asarray(antenna_position, dtype=np.float64).reshape(3)
    if scatter is None:
        scatter = scatterers(scene, spacing_factor * wave_velocity(scene.soil) * dt)
    samples = _trace_from_scatter(scatter, antenna, scene.soil, wavelet, n_samples, dt)
    return AScan(samples, dt, antenna, scene.soil)


def synthesize_bscan(scene: Scene, trajectory: Trajectory, wavelet: Wavelet | None = None,
                     n_samples: int = 512, dt: float = 0.05e-9,
                     scatter: ScatterSet | None = None, spacing_factor: float = 0.25) -> BScan:
    wavelet = wavelet or Wavelet()
    if scatter is None:
        scatter = scatterers(scene, spacing_factor * wave_velocity(scene.soil) * dt)
    traces = [synthesize_ascan(scene, pose.position, wavelet, n_samples, dt, scatter=scatter)
              for pose in trajectory.poses]
    return BScan(traces, trajectory.spacing)


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise at ``snr_db`` relative to the mean signal power."""
    x = np.asarray(samples, dtype=np.float64)
    power = float(np.mean(x * x))
    if power == 0.0:
        return x.copy()
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return x + rng.normal(0.0, sigma, size=x.shape)


def noisy_bscan(bscan: BScan, snr_db: float, seed: int) -> BScan:
    rng = np.random.default_rng(seed)
    noisy = add_noise(bscan.data, snr_db, rng)
    traces = [AScan(noisy[:, i], t.dt, t.position, t.material) for i, t in enumerate(bscan.traces)]
    return BScan(traces, bscan.trace_spacing)


# ---------------------------------------------------------------- back-projection

@dataclass(frozen=True)
class ImageGrid:
    """Cells of a vertical image plane.

    Cell (i, j) sits at ``origin + x[j] * direction + z[i] * e_z`` where
    ``x[j] = x_range[0] + (j + 0.5) * cell`` and likewise for depth.
    """

    x_range: tuple[float, float]
    z_range: tuple[float, float]
    cell: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.cell > 0 or self.x_range[1] <= self.x_range[0] or self.z_range[1] <= self.z_range[0]:
            raise ValueError("image grid needs positive cell size and increasing ranges")

    @property
    def shape(self) -> tuple[int, int]:
        nz = int(round((self.z_range[1] - self.z_range[0]) / self.cell))
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.cell))
        return max(nz, 1), max(nx, 1)

    @property
    def xs(self) -> np.ndarray:
        return self.x_range[0] + (np.arange(self.shape[1]) + 0.5) * self.cell

    @property
    def zs(self) -> np.ndarray:
        return self.z_range[0] + (np.arange(self.shape[0]) + 0.5) * self.cell

    def cell_points(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        gz, gx = np.meshgrid(self.zs, self.xs, indexing="ij")
        o = np.asarray(self.origin, dtype=np.float64)
        pts = o + gx[..., None] * d + gz[..., None] * np.array([0.0, 0.0, 1.0])
        return pts.reshape(-1, 3)

    def world_of(self, i: float, j: float) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        x = self.x_range[0] + (j + 0.5) * self.cell
        z = self.z_range[0] + (i + 0.5) * self.cell
        return np.asarray(self.origin) + x * d + np.array([0.0, 0.0, z])


@dataclass
class MigratedImage:
    grid: np.ndarray
    spec: ImageGrid

    @property
    def x_range(self):
        return self.spec.x_range

    @property
    def z_range(self):
        return self.spec.z_range

    @property
    def cell(self) -> float:
        return self.spec.cell


def backproject(scans: BScan | Sequence[AScan], spec: ImageGrid, material: SoilMaterial | None = None
                ) -> MigratedImage:
    """Delay-and-sum migration: each cell averages every trace at its two-way time."""
    traces = scans.traces if isinstance(scans, BScan) else list(scans)
    if not traces:
        raise ValueError("back-projection needs at least one trace")
    material = material or traces[0].material
    dt = traces[0].dt
    n = traces[0].samples.size
    data = np.stack([t.samples for t in traces])
    pos = np.stack([t.position for t in traces])
    v = wave_velocity(material)
    deepest = 2.0 * (spec.z_range[1] + np.asarray(spec.origin)[2] - pos[:, 2].min()) / v
    if deepest > (n - 1) * dt:
        raise ValueError(f"image depth {spec.z_range[1]:g} m lies beyond the recorded window "
                         f"({time_to_depth((n - 1) * dt, material):.4g} m)")
    img = kernels.backproject(data, pos, spec.cell_points(), dt, v)
    return MigratedImage(img.reshape(spec.shape), spec)


# ---------------------------------------------------------------- GPRB files

_BSCAN_MAGIC = b"GPRB"
_BSCAN_VERSION = 1


def bscan_to_bytes(bscan: BScan) -> bytes:
    n = bscan.traces[0].samples.size
    head = _BSCAN_MAGIC + struct.pack("<IIIdd", _BSCAN_VERSION, len(bscan), n, bscan.dt, bscan.trace_spacing)
    body = b"".join(np.asarray(t.position, dtype="<f8").tobytes() + t.samples.astype("<f4").tobytes()
                    for t in bscan.traces)
    return head + body


def write_bscan(path, bscan: BScan) -> None:
    atomic_write_bytes(path, bscan_to_bytes(bscan))


def read_bscan(path, material: SoilMaterial) -> BScan:
    r = Reader(Path(path).read_bytes(), what="GPRB file")
    r.expect_magic(_BSCAN_MAGIC)
    version = r.u32()
    if version != _BSCAN_VERSION:
        raise FormatError(f"unsupported GPRB version {version}", r.offset - 4)
    count, n = r.u32(), r.u32()
    dt, spacing = r.f64(), r.f64()
    if count == 0 or n == 0:
        raise FormatError("GPRB file has no traces or no samples", 12)
    traces = []
    for _ in range(count):
        pos = r.array("<f8", 3)
        samples = r.array("<f4", n).astype(np.float64)
        traces.append(AScan(samples, dt, pos, material))
    r.expect_end()
    return BScan(traces, spacing)
