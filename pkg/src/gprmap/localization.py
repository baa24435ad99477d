"""A-scan place recognition: back-projected images, gradient descriptors, VLAD, matching."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fileio import FormatError, Reader, atomic_write_bytes
from .forward import (AScan, ImageGrid, MigratedImage, ScatterSet, Wavelet, add_noise, backproject,
                      required_window, scatterers, synthesize_ascan, time_to_depth, wave_velocity)
from .scene import SOILS, Scene, SceneConfig, SoilMaterial, generate_scene


# ---------------------------------------------------------------- images and local descriptors

@dataclass(frozen=True)
class LocalizationConfig:
    dt: float = 0.1e-9
    n_samples: int | None = None  # None: just long enough for the deepest scatterer plus ``window_pad``
    window_pad: int = 40
    spacing_factor: float = 0.25
    image_size: int = 64  # cells along depth and across track
    depth_fraction: float = 0.5  # share of the recorded window that is imaged
    patch: int = 16
    stride: int = 8
    cells: int = 2  # patch split into cells x cells sub-blocks
    bins: int = 4  # unsigned orientation bins
    power: float = 1.0  # histogram weight |grad|^(2 power): 1 is energy, 0.5 magnitude
    position_weight: float = 0.0  # > 0 appends the patch's scaled (row, col) to its descriptor
    k: int = 8
    alpha: float = 30.0
    height: float = 0.0

    def __post_init__(self):
        if self.patch % self.cells:
            raise ValueError("patch size must be a multiple of cells")
        if not (0 < self.depth_fraction <= 1 and self.power > 0 and self.bins >= 1 and self.k >= 1
                and self.position_weight >= 0):
            raise ValueError("invalid localization configuration")

    @property
    def descriptor_dim(self) -> int:
        return self.cells * self.cells * self.bins + (2 if self.position_weight > 0 else 0)

    @classmethod
    def fine(cls, **kw) -> "LocalizationConfig":
        """Finer sub-blocks, magnitude weighting, patch positions and 32 clusters: 130-D local descriptors."""
        base = dict(cells=8, bins=2, power=0.5, k=32, position_weight=1.5)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def ascan_image(ascan: AScan, cfg: LocalizationConfig = LocalizationConfig()) -> MigratedImage:
    """Back-project one A-scan onto a square vertical plane below the antenna.

    The imaged depth is a fixed share of the recorded window, so every soil
    gets the same image size in cells.
    """
    zmax = cfg.depth_fraction * float(time_to_depth((ascan.samples.size - 1) * ascan.dt, ascan.material))
    cell = zmax / cfg.image_size
    grid = ImageGrid((-zmax / 2, zmax / 2), (0.0, zmax), cell,
                     origin=(float(ascan.position[0]), float(ascan.position[1]), 0.0))
    return backproject([ascan], grid)


@dataclass
class LocalDescriptorSet:
    descriptors: np.ndarray  # (N, D)
    flagged: np.ndarray  # (N,) True where the patch had no gradient energy

    def __len__(self) -> int:
        return len(self.descriptors)


def patch_grid_shape(shape: tuple[int, int], patch: int, stride: int) -> tuple[int, int]:
    h, w = shape
    if h < patch or w < patch:
        raise ValueError(f"image {shape} smaller than patch size {patch}")
    return (h - patch) // stride + 1, (w - patch) // stride + 1


def extract_local_descriptors(image, cfg: LocalizationConfig = LocalizationConfig()) -> LocalDescriptorSet:
    """Orientation-binned gradient energy over a 2x2 (``cells``) layout per patch, L2-normalized per patch.

    Orientations are unsigned (mod pi) and split linearly between the two
    nearest bins.  With ``position_weight`` the patch's row and column, scaled
    to [0, position_weight], are appended before normalization so that
    aggregation keeps a coarse record of where the echoes sit.
    """
    img = image.grid if isinstance(image, MigratedImage) else np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0 or not np.all(np.isfinite(img)):
        raise ValueError("descriptor extraction needs a finite 2-D image")
    gy, gx = np.gradient(img)
    energy = gx * gx + gy * gy
    if cfg.power != 1.0:
        energy = energy ** cfg.power
    theta = np.mod(np.arctan2(gy, gx), np.pi) / np.pi * cfg.bins
    lo = np.floor(theta).astype(np.int64) % cfg.bins
    frac = theta - np.floor(theta)
    hi = (lo + 1) % cfg.bins
    # per-pixel energy split over orientation bins: (H, W, bins)
    E = np.zeros(img.shape + (cfg.bins,))
    rows, cols = np.indices(img.shape)
    np.add.at(E, (rows, cols, lo), energy * (1.0 - frac))
    np.add.at(E, (rows, cols, hi), energy * frac)
    ph, pw = patch_grid_shape(img.shape, cfg.patch, cfg.stride)
    sub = cfg.patch // cfg.cells
    n_hist = cfg.cells * cfg.cells * cfg.bins
    out = np.zeros((ph * pw, cfg.descriptor_dim))
    for a in range(ph):
        for b in range(pw):
            r0, c0 = a * cfg.stride, b * cfg.stride
            block = E[r0:r0 + cfg.patch, c0:c0 + cfg.patch]
            h = block.reshape(cfg.cells, sub, cfg.cells, sub, cfg.bins)
            out[a * pw + b, :n_hist] = h.sum(axis=(1, 3)).reshape(-1)
    norms = np.sqrt((out * out).sum(axis=1))
    flagged = norms == 0
    out[~flagged] /= norms[~flagged, None]
    if cfg.position_weight > 0:
        a, b = np.divmod(np.arange(ph * pw), pw)
        out[:, n_hist] = cfg.position_weight * a / max(ph - 1, 1)
        out[:, n_hist + 1] = cfg.position_weight * b / max(pw - 1, 1)
        out[~flagged] /= np.sqrt((out[~flagged] ** 2).sum(axis=1))[:, None]
    return LocalDescriptorSet(out, flagged)


# ---------------------------------------------------------------- VLAD

@dataclass
class VladParams:
    w: np.ndarray  # (K, D)
    b: np.ndarray  # (K,)
    c: np.ndarray  # (K, D)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.c = np.asarray(self.c, dtype=np.float64)
        K = self.w.shape[0]
        if K < 1 or self.c.shape != self.w.shape or self.b.shape != (K,):
            raise ValueError("VLAD parameters need w, c of shape (K, D) and b of shape (K,)")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.c))):
            raise ValueError("VLAD parameters must be finite")

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {"vlad.w": self.w, "vlad.b": self.b, "vlad.c": self.c}

    @classmethod
    def from_dict(cls, d: dict) -> "VladParams":
        return cls(d["vlad.w"], d["vlad.b"], d["vlad.c"])


def soft_assign(x, params: VladParams) -> np.ndarray:
    """Softmax over clusters of w_k . x + b_k; works on one descriptor or a stack."""
    x = np.asarray(x, dtype=np.float64)
    # fixed left-to-right accumulation (not BLAS) so results do not depend on the library build
    logits = np.zeros(x.shape[:-1] + (params.k,))
    for q in range(params.d):
        logits += x[..., q, None] * params.w[:, q]
    logits += params.b
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    total = np.zeros(e.shape[:-1] + (1,))
    for j in range(params.k):
        total += e[..., j:j + 1]
    return e / total


class ZeroDescriptorError(ValueError):
    pass


def vlad_residuals(x: np.ndarray, a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """V[k, j] = sum_i a[i, k] (x[i, j] - c[k, j]), accumulated in descriptor order."""
    V = np.zeros(c.shape)
    for i in range(len(x)):
        V += a[i][:, None] * (x[i][None, :] - c)
    return V


def vlad_aggregate(descs, params: VladParams, intra_norm: bool = True) -> np.ndarray:
    """Soft-assigned residual sums, intra-normalized per cluster, flattened and L2-normalized."""
    x = descs.descriptors if isinstance(descs, LocalDescriptorSet) else np.asarray(descs, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0 or x.shape[1] != params.d:
        raise ValueError(f"need an (N >= 1, {params.d}) descriptor array, got {x.shape}")
    V = vlad_residuals(x, soft_assign(x, params), params.c)
    if not np.any(V):
        raise ZeroDescriptorError("all VLAD residuals are zero")
    if intra_norm:
        n = np.sqrt((V * V).sum(axis=1))
        V = np.where(n[:, None] > 0, V / np.where(n > 0, n, 1.0)[:, None], 0.0)
    v = V.reshape(-1)
    return v / np.sqrt(np.dot(v, v))


def vlad_aggregate_t(x: np.ndarray, w: Tensor, b: Tensor, c: Tensor, intra_norm: bool = True) -> Tensor:
    """Differentiable twin of :func:`vlad_aggregate` with respect to (w, b, c)."""
    X = Tensor(np.asarray(x, dtype=np.float64))
    k = w.shape[0]
    a = ad.softmax(ad.add_bias(ad.matmul(X, ad.transpose(w)), b), axis=1)  # (N, K)
    # sum_i a_ik x_i - (sum_i a_ik) c_k
    ones = Tensor(np.ones((1, X.shape[1])))
    mass = ad.matmul(ad.reshape(ad.reduce_sum(a, axis=0), (k, 1)), ones)  # row k filled with sum_i a_ik
    V = ad.matmul(ad.transpose(a), X) - mass * c
    if intra_norm:
        V = V / ad.matmul(ad.sqrt(ad.reduce_sum(ad.square(V), axis=1, keepdims=True)), ones)
    v = ad.reshape(V, (-1,))
    return v / ad.sqrt(ad.reduce_sum(ad.square(v)))


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 50) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm from a k-means++ start; returns centroids, assignment and objective trace."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"k = {k} exceeds the number of distinct samples")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(x[rng.choice(len(x), p=d / d.sum())])
    C = np.array(centers)
    trace: list[float] = []
    for _ in range(iters):
        d = ((x[:, None, :] - C[None]) ** 2).sum(-1)
        assign = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(x)), assign].sum()))
        newC = C.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                newC[j] = members.mean(axis=0)
        if np.array_equal(newC, C):
            break
        C = newC
    d = ((x[:, None, :] - C[None]) ** 2).sum(-1)
    assign = np.argmin(d, axis=1)
    if trace[-1] != float(d[np.arange(len(x)), assign].sum()):
        trace.append(float(d[np.arange(len(x)), assign].sum()))
    return C, assign, trace


def init_vlad_params(samples: np.ndarray, k: int = 8, alpha: float = 30.0, seed: int = 0) -> VladParams:
    """k-means centroids with w_k = 2 alpha c_k and b_k = -alpha |c_k|^2."""
    C, _, _ = kmeans(samples, k, seed)
    return VladParams(2.0 * alpha * C, -alpha * (C * C).sum(axis=1), C)


# ---------------------------------------------------------------- database

@dataclass
class DbEntry:
    id: int
    x: float
    y: float
    soil: str
    descriptor: np.ndarray


@dataclass
class MapDatabase:
    k: int
    d: int
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([e.descriptor for e in self.entries]).reshape(len(self.entries), self.k * self.d)

    @property
    def positions(self) -> np.ndarray:
        return np.array([[e.x, e.y] for e in self.entries]).reshape(len(self.entries), 2)

    def add(self, entry: DbEntry) -> None:
        if any(e.id == entry.id for e in self.entries):
            raise ValueError(f"duplicate database id {entry.id}")
        self.entries.append(entry)


def scan_descriptor(ascan: AScan, params: VladParams, cfg: LocalizationConfig) -> np.ndarray:
    return vlad_aggregate(extract_local_descriptors(ascan_image(ascan, cfg), cfg), params)


def survey_ascans(scene: Scene, positions, cfg: LocalizationConfig, scatter: ScatterSet | None = None,
                  wavelet: Wavelet | None = None) -> list[AScan]:
    if scatter is None:
        scatter = scatterers(scene, cfg.spacing_factor * wave_velocity(scene.soil) * cfg.dt)
    n = cfg.n_samples
    if n is None:
        n = int(np.ceil(required_window(scatter, -cfg.height, scene.soil) / cfg.dt)) + cfg.window_pad
    return [synthesize_ascan(scene, (float(x), float(y), -cfg.height), wavelet, n, cfg.dt, scatter)
            for x, y in np.asarray(positions, dtype=np.float64).reshape(-1, 2)]


def build_database(scene: Scene, positions, cfg: LocalizationConfig = LocalizationConfig(),
                   params: VladParams | None = None, seed: int = 0) -> tuple[MapDatabase, VladParams]:
    """Synthesize, image and describe an A-scan per position.

    Without ``params`` the VLAD layer is initialised by k-means on the
    database's own local descriptors.
    """
    scans = survey_ascans(scene, positions, cfg)
    locals_ = [extract_local_descriptors(ascan_image(s, cfg), cfg) for s in scans]
    if params is None:
        params = init_vlad_params(np.concatenate([l.descriptors for l in locals_]), cfg.k, cfg.alpha, seed)
    db = MapDatabase(params.k, params.d)
    for i, (s, l) in enumerate(zip(scans, locals_)):
        db.add(DbEntry(i, float(s.position[0]), float(s.position[1]), scene.soil.name, vlad_aggregate(l, params)))
    return db, params


def match(query: np.ndarray, db: MapDatabase) -> tuple[DbEntry, float]:
    """Entry of highest cosine similarity; ties go to the lowest id."""
    if len(db) == 0:
        raise ValueError("cannot match against an empty database")
    q = np.asarray(query, dtype=np.float64)
    sims = db.matrix @ q / np.sqrt(np.dot(q, q))
    ids = np.array([e.id for e in db.entries])
    best = np.flatnonzero(sims == sims.max())
    i = best[np.argmin(ids[best])]
    return db.entries[i], float(sims[i])


def nearest_entry(pos, db: MapDatabase) -> DbEntry:
    p = np.asarray(pos, dtype=np.float64)[:2]
    d = ((db.positions - p) ** 2).sum(axis=1)
    ids = np.array([e.id for e in db.entries])
    best = np.flatnonzero(d == d.min())
    return db.entries[best[np.argmin(ids[best])]]


def recall_at_1(queries: Sequence[tuple[np.ndarray, np.ndarray]], db: MapDatabase,
                success_radius: float | None = None) -> float:
    """Share of queries whose match is the database entry nearest their true position.

    With ``success_radius`` a match also counts when the matched entry lies
    within that distance of the true position.
    """
    if not queries:
        raise ValueError("no queries")
    hits = 0
    for q, pos in queries:
        m = match(q, db)[0]
        ok = m.id == nearest_entry(pos, db).id
        if not ok and success_radius is not None:
            ok = float(np.hypot(m.x - pos[0], m.y - pos[1])) <= success_radius
        hits += ok
    return hits / len(queries)


def make_queries(scene: Scene, positions, params: VladParams, cfg: LocalizationConfig,
                 snr_db: float | None = None, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Descriptors of (optionally noisy) query A-scans with their true plan positions."""
    scans = survey_ascans(scene, positions, cfg)
    out = []
    for i, s in enumerate(scans):
        if snr_db is not None:
            s = AScan(add_noise(s.samples, snr_db, np.random.default_rng([seed, i])), s.dt, s.position, s.material)
        out.append((scan_descriptor(s, params, cfg), np.asarray(s.position[:2])))
    return out


def grid_positions(extent, spacing: float, margin: float = 0.0) -> np.ndarray:
    (x0, x1), (y0, y1) = extent[0], extent[1]
    xs = np.arange(x0 + margin, x1 - margin + 1e-9, spacing)
    ys = np.arange(y0 + margin, y1 - margin + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def jitter_positions(positions, radius: float, seed: int = 0) -> np.ndarray:
    """Each position moved uniformly within a disc of ``radius``."""
    rng = np.random.default_rng(seed)
    p = np.asarray(positions, dtype=np.float64)
    r = radius * np.sqrt(rng.uniform(0, 1, len(p)))
    a = rng.uniform(0, 2 * np.pi, len(p))
    return p + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


# ---------------------------------------------------------------- triplet fine-tuning

def finetune_vlad(params: VladParams, triplets: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
                  margin: float = 0.1, steps: int = 50, config: ad.SgdConfig = ad.SgdConfig(0.01, 0.9)
                  ) -> tuple[VladParams, list[float]]:
    """Hinge triplet loss on cosine similarity over (anchor, positive, negative) local descriptor sets."""
    w, b, c = ad.param(params.w, "vlad.w"), ad.param(params.b, "vlad.b"), ad.param(params.c, "vlad.c")
    opt = ad.SGD([w, b, c], config)
    history = []
    for _ in range(steps):
        opt.zero_grad()
        loss = Tensor(0.0)
        for xa, xp, xn in triplets:
            va, vp, vn = (vlad_aggregate_t(x, w, b, c) for x in (xa, xp, xn))
            loss = loss + ad.relu(margin - ad.reduce_sum(va * vp) + ad.reduce_sum(va * vn))
        loss = loss / float(len(triplets))
        history.append(loss.item())
        ad.backward(loss)
        opt.step()
    return VladParams(w.data, b.data, c.data), history


# ---------------------------------------------------------------- GPRD files

_DB_MAGIC = b"GPRD"
_DB_VERSION = 1


def db_to_bytes(db: MapDatabase) -> bytes:
    parts = [_DB_MAGIC, struct.pack("<IIII", _DB_VERSION, db.k, db.d, len(db))]
    for e in db.entries:
        name = e.soil.encode("utf-8")
        parts.append(struct.pack("<Idd", e.id, e.x, e.y))
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(np.asarray(e.descriptor, dtype="<f4").tobytes())
    return b"".join(parts)


def write_db(path, db: MapDatabase) -> None:
    atomic_write_bytes(path, db_to_bytes(db))


def read_db(path) -> MapDatabase:
    """Load a database; float32 descriptors are re-normalized to unit length."""
    with open(path, "rb") as fh:
        r = Reader(fh.read(), str(path))
    r.expect_magic(_DB_MAGIC)
    version = r.u32()
    if version != _DB_VERSION:
        raise FormatError(f"unsupported database version {version}", r.offset - 4)
    k, d, n = r.u32(), r.u32(), r.u32()
    db = MapDatabase(k, d)
    for _ in range(n):
        at = r.offset
        eid = r.u32()
        x, y = r.f64(), r.f64()
        soil = r.string()
        v = r.array("<f4", k * d).astype(np.float64)
        nv = np.sqrt(np.dot(v, v))
        if nv == 0 or not np.isfinite(nv):
            raise FormatError(f"entry {eid} has a zero or non-finite descriptor", at)
        try:
            db.add(DbEntry(eid, x, y, soil, v / nv))
        except ValueError as exc:
            raise FormatError(str(exc), at) from None
    r.expect_end()
    return db


def recall_csv(rows: Sequence[tuple[str, float | None, float]]) -> str:
    lines = ["soil,noise_snr_db,recall"]
    for soil, snr, rec in rows:
        lines.append(f"{soil},{'' if snr is None else repr(float(snr))},{rec!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- recall protocol

@dataclass(frozen=True)
class SurveyConfig:
    """A cluttered plot surveyed on a regular grid of database positions."""

    spacing: float = 0.025
    cols: int = 20
    rows: int = 10
    n_objects: int = 40
    margin: float = 0.2  # clutter extends this far beyond the grid
    max_depth: float = 1.0
    snr_db: float = 20.0
    jitter: float = 0.5  # query offset radius as a fraction of the spacing

    def to_dict(self) -> dict:
        return asdict(self)


def survey_positions(survey: SurveyConfig) -> np.ndarray:
    s = survey.spacing
    return grid_positions(((0.0, survey.cols * s), (0.0, survey.rows * s)), s, s / 2)


def survey_scene(seed: int, soil: str | SoilMaterial, survey: SurveyConfig = SurveyConfig()) -> Scene:
    """Small buried clutter over the survey area; the geometry depends on ``seed`` only."""
    w, h, m = survey.cols * survey.spacing, survey.rows * survey.spacing, survey.margin
    cfg = SceneConfig(extent=((-m, w + m), (-m, h + m), (0.0, survey.max_depth)),
                      min_objects=survey.n_objects, max_objects=survey.n_objects,
                      sphere_radius=(0.03, 0.1), box_half=(0.03, 0.1), cylinder_radius=(0.02, 0.05),
                      cylinder_half_length=(0.1, 0.3), max_retries=20000)
    scene = generate_scene(seed, cfg)
    material = soil if isinstance(soil, SoilMaterial) else SOILS[soil]
    return replace(scene, soil=material)


@dataclass
class RecallResult:
    soil: str
    duplicated: float
    noisy: float
    snr_db: float
    db: MapDatabase
    params: VladParams


def recall_experiment(scene: Scene, survey: SurveyConfig = SurveyConfig(),
                      cfg: LocalizationConfig = LocalizationConfig(), seed: int = 0) -> RecallResult:
    """Database over the survey grid, then two query sets.

    The first repeats the database positions without noise; the second is
    jittered within ``jitter * spacing`` and carries white noise at
    ``snr_db``.
    """
    pos = survey_positions(survey)
    db, params = build_database(scene, pos, cfg, seed=seed)
    dup = recall_at_1(make_queries(scene, pos, params, cfg), db)
    qpos = jitter_positions(pos, survey.jitter * survey.spacing, seed=seed + 1)
    noisy = recall_at_1(make_queries(scene, qpos, params, cfg, snr_db=survey.snr_db, seed=seed + 2), db)
    return RecallResult(scene.soil.name, dup, noisy, survey.snr_db, db, params)
