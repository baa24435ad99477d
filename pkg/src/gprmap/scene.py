"""Random buried scenes, survey trajectories and their geometric ground truth.

Coordinates are right-handed with x along track, y across track and z the
depth below the ground plane z = 0 (positive downward).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .fileio import FormatError, atomic_write_text
from .geometry import Pose

KINDS = ("sphere", "box", "cylinder")
DEFAULT_LABELS = {"sphere": 0, "box": 1, "cylinder": 2}


@dataclass(frozen=True)
class SoilMaterial:
    name: str
    relative_permittivity: float
    conductivity: float

    def __post_init__(self):
        if not self.relative_permittivity >= 1.0:
            raise ValueError(f"relative permittivity must be >= 1, got {self.relative_permittivity}")
        if not self.conductivity >= 0.0:
            raise ValueError(f"conductivity must be >= 0, got {self.conductivity}")


SOILS: dict[str, SoilMaterial] = {
    "sand": SoilMaterial("sand", 3.0, 0.02),
    "clay": SoilMaterial("clay", 10.0, 0.3),
    "loamy": SoilMaterial("loamy", 20.0, 0.5),
}


def get_soil(name: str, extra: dict | None = None) -> SoilMaterial:
    table = dict(SOILS)
    for k, v in (extra or {}).items():
        table[k] = v if isinstance(v, SoilMaterial) else SoilMaterial(k, float(v[0]), float(v[1]))
    try:
        return table[name]
    except KeyError:
        raise KeyError(f"unknown soil {name!r}; known: {sorted(table)}") from None


@dataclass(frozen=True)
class Primitive:
    """A buried solid.

    ``dims`` is ``(radius,)`` for spheres, ``(hx, hy, hz)`` half-extents for
    axis-aligned boxes and ``(radius, half_length)`` for cylinders, whose
    unit ``axis`` is also required.
    """

    kind: str
    center: tuple[float, float, float]
    dims: tuple[float, ...]
    label: int = 0
    axis: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        need = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if len(self.dims) != need or min(self.dims) <= 0:
            raise ValueError(f"{self.kind} needs {need} positive dims, got {self.dims}")
        if self.kind == "cylinder":
            if self.axis is None:
                raise ValueError("cylinder needs an axis")
            a = np.asarray(self.axis, dtype=np.float64)
            a = a / np.linalg.norm(a)
            if a[2] < 0:
                a = -a
            object.__setattr__(self, "axis", tuple(float(x) for x in a))
        if self.center[2] - self.vertical_half_extent() <= 0:
            raise ValueError("primitive must lie entirely below the ground plane")

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center)

    def vertical_half_extent(self) -> float:
        if self.kind == "sphere":
            return self.dims[0]
        if self.kind == "box":
            return self.dims[2]
        r, L = self.dims
        az = abs(self.axis[2])
        return r * np.sqrt(max(0.0, 1.0 - az * az)) + L * az

    def half_extents(self) -> np.ndarray:
        """Half-size of the axis-aligned bounding box."""
        if self.kind == "sphere":
            return np.full(3, self.dims[0])
        if self.kind == "box":
            return np.asarray(self.dims)
        r, L = self.dims
        a = np.asarray(self.axis)
        return L * np.abs(a) + r * np.sqrt(np.clip(1.0 - a * a, 0.0, None))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        h = self.half_extents()
        return self.c - h, self.c + h

    def surface_area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * np.pi * self.dims[0] ** 2
        if self.kind == "box":
            hx, hy, hz = self.dims
            return 8.0 * (hx * hy + hy * hz + hx * hz)
        r, L = self.dims
        return 2.0 * np.pi * r * 2.0 * L + 2.0 * np.pi * r * r

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(pts) - self.c
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", p, p) <= self.dims[0] ** 2
        if self.kind == "box":
            return np.all(np.abs(p) <= np.asarray(self.dims), axis=1)
        r, L = self.dims
        a = np.asarray(self.axis)
        t = p @ a
        perp = p - t[:, None] * a
        return (np.abs(t) <= L) & (np.einsum("ij,ij->i", perp, perp) <= r * r)

    def top_depth(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Depth of the first intersection of the vertical line at (x, y); NaN if missed."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cx, cy, cz = self.center
        u, v = x - cx, y - cy
        out = np.full(np.broadcast(x, y).shape, np.nan)
        if self.kind == "sphere":
            r = self.dims[0]
            rho2 = u * u + v * v
            hit = rho2 <= r * r
            out[hit] = cz - np.sqrt(r * r - rho2[hit])
            return out
        if self.kind == "box":
            hx, hy, hz = self.dims
            hit = (np.abs(u) <= hx) & (np.abs(v) <= hy)
            out[hit] = cz - hz
            return out
        return cz + _cylinder_top_offset(u, v, self.dims[0], self.dims[1], np.asarray(self.axis))


def _cylinder_top_offset(u, v, r, L, a, eps=1e-12):
    """Smallest s with (u, v, s) on a finite cylinder around the origin; NaN if none."""
    ax, ay, az = a
    q = u * ax + v * ay  # axial coordinate contribution of the horizontal offset
    best = np.full(np.shape(u), np.inf)
    # lateral surface: s^2 (1 - az^2) - 2 s az q + (u^2 + v^2 - q^2 - r^2) = 0
    A = 1.0 - az * az
    B = -2.0 * az * q
    C = u * u + v * v - q * q - r * r
    if A > eps:
        disc = B * B - 4.0 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for s in ((-B - sq) / (2.0 * A), (-B + sq) / (2.0 * A)):
            t = q + s * az
            good = ok & (np.abs(t) <= L + 1e-12)
            best = np.where(good & (s < best), s, best)
    # end caps: axial coordinate = +-L
    if abs(az) > eps:
        for cap in (-L, L):
            s = (cap - q) / az
            w = np.stack([u, v, s], axis=-1)
            perp = w - cap * np.asarray(a)
            inside = np.einsum("...i,...i->...", perp, perp) <= r * r + 1e-12
            best = np.where(inside & (s < best), s, best)
    return np.where(np.isfinite(best), best, np.nan)


@dataclass(frozen=True)
class Scene:
    extent: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    soil: SoilMaterial
    primitives: tuple[Primitive, ...] = ()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "extent": [list(e) for e in self.extent],
            "soil": asdict(self.soil),
            "seed": self.seed,
            "primitives": [
                {"kind": p.kind, "center": list(p.center), "dims": list(p.dims), "label": p.label,
                 "axis": None if p.axis is None else list(p.axis)}
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        try:
            prims = tuple(
                Primitive(p["kind"], tuple(p["center"]), tuple(p["dims"]), int(p.get("label", 0)),
                          None if p.get("axis") is None else tuple(p["axis"]))
                for p in d["primitives"]
            )
            return cls(extent=tuple(tuple(float(v) for v in e) for e in d["extent"]),
                       soil=SoilMaterial(**d["soil"]), primitives=prims, seed=int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed scene description: {exc}") from None


def save_scene(path, scene: Scene) -> None:
    atomic_write_text(path, json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")


def load_scene(path) -> Scene:
    from .fileio import read_json
    return Scene.from_dict(read_json(path))


@dataclass(frozen=True)
class SceneConfig:
    extent: tuple = ((0.0, 2.0), (0.0, 2.0), (0.0, 1.5))
    min_objects: int = 1
    max_objects: int = 5
    kinds: tuple[str, ...] = KINDS
    one_of_each: bool = False
    sphere_radius: tuple[float, float] = (0.08, 0.25)
    box_half: tuple[float, float] = (0.06, 0.25)
    box_half_z: tuple[float, float] = (0.04, 0.12)
    cylinder_radius: tuple[float, float] = (0.04, 0.12)
    cylinder_half_length: tuple[float, float] = (0.2, 0.6)
    cylinder_max_tilt_deg: float = 0.0
    min_top_depth: float = 0.1
    gap: float = 0.05
    soil: str = "sand"
    labels: dict = field(default_factory=lambda: dict(DEFAULT_LABELS))
    max_retries: int = 2000

    def __post_init__(self):
        for name in ("sphere_radius", "box_half", "box_half_z", "cylinder_radius", "cylinder_half_length"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive range, got {(lo, hi)}")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("object count range is invalid")


def _random_primitive(rng: np.random.Generator, kind: str, cfg: SceneConfig) -> Primitive:
    (x0, x1), (y0, y1), (z0, z1) = cfg.extent
    label = int(cfg.labels[kind])
    if kind == "sphere":
        dims = (rng.uniform(*cfg.sphere_radius),)
        axis = None
    elif kind == "box":
        dims = (rng.uniform(*cfg.box_half), rng.uniform(*cfg.box_half), rng.uniform(*cfg.box_half_z))
        axis = None
    else:
        dims = (rng.uniform(*cfg.cylinder_radius), rng.uniform(*cfg.cylinder_half_length))
        yaw = rng.uniform(0.0, np.pi)
        tilt = np.deg2rad(rng.uniform(-cfg.cylinder_max_tilt_deg, cfg.cylinder_max_tilt_deg))
        axis = (np.cos(yaw) * np.cos(tilt), np.sin(yaw) * np.cos(tilt), np.sin(tilt))
    # place the centre so the bounding box fits the extent
    proto = Primitive(kind, (0.0, 0.0, 10.0), dims, label, axis)
    h = proto.half_extents()
    zlo = max(z0, 0.0) + cfg.min_top_depth + h[2]
    lo = np.array([x0 + h[0], y0 + h[1], zlo])
    hi = np.array([x1 - h[0], y1 - h[1], z1 - h[2]])
    if np.any(hi < lo):
        raise _NoRoom()
    return Primitive(kind, tuple(rng.uniform(lo, hi)), dims, label, axis)


class _NoRoom(Exception):
    pass


def _separated(a: Primitive, b: Primitive, gap: float) -> bool:
    alo, ahi = a.bounds()
    blo, bhi = b.bounds()
    return bool(np.any((alo - bhi >= gap) | (blo - ahi >= gap)))


def generate_scene(seed: int, config: SceneConfig | None = None, count: int | None = None) -> Scene:
    """Random non-overlapping scene; identical (seed, config) give identical scenes.

    Objects are kept apart by at least ``config.gap`` along some axis of their
    bounding boxes, so every pair of surface points is at least that far apart.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    if cfg.one_of_each:
        kinds = list(cfg.kinds)
        extra = 0 if count is None else count - len(kinds)
        kinds += list(rng.choice(cfg.kinds, size=max(extra, 0)))
        rng.shuffle(kinds)
    else:
        n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if count is None else int(count)
        kinds = list(rng.choice(cfg.kinds, size=n)) if n else []
    placed: list[Primitive] = []
    for kind in kinds:
        for _ in range(cfg.max_retries):
            try:
                cand = _random_primitive(rng, str(kind), cfg)
            except _NoRoom:
                continue
            if all(_separated(cand, p, cfg.gap) for p in placed):
                placed.append(cand)
                break
        else:
            raise RuntimeError(f"could not place {len(kinds)} objects without overlap after "
                               f"{cfg.max_retries} attempts each")
    return Scene(extent=tuple(tuple(e) for e in cfg.extent), soil=get_soil(cfg.soil),
                 primitives=tuple(placed), seed=int(seed))


# ---------------------------------------------------------------- ground-truth oracles

def track_points(track, xs) -> tuple[np.ndarray, np.ndarray]:
    """Plan-view points ``origin + xs * direction`` for a track (origin, direction)."""
    origin, direction = track
    o = np.asarray(origin, dtype=np.float64)[:2]
    d = np.asarray(direction, dtype=np.float64)[:2]
    d = d / np.linalg.norm(d)
    xs = np.asarray(xs, dtype=np.float64)
    return o[0] + xs * d[0], o[1] + xs * d[1]


def top_surface_depth(scene: Scene, x, y, return_index: bool = False):
    """Shallowest object depth below arbitrary plan-view points (NaN where none)."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    depth = np.full(x.shape, np.nan)
    owner = np.full(x.shape, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        d = prim.top_depth(x, y)
        better = np.isfinite(d) & (np.isnan(depth) | (d < depth))
        depth = np.where(better, d, depth)
        owner = np.where(better, i, owner)
    return (depth, owner) if return_index else depth


def top_profile(scene: Scene, track, xs, return_index: bool = False):
    """Shallowest object depth below each track position (NaN where nothing is below).

    With ``return_index`` also returns the index of the primitive responsible
    (-1 where nothing is below).
    """
    px, py = track_points(track, xs)
    return top_surface_depth(scene, px, py, return_index)


def _orthonormal_pair(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def _sample_on(prim: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    c = prim.c
    if n == 0:
        return np.zeros((0, 3))
    if prim.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + prim.dims[0] * v
    if prim.kind == "box":
        hx, hy, hz = prim.dims
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([hx, hy, hz])
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        u[np.arange(n), axis] = sign * np.array([hx, hy, hz])[axis]
        return c + u
    r, L = prim.dims
    a = np.asarray(prim.axis)
    e1, e2 = _orthonormal_pair(a)
    lateral, cap = 4.0 * np.pi * r * L, np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = rng.uniform(-L, L, size=n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
    t = np.where(part == 1, -L, np.where(part == 2, L, t))
    return c + t[:, None] * a + rad[:, None] * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self) -> int:
        return len(self.points)


def sample_surface_points(scene: Scene, n: int, seed: int) -> LabeledPointCloud:
    """``n`` points uniformly distributed over all primitive surfaces, labelled per primitive."""
    if not scene.primitives:
        raise ValueError("cannot sample surface points of an empty scene")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    areas = np.array([p.surface_area() for p in scene.primitives])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, labels = [], []
    for prim, k in zip(scene.primitives, counts):
        pts.append(_sample_on(prim, int(k), rng))
        labels.append(np.full(int(k), prim.label))
    return LabeledPointCloud(np.concatenate(pts), np.concatenate(labels))


# ---------------------------------------------------------------- survey trajectories

@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]
    spacing: float

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("trajectory spacing must be positive")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses])

    @property
    def track(self) -> tuple[np.ndarray, np.ndarray]:
        """(origin, unit direction) of the line in plan view."""
        pos = self.positions
        if len(pos) < 2:
            return pos[0], np.array([1.0, 0.0, 0.0])
        d = pos[-1] - pos[0]
        return pos[0], d / np.linalg.norm(d)

    @property
    def along(self) -> np.ndarray:
        """Along-track coordinate of each pose measured from the first."""
        return np.arange(len(self.poses)) * self.spacing


def _line_offsets(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
    return lo + spacing * np.arange(n)


def generate_grid_trajectory(extent, line_spacing: float, trace_spacing: float, height: float = 0.0,
                             directions: Sequence[str] = ("x",)) -> list[Trajectory]:
    """Boustrophedon survey lines over the plan-view extent.

    Lines run along each requested axis ("x" and/or "y"); successive lines
    alternate direction.  The cart never rotates, so every pose has the
    identity rotation; ``height`` is the antenna height above ground.
    """
    if not (line_spacing > 0 and trace_spacing > 0):
        raise ValueError("spacings must be positive")
    (x0, x1), (y0, y1) = extent[0], extent[1]
    out: list[Trajectory] = []
    for direction in directions:
        if direction == "x":
            across, along_lo, along_hi = _line_offsets(y0, y1, line_spacing), x0, x1
        elif direction == "y":
            across, along_lo, along_hi = _line_offsets(x0, x1, line_spacing), y0, y1
        else:
            raise ValueError(f"unknown survey direction {direction!r}")
        ts = _line_offsets(along_lo, along_hi, trace_spacing)
        for k, c in enumerate(across):
            seq = ts if k % 2 == 0 else ts[::-1]
            if direction == "x":
                pts = [(t, c, -height) for t in seq]
            else:
                pts = [(c, t, -height) for t in seq]
            out.append(Trajectory(tuple(Pose(np.eye(3), p, index=i) for i, p in enumerate(pts)),
                                  trace_spacing))
    return out
