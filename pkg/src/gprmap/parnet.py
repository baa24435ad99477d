"""Hyperbola detection: grid decoding, multi-task losses and parabola fitting.

Grid tensors are indexed ``[gy, gx, anchor, channel]``; a cell's origin in
grid units is ``(gx, gy)``.  Channels hold the raw network outputs::

    0       objectness logit
    1..4    box (t'x, t'y, t'w, t'h)
    5..10   keypoints (v'x, v'y) for left, right, top

Image coordinates follow the B-scan: x is the trace index and y the time
sample, so y grows downward and a hyperbola's apex is its smallest y.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from . import autodiff as ad
from .autodiff import Tensor
from .forward import BScan, attenuation, wave_velocity

log = logging.getLogger(__name__)

N_KPT = 3
N_OUT = 5 + 2 * N_KPT
KPT_NAMES = ("left", "right", "top")


@dataclass(frozen=True)
class GridSpec:
    image_size: tuple[int, int] = (128, 128)  # (h, w) in pixels
    strides: tuple[int, ...] = (8, 16, 32, 64)
    anchors: dict = field(default_factory=lambda: {8: (24.0, 12.0), 16: (24.0, 12.0),
                                                   32: (24.0, 12.0), 64: (24.0, 12.0)})
    weights: dict = field(default_factory=lambda: {8: 4.0, 16: 1.0, 32: 0.25, 64: 0.0625})
    n_anchors: int = 1
    literal_keypoint_scale: bool = False  # use A_w for both keypoint axes

    def __post_init__(self):
        h, w = self.image_size
        for s in self.strides:
            if h % s or w % s:
                raise ValueError(f"image size {self.image_size} not divisible by stride {s}")
            aw, ah = self.anchors[s]
            if aw <= 0 or ah <= 0:
                raise ValueError("anchors must be positive")
            if s not in self.weights:
                raise ValueError(f"no grid weight for stride {s}")

    def grid_shape(self, s: int) -> tuple[int, int]:
        return self.image_size[0] // s, self.image_size[1] // s

    def kpt_scale(self, s: int) -> tuple[float, float]:
        aw, ah = self.anchors[s]
        return (aw / s, aw / s) if self.literal_keypoint_scale else (aw / s, ah / s)


# ---------------------------------------------------------------- decoding

def _sig(x):
    return ad.sigmoid(x)


def decode_box_t(raw: Tensor, anchor, stride: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Tensor version; ``raw`` has shape (n, 4).  Returns grid-unit (x, y, w, h) offsets."""
    aw, ah = anchor
    tx = 2.0 * _sig(raw[:, 0]) - 0.5
    ty = 2.0 * _sig(raw[:, 1]) - 0.5
    tw = (aw / stride) * ad.square(2.0 * _sig(raw[:, 2]))
    th = (ah / stride) * ad.square(2.0 * _sig(raw[:, 3]))
    return tx, ty, tw, th


def decode_keypoints_t(raw: Tensor, scale: tuple[float, float]) -> tuple[list[Tensor], list[Tensor]]:
    """Tensor version; ``raw`` has shape (n, 2K).  Returns per-keypoint x and y offsets."""
    sx, sy = scale
    xs = [sx * (4.0 * _sig(raw[:, 2 * k]) - 2.0) for k in range(N_KPT)]
    ys = [sy * (4.0 * _sig(raw[:, 2 * k + 1]) - 2.0) for k in range(N_KPT)]
    return xs, ys


def decode_box(raw, anchor, stride: int, cell=(0, 0)) -> np.ndarray:
    """Raw (t'x, t'y, t'w, t'h) to grid-unit (cx, cy, w, h) with the centre offset by ``cell``."""
    r = np.asarray(raw, dtype=np.float64).reshape(-1, 4)
    tx, ty, tw, th = (t.data for t in decode_box_t(Tensor(r), anchor, stride))
    out = np.stack([tx + cell[0], ty + cell[1], tw, th], axis=-1)
    return out[0] if np.ndim(raw) == 1 else out


def decode_keypoints(raw, anchor, stride: int, cell=(0, 0), literal: bool = False) -> np.ndarray:
    """Raw keypoint outputs (2K,) to K grid-unit points offset by ``cell``."""
    aw, ah = anchor
    scale = (aw / stride, aw / stride) if literal else (aw / stride, ah / stride)
    r = np.asarray(raw, dtype=np.float64).reshape(-1, 2 * N_KPT)
    xs, ys = decode_keypoints_t(Tensor(r), scale)
    out = np.stack([np.stack([x.data + cell[0] for x in xs], -1),
                    np.stack([y.data + cell[1] for y in ys], -1)], axis=-1)
    return out[0] if np.ndim(raw) == 1 else out


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def encode_box(t, anchor, stride: int) -> np.ndarray:
    """Inverse of :func:`decode_box` for cell-relative (tx, ty, tw, th)."""
    t = np.asarray(t, dtype=np.float64)
    aw, ah = anchor
    tx, ty, tw, th = t[..., 0], t[..., 1], t[..., 2], t[..., 3]
    if np.any((tx <= -0.5) | (tx >= 1.5) | (ty <= -0.5) | (ty >= 1.5)):
        raise ValueError("box centre offset outside the decodable range (-0.5, 1.5)")
    if np.any((tw <= 0) | (th <= 0) | (tw >= 4 * aw / stride) | (th >= 4 * ah / stride)):
        raise ValueError("box size outside the decodable range (0, 4A/s)")
    return np.stack([_logit((tx + 0.5) / 2), _logit((ty + 0.5) / 2),
                     _logit(np.sqrt(tw * stride / aw) / 2), _logit(np.sqrt(th * stride / ah) / 2)], axis=-1)


def encode_keypoints(v, scale: tuple[float, float]) -> np.ndarray:
    """Inverse of keypoint decoding for cell-relative points of shape (..., K, 2)."""
    v = np.asarray(v, dtype=np.float64)
    sx, sy = scale
    ux = v[..., 0] / sx
    uy = v[..., 1] / sy
    if np.any(np.abs(ux) >= 2) or np.any(np.abs(uy) >= 2):
        raise ValueError("keypoint offset outside the decodable range (-2A/s, 2A/s)")
    raw = np.stack([_logit((ux + 2) / 4), _logit((uy + 2) / 4)], axis=-1)
    return raw.reshape(*v.shape[:-2], 2 * v.shape[-2])


# ---------------------------------------------------------------- IoU

def iou(box1, box2) -> float:
    """IoU of two centre-format (cx, cy, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in box1)
    bx, by, bw, bh = (float(v) for v in box2)
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_t(pred: tuple[Tensor, ...], target: np.ndarray) -> Tensor:
    """Differentiable IoU of predicted (x, y, w, h) tensors against constant boxes (n, 4)."""
    px, py, pw, ph = pred
    tx, ty, tw, th = (Tensor(target[:, k]) for k in range(4))
    iw = ad.relu(ad.minimum(px + 0.5 * pw, tx + 0.5 * tw) - ad.maximum(px - 0.5 * pw, tx - 0.5 * tw))
    ih = ad.relu(ad.minimum(py + 0.5 * ph, ty + 0.5 * th) - ad.maximum(py - 0.5 * ph, ty - 0.5 * th))
    inter = iw * ih
    union = pw * ph + tw * th - inter
    return inter / union


# ---------------------------------------------------------------- targets

@dataclass
class StrideTargets:
    obj: np.ndarray   # (H, W, Na)
    box: np.ndarray   # (H, W, Na, 4) cell-relative centre + grid-unit size
    kpts: np.ndarray  # (H, W, Na, K, 2) cell-relative
    vis: np.ndarray   # (H, W, Na, K)
    abc: np.ndarray   # (H, W, Na, 3) parabola through the cell-relative keypoints
    abc_valid: np.ndarray  # (H, W, Na)


@dataclass
class TargetGrid:
    strides: dict[int, StrideTargets]
    skipped: int = 0


def empty_targets(spec: GridSpec) -> TargetGrid:
    out = {}
    for s in spec.strides:
        H, W = spec.grid_shape(s)
        na = spec.n_anchors
        out[s] = StrideTargets(np.zeros((H, W, na)), np.zeros((H, W, na, 4)),
                               np.zeros((H, W, na, N_KPT, 2)), np.zeros((H, W, na, N_KPT)),
                               np.zeros((H, W, na, 3)), np.zeros((H, W, na), dtype=bool))
    return TargetGrid(out)


def assigned_cells(cx: float, cy: float, stride: int, grid_shape: tuple[int, int]) -> list[tuple[int, int]]:
    """Containing cell plus the x- and y-neighbours nearest the centre, clipped to the grid."""
    H, W = grid_shape
    gx, gy = cx / stride, cy / stride
    i, j = int(np.floor(gx)), int(np.floor(gy))
    i, j = min(i, W - 1), min(j, H - 1)
    di = -1 if gx - i < 0.5 else 1
    dj = -1 if gy - j < 0.5 else 1
    return [(a, b) for a, b in ((i, j), (i + di, j), (i, j + dj)) if 0 <= a < W and 0 <= b < H]


def build_targets(detections: Sequence["Detection"], spec: GridSpec) -> TargetGrid:
    """Assign each object to three cells per stride; out-of-image objects are skipped."""
    tg = empty_targets(spec)
    h, w = spec.image_size
    for det in detections:
        cx, cy, bw, bh = det.box
        if not (0 <= cx < w and 0 <= cy < h):
            tg.skipped += 1
            continue
        for s in spec.strides:
            st = tg.strides[s]
            sx, sy = spec.kpt_scale(s)
            for gx, gy in assigned_cells(cx, cy, s, spec.grid_shape(s)):
                rel = np.asarray(det.keypoints) / s - [gx, gy]
                in_img = (det.keypoints[:, 0] >= 0) & (det.keypoints[:, 0] < w) & \
                         (det.keypoints[:, 1] >= 0) & (det.keypoints[:, 1] < h)
                reach = (np.abs(rel[:, 0]) < 2 * sx) & (np.abs(rel[:, 1]) < 2 * sy)
                vis = (in_img & reach).astype(np.float64)
                st.obj[gy, gx, 0] = 1.0
                st.box[gy, gx, 0] = (cx / s - gx, cy / s - gy, bw / s, bh / s)
                st.kpts[gy, gx, 0] = np.where(vis[:, None] > 0, rel, 0.0)
                st.vis[gy, gx, 0] = vis
                par = fit_parabola(*rel) if _distinct_x(rel) else None
                if par is not None and vis.all():
                    st.abc[gy, gx, 0] = (par.a, par.b, par.c)
                    st.abc_valid[gy, gx, 0] = True
                else:
                    st.abc[gy, gx, 0] = 0.0
                    st.abc_valid[gy, gx, 0] = False
    if tg.skipped:
        log.warning("build_targets: skipped %d objects outside the image", tg.skipped)
    return tg


def encode_targets(tg: TargetGrid, spec: GridSpec, background: float = -8.0) -> dict[int, np.ndarray]:
    """Raw grid outputs whose decoding reproduces the targets exactly (positives only)."""
    out = {}
    for s, st in tg.strides.items():
        H, W = spec.grid_shape(s)
        raw = np.zeros((H, W, spec.n_anchors, N_OUT))
        raw[..., 0] = background
        pos = st.obj > 0
        if pos.any():
            raw[pos, 0] = -background
            raw[pos, 1:5] = encode_box(st.box[pos], spec.anchors[s], s)
            raw[pos, 5:] = encode_keypoints(st.kpts[pos], spec.kpt_scale(s))
        out[s] = raw
    return out


# ---------------------------------------------------------------- parabolas

@dataclass(frozen=True)
class Parabola:
    a: float
    b: float
    c: float

    @property
    def valid(self) -> bool:
        return abs(self.a) > 1e-12

    @property
    def vertex(self) -> tuple[float, float]:
        if not self.valid:
            raise ValueError("degenerate parabola (a = 0) has no vertex")
        return -self.b / (2 * self.a), self.c - self.b * self.b / (4 * self.a)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.a * x * x + self.b * x + self.c


class DegenerateFit(ValueError):
    pass


def _distinct_x(pts, tol: float = 1e-9) -> bool:
    xs = np.asarray(pts, dtype=np.float64)[:, 0]
    return bool(min(abs(xs[0] - xs[1]), abs(xs[0] - xs[2]), abs(xs[1] - xs[2])) >= tol)


def fit_parabola(p_left, p_right, p_top) -> Parabola:
    """Exact parabola y = a x^2 + b x + c through three points."""
    pts = np.array([p_left, p_right, p_top], dtype=np.float64)
    if not _distinct_x(pts):
        raise DegenerateFit(f"parabola needs three distinct x coordinates, got {pts[:, 0]}")
    V = np.stack([pts[:, 0] ** 2, pts[:, 0], np.ones(3)], axis=1)
    a, b, c = np.linalg.solve(V, pts[:, 1])
    return Parabola(float(a), float(b), float(c))


def fit_parabola_t(xs: Sequence[Tensor], ys: Sequence[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Closed-form three-point fit on tensors of shape (n,)."""
    x1, x2, x3 = xs
    y1, y2, y3 = ys
    den = (x1 - x2) * (x1 - x3) * (x2 - x3)
    a = (x3 * (y2 - y1) + x2 * (y1 - y3) + x1 * (y3 - y2)) / den
    b = (x3 * x3 * (y1 - y2) + x2 * x2 * (y3 - y1) + x1 * x1 * (y2 - y3)) / den
    c = (x2 * x3 * (x2 - x3) * y1 + x3 * x1 * (x3 - x1) * y2 + x1 * x2 * (x1 - x2) * y3) / den
    return a, b, c


# ---------------------------------------------------------------- losses

def _positive_rows(pred: Tensor, st: StrideTargets):
    flat = ad.reshape(pred, (-1, N_OUT))
    idx = np.flatnonzero(st.obj.reshape(-1) > 0)
    return flat, idx


def _check_layout(preds: dict, tg: TargetGrid) -> None:
    if set(preds) != set(tg.strides):
        raise ValueError(f"prediction strides {sorted(preds)} != target strides {sorted(tg.strides)}")
    for s, p in preds.items():
        want = tg.strides[s].obj.shape + (N_OUT,)
        if p.shape != want:
            raise ValueError(f"stride {s}: prediction shape {p.shape} != expected {want}")


def _pred_iou(rows: Tensor, st: StrideTargets, spec: GridSpec, s: int) -> Tensor:
    box = decode_box_t(rows[:, 1:5], spec.anchors[s], s)
    tgt = st.box.reshape(-1, 4)[np.flatnonzero(st.obj.reshape(-1) > 0)]
    return iou_t(box, tgt)


def loss_obj(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> Tensor:
    """Weighted BCE of objectness against p_o * IoU, averaged per grid."""
    _check_layout(preds, tg)
    total = Tensor(0.0)
    for s in spec.strides:
        flat, idx = _positive_rows(preds[s], tg.strides[s])
        logits = flat[:, 0]
        bce = ad.reduce_sum(ad.softplus(logits))
        if idx.size:
            rows = ad.take(flat, idx)
            bce = bce - ad.reduce_sum(rows[:, 0] * _pred_iou(rows, tg.strides[s], spec, s))
        total = total + (spec.weights[s] / logits.size) * bce
    return total


def loss_obj_floor(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> float:
    """Entropy floor of :func:`loss_obj` given the current predicted boxes."""
    total = 0.0
    for s in spec.strides:
        flat, idx = _positive_rows(preds[s], tg.strides[s])
        if idx.size:
            y = _pred_iou(ad.take(flat, idx), tg.strides[s], spec, s).data
            y = np.clip(y, 1e-300, 1.0)
            ent = -(y * np.log(y) + np.where(y < 1, (1 - y) * np.log1p(-np.minimum(y, 1 - 1e-16)), 0.0))
            total += spec.weights[s] / flat.shape[0] * float(ent.sum())
    return total


def loss_box(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> Tensor:
    """Per grid, the mean of 1 - IoU over object cells, summed over grids."""
    _check_layout(preds, tg)
    total = Tensor(0.0)
    for s in spec.strides:
        flat, idx = _positive_rows(preds[s], tg.strides[s])
        if idx.size == 0:
            continue
        io = _pred_iou(ad.take(flat, idx), tg.strides[s], spec, s)
        total = total + ad.reduce_mean(1.0 - io)
    return total


def loss_kps(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> Tensor:
    """Visibility-gated Euclidean keypoint error, averaged over keypoint-bearing cells."""
    _check_layout(preds, tg)
    total = Tensor(0.0)
    for s in spec.strides:
        st = tg.strides[s]
        flat, idx = _positive_rows(preds[s], st)
        if idx.size == 0:
            continue
        vis = st.vis.reshape(-1, N_KPT)[idx]
        bearing = vis.sum(axis=1) > 0
        if not bearing.any():
            continue
        tk = st.kpts.reshape(-1, N_KPT, 2)[idx]
        xs, ys = decode_keypoints_t(ad.take(flat, idx)[:, 5:], spec.kpt_scale(s))
        acc = Tensor(0.0)
        for k in range(N_KPT):
            d = ad.sqrt(ad.square(xs[k] - tk[:, k, 0]) + ad.square(ys[k] - tk[:, k, 1]))
            acc = acc + ad.reduce_sum(d * vis[:, k])
        total = total + acc / float(bearing.sum())
    return total


def loss_parabola(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> Tensor:
    """L1 distance between fitted and target (a, b, c), per-grid mean over fittable cells."""
    _check_layout(preds, tg)
    total = Tensor(0.0)
    for s in spec.strides:
        st = tg.strides[s]
        flat, idx = _positive_rows(preds[s], st)
        if idx.size == 0:
            continue
        rows = ad.take(flat, idx)
        xs, ys = decode_keypoints_t(rows[:, 5:], spec.kpt_scale(s))
        xv = np.stack([x.data for x in xs], axis=1)
        ok = st.abc_valid.reshape(-1)[idx] & (np.abs(xv[:, 0] - xv[:, 1]) >= 1e-9) & \
            (np.abs(xv[:, 0] - xv[:, 2]) >= 1e-9) & (np.abs(xv[:, 1] - xv[:, 2]) >= 1e-9)
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        xs = [ad.take(x, sel) for x in xs]
        ys = [ad.take(y, sel) for y in ys]
        a, b, c = fit_parabola_t(xs, ys)
        tabc = st.abc.reshape(-1, 3)[idx][sel]
        l1 = ad.abs_(a - tabc[:, 0]) + ad.abs_(b - tabc[:, 1]) + ad.abs_(c - tabc[:, 2])
        total = total + ad.reduce_mean(l1)
    return total


@dataclass(frozen=True)
class LossWeights:
    obj: float = 1.0
    box: float = 0.05
    kps: float = 0.1
    fit: float = 0.1

    def __post_init__(self):
        if min(self.obj, self.box, self.kps, self.fit) < 0:
            raise ValueError("loss weights must be non-negative")


def loss_components(preds: dict[int, Tensor], tg: TargetGrid, spec: GridSpec) -> dict[str, Tensor]:
    return {"obj": loss_obj(preds, tg, spec), "box": loss_box(preds, tg, spec),
            "kps": loss_kps(preds, tg, spec), "fit": loss_parabola(preds, tg, spec)}


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> Tensor:
    return (weights.obj * ad._as_tensor(components["obj"]) + weights.box * ad._as_tensor(components["box"])
            + weights.kps * ad._as_tensor(components["kps"]) + weights.fit * ad._as_tensor(components["fit"]))


# ---------------------------------------------------------------- detections

@dataclass
class Detection:
    """Box (cx, cy, w, h) and keypoints (left, right, top) in image pixels."""

    box: np.ndarray
    keypoints: np.ndarray
    confidence: float = 1.0
    bscan_id: str | int | None = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(N_KPT, 2)
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError("detection box needs positive width and height")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def parabola(self) -> Parabola | None:
        try:
            return fit_parabola(*self.keypoints)
        except DegenerateFit:
            return None

    @property
    def vertex(self) -> tuple[float, float]:
        """Fitted vertex, or the top keypoint when the fit is degenerate or flat."""
        par = self.parabola
        if par is not None and par.valid:
            vx, vy = par.vertex
            lo, hi = self.keypoints[:, 0].min(), self.keypoints[:, 0].max()
            if lo <= vx <= hi:
                return float(vx), float(vy)
        return float(self.keypoints[2, 0]), float(self.keypoints[2, 1])

    def to_dict(self) -> dict:
        par = self.parabola
        return {"bscan_id": self.bscan_id, "box": self.box.tolist(), "keypoints": self.keypoints.tolist(),
                "confidence": self.confidence,
                "parabola": None if par is None else {"a": par.a, "b": par.b, "c": par.c},
                "vertex": list(self.vertex)}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(np.asarray(d["box"]), np.asarray(d["keypoints"]), float(d["confidence"]), d.get("bscan_id"))


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression; equal confidences keep input order."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    keep: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(iou(d.box, k.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


def decode_predictions(preds: dict[int, np.ndarray], spec: GridSpec, conf_threshold: float = 0.5,
                       iou_threshold: float = 0.5) -> list[Detection]:
    """Grid outputs to pixel-space detections followed by NMS."""
    dets = []
    for s in spec.strides:
        raw = np.asarray(preds[s])
        conf = 1.0 / (1.0 + np.exp(-raw[..., 0]))
        for gy, gx, a in zip(*np.nonzero(conf >= conf_threshold)):
            r = raw[gy, gx, a]
            box = decode_box(r[1:5], spec.anchors[s], s, cell=(gx, gy)) * s
            kp = decode_keypoints(r[5:], spec.anchors[s], s, cell=(gx, gy),
                                  literal=spec.literal_keypoint_scale) * s
            dets.append(Detection(box, kp, float(conf[gy, gx, a])))
    return nms(dets, iou_threshold)


# ---------------------------------------------------------------- classical detector

@dataclass(frozen=True)
class ClassicalConfig:
    rel_threshold: float = 0.15
    abs_threshold: float = 0.0
    floor: float = 1e-4  # relative to the raw envelope peak; drops transform leakage
    gain: bool = True
    edge: int = 3  # samples at either end of the window treated as truncated
    peak_gap: int = 4  # minimum sample distance between peaks in one trace
    max_miss: int = 2  # traces a ridge may skip, e.g. where two hyperbolas cross
    max_curvature: float | None = 3.0  # multiple of a point target's apex curvature
    min_separation: int = 3
    min_half_width: int = 1
    max_half_width: int | None = None


def _subsample_peak(col: np.ndarray, k: int) -> float:
    if 0 < k < col.size - 1:
        a, b, c = col[k - 1], col[k], col[k + 1]
        den = a - 2 * b + c
        if den < 0:
            return k + 0.5 * (a - c) / den
    return float(k)


def envelope(bscan: BScan, gain: bool = True) -> np.ndarray:
    """Hilbert envelope, optionally compensated for spreading and attenuation."""
    T = bscan.data.shape[0]
    # zero padding keeps the FFT wrap-around away from late samples
    env = np.abs(signal.hilbert(bscan.data, N=2 * T, axis=0))[:T]
    if gain:
        r = wave_velocity(bscan.material) * np.arange(env.shape[0]) * bscan.dt / 2.0
        r = np.maximum(r, r[-1] * 0.02 if r[-1] > 0 else 1.0)
        g = r * r * np.exp(2.0 * attenuation(bscan.material) * r)
        env = env * (g / g.max())[:, None]
    return env


@dataclass
class _Ridge:
    cols: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    miss: int = 0

    def predict(self, j: int) -> float:
        if len(self.cols) < 2:
            return self.ys[-1]
        slope = (self.ys[-1] - self.ys[-2]) / (self.cols[-1] - self.cols[-2])
        return self.ys[-1] + slope * (j - self.cols[-1])


def _track_ridges(peaks: list[list[tuple[float, int]]], tol: float, max_miss: int,
                  max_slope: float = 0.0) -> list[_Ridge]:
    """Link per-trace envelope peaks into ridges, extrapolating through short gaps.

    A ridge with a single point has no slope estimate yet, so it accepts any
    continuation up to ``max_slope`` samples per trace.
    """
    done: list[_Ridge] = []
    active: list[_Ridge] = []
    for j, cand in enumerate(peaks):
        preds = [r.predict(j) for r in active]
        tols = [tol if len(r.cols) >= 2 else max(tol, 1.1 * max_slope * (j - r.cols[-1])) for r in active]
        pairs = sorted((abs(p - y), a, c) for a, p in enumerate(preds)
                       for c, (y, _) in enumerate(cand) if abs(p - y) <= tols[a])
        used_a, used_c = set(), set()
        for _, a, c in pairs:
            if a in used_a or c in used_c:
                continue
            used_a.add(a)
            used_c.add(c)
            r = active[a]
            r.cols.append(j)
            r.ys.append(cand[c][0])
            r.ks.append(cand[c][1])
            r.miss = 0
        still = []
        for a, r in enumerate(active):
            if a not in used_a:
                r.miss += 1
            (still if r.miss <= max_miss else done).append(r)
        for c, (y, k) in enumerate(cand):
            if c not in used_c:
                still.append(_Ridge([j], [y], [k]))
        active = still
    return done + active


def _ridge_minima(ys: np.ndarray, sep: int) -> list[int]:
    """Indices of plateau centres that are minima within +-sep ridge points."""
    out = []
    n = ys.size
    i = 0
    while i < n:
        k = i
        # sub-sample peak times agree to about 1e-6 samples on symmetric limbs
        while k + 1 < n and abs(ys[k + 1] - ys[i]) < 1e-6:
            k += 1
        lo, hi = max(0, i - sep), min(n - 1, k + sep)
        if ys[i] <= ys[lo:hi + 1].min() + 1e-6:
            out.append((i + k) // 2)
        i = k + 1
    return out


def _rising_run(ys: np.ndarray, i: int, step: int) -> int:
    """Index of the last ridge point from ``i`` over which the ridge is non-decreasing outward."""
    while 0 <= i + step < ys.size and ys[i + step] >= ys[i] - 1e-9:
        i += step
    return i


def _smooth_apex(cols: np.ndarray, ys: np.ndarray, i: int, slope: float, factor: float) -> bool:
    """Reject cusps where two crossing limbs meet.

    A point target at apex sample y0 has ridge curvature slope**2 / y0 per
    trace squared; larger objects are flatter.  A cusp is much sharper.
    """
    m = min(2, i, ys.size - 1 - i)
    if m < 1 or cols[i + m] - cols[i] != m or cols[i] - cols[i - m] != m:
        return True
    curv = (ys[i - m] + ys[i + m] - 2 * ys[i]) / (m * m)
    return curv <= factor * slope * slope / max(ys[i], 1.0) + 0.25


def detect_classical(bscan: BScan, config: ClassicalConfig = ClassicalConfig()) -> list[Detection]:
    """Envelope threshold, tracked ridges, one detection per ridge minimum.

    Every trace contributes the local envelope maxima inside the threshold
    mask.  Peaks are linked across traces into ridges; each local minimum of
    a ridge is an apex and the endpoints sit symmetrically on either side, as
    far out as the ridge keeps rising.  Keypoints are (trace, sample) pixels.
    """
    raw_env = envelope(bscan, gain=False)
    # gain only shapes the mask and the energy; ridge times come from the raw
    # envelope so the growing gain does not drag peaks later
    env = envelope(bscan, config.gain) if config.gain else raw_env
    peak = float(env.max()) if env.size else 0.0
    if peak <= 0 or peak <= config.abs_threshold:
        return []
    thr = max(config.rel_threshold * peak, config.abs_threshold)
    mask = (env > thr) & (raw_env > config.floor * raw_env.max())
    T, n = env.shape
    peaks = []
    for j in range(n):
        col = np.where(mask[:, j], raw_env[:, j], 0.0)
        ks, _ = signal.find_peaks(col, distance=config.peak_gap)
        peaks.append([(_subsample_peak(col, int(k)), int(k)) for k in ks
                      if config.edge <= k < T - config.edge])
    # steepest hyperbola limb moves 2 * spacing / (v * dt) samples per trace
    slope = 2.0 * bscan.trace_spacing / (wave_velocity(bscan.material) * bscan.dt)
    ridges = _track_ridges(peaks, max(2.0, 0.5 * slope), config.max_miss, slope)
    energy = [float(sum(env[k, c] ** 2 for c, k in zip(r.cols, r.ks))) for r in ridges]
    e_max = max(energy) if energy else 1.0
    dets: list[Detection] = []
    for r, e in zip(ridges, energy):
        if len(r.cols) < 3:
            continue
        cols = np.asarray(r.cols, dtype=np.float64)
        ys = np.asarray(r.ys)
        for i in _ridge_minima(ys, config.min_separation):
            il, ir = _rising_run(ys, i, -1), _rising_run(ys, i, +1)
            xa = cols[i]
            if config.max_curvature is not None and not _smooth_apex(cols, ys, i, slope, config.max_curvature):
                continue
            left, right = xa - cols[il], cols[ir] - xa
            if min(left, right) >= config.min_half_width:
                half = min(left, right)
                if config.max_half_width is not None:
                    half = min(half, config.max_half_width)
                xs = [xa - half, xa + half]
            elif max(left, right) >= 2 * config.min_half_width and (
                    (right < config.min_half_width and ir == ys.size - 1 and cols[ir] == n - 1)
                    or (left < config.min_half_width and il == 0 and cols[il] == 0)):
                # the scan border cuts one limb off
                far = cols[il] if left > right else cols[ir]
                xs = sorted([far, (far + xa) / 2])
            else:
                continue
            kp = np.array([[xs[0], np.interp(xs[0], cols, ys)], [xs[1], np.interp(xs[1], cols, ys)],
                           [xa, ys[i]]])
            if not _distinct_x(kp):
                continue
            k = r.ks[i]
            run = np.flatnonzero(~mask[:, int(xa)])
            above, below = run[run < k], run[run > k]
            pulse = max(2.0, ((below[0] if below.size else T) - (above[-1] if above.size else -1)) / 2.0)
            x0, x1 = kp[:, 0].min(), kp[:, 0].max()
            y0 = max(0.0, ys[i] - pulse)
            y1 = min(T - 1.0, kp[:, 1].max() + pulse)
            box = [(x0 + x1) / 2, (y0 + y1) / 2, max(x1 - x0, 1.0), max(y1 - y0, 1.0)]
            dets.append(Detection(box, kp, float(e / e_max)))
    dets.sort(key=lambda d: (d.keypoints[2, 0], d.keypoints[2, 1]))
    return dets


# ---------------------------------------------------------------- toy trainable head

def bscan_image(bscan: BScan, size: tuple[int, int]) -> tuple[np.ndarray, tuple[float, float]]:
    """Resample a B-scan to an (h, w) image in [-1, 1]; returns the image and (sx, sy) scales."""
    D = bscan.data
    T, n = D.shape
    h, w = size
    ys = (np.arange(h) + 0.5) * T / h - 0.5
    xs = (np.arange(w) + 0.5) * n / w - 0.5
    img = ndimage.map_coordinates(D, np.meshgrid(ys, xs, indexing="ij"), order=1, mode="nearest")
    m = np.abs(img).max()
    return (img / m if m > 0 else img), (w / n, h / T)


def scale_detection(det: Detection, sx: float, sy: float) -> Detection:
    """Map a detection from B-scan (trace, sample) to image pixel coordinates."""
    k = det.keypoints.copy()
    k[:, 0] = (k[:, 0] + 0.5) * sx - 0.5
    k[:, 1] = (k[:, 1] + 0.5) * sy - 0.5
    b = det.box.copy()
    b[0], b[1] = (b[0] + 0.5) * sx - 0.5, (b[1] + 0.5) * sy - 0.5
    b[2], b[3] = b[2] * sx, b[3] * sy
    return Detection(b, k, det.confidence, det.bscan_id)


class ToyDetector:
    """Space-to-depth at one stride, a 3x3 conv and a 1x1 conv to the grid outputs."""

    def __init__(self, spec: GridSpec, hidden: int = 16, seed: int = 0):
        if len(spec.strides) != 1:
            raise ValueError("the toy detector predicts a single stride")
        self.spec = spec
        s = spec.strides[0]
        rng = np.random.default_rng(seed)
        cin = s * s
        self.w1 = ad.param(rng.normal(0, np.sqrt(2.0 / (cin * 9)), (hidden, cin, 3, 3)), "conv1.w")
        self.b1 = ad.param(np.zeros(hidden), "conv1.b")
        self.w2 = ad.param(rng.normal(0, 0.01, (N_OUT * spec.n_anchors, hidden, 1, 1)), "conv2.w")
        self.b2 = ad.param(np.zeros(N_OUT * spec.n_anchors), "conv2.b")

    @property
    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.data = np.asarray(state[p.name], dtype=np.float64).copy()

    def forward(self, image: np.ndarray) -> dict[int, Tensor]:
        s = self.spec.strides[0]
        h, w = self.spec.image_size
        H, W = h // s, w // s
        x = np.asarray(image, dtype=np.float64).reshape(H, s, W, s).transpose(1, 3, 0, 2).reshape(s * s, H, W)
        f = ad.relu(ad.conv2d(Tensor(x), self.w1, self.b1, padding=1))
        o = ad.conv2d(f, self.w2, self.b2)
        o = ad.transpose(o, (1, 2, 0))
        return {s: ad.reshape(o, (H, W, self.spec.n_anchors, N_OUT))}


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale accumulated gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_state: dict, history: list[float]):
        super().__init__(message)
        self.last_state = last_state
        self.history = history


def train_toy_detector(dataset: Sequence[tuple[np.ndarray, TargetGrid]], spec: GridSpec,
                       weights: LossWeights = LossWeights(), config: ad.SgdConfig = ad.SgdConfig(0.01, 0.9),
                       steps: int = 500, hidden: int = 16, clip_norm: float | None = 5.0
                       ) -> tuple[ToyDetector, list[float]]:
    """Full-batch SGD on the weighted multi-task loss; returns the model and loss history.

    The three-point parabola fit has large gradients while predicted keypoints
    nearly share an x coordinate, so the global gradient norm is clipped.
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    model = ToyDetector(spec, hidden=hidden, seed=config.seed)
    opt = ad.SGD(model.params, config)
    history: list[float] = []
    for step in range(steps):
        last = {k: v.copy() for k, v in model.state_dict().items()}
        opt.zero_grad()
        try:
            loss = Tensor(0.0)
            for img, tg in dataset:
                loss = loss + total_loss(loss_components(model.forward(img), tg, spec), weights)
            loss = loss / float(len(dataset))
        except (ValueError, ZeroDivisionError) as exc:
            raise TrainingDiverged(f"loss became non-finite at step {step}: {exc}", last, history) from None
        history.append(loss.item())
        ad.backward(loss)
        if clip_norm is not None:
            clip_grad_norm(model.params, clip_norm)
        opt.step()
        if not all(np.all(np.isfinite(p.data)) for p in model.params):
            raise TrainingDiverged(f"parameters became non-finite at step {step}", last, history)
    return model, history
