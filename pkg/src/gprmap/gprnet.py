"""Toy point network for joint segmentation and completion of sparse GPR clouds.

A shared PointNet-style encoder (input and feature T-Nets, shared MLPs,
max-pooled global feature) feeds a per-point segmentation decoder and a
three-resolution completion decoder.  All computation runs on the package's
reverse-mode autodiff, one scene per graph.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import nearest_sq_dists

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GprNetConfig:
    n_points: int = 256
    n_classes: int = 3
    enc: tuple[int, int, int, int] = (64, 64, 128, 1024)
    seg: tuple[int, int, int] = (512, 512, 128)
    fc: tuple[int, int, int] = (1024, 512, 256)
    resolutions: tuple[int, int, int] = (64, 192, 768)
    tnet_hidden: tuple[int, int, int] = (64, 128, 64)
    radius: float = 0.1  # neighbourhood of the local features; 0 gives plain per-point features
    use_tnet: bool = True
    use_seg: bool = True
    use_local: bool = True
    seg_completion: bool = True
    beta: float = 1.0
    gamma: float = 0.001
    anchor_hidden: int = 128  # width of the per-anchor offset MLP of segmentation-aware completion

    def __post_init__(self):
        m1, m2, m3 = self.resolutions
        if not (0 < m1 <= m2 <= m3):
            raise ValueError("resolutions must satisfy 0 < M1 <= M2 <= M3")
        if m2 % m1:
            raise ValueError("M2 must be a multiple of M1")
        if m3 % m1:
            raise ValueError("M3 must be a multiple of M1")
        if self.n_points < 8 or self.n_classes < 1:
            raise ValueError("need n_points >= 8 and n_classes >= 1")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    @property
    def seg_aware(self) -> bool:
        return self.use_seg and self.seg_completion

    @property
    def n_dense(self) -> int:
        return sum(self.resolutions)

    @property
    def concat_width(self) -> int:
        return self.enc[1] + self.enc[3] if self.use_local else self.enc[1]

    @classmethod
    def reduced(cls, **kw) -> "GprNetConfig":
        """Narrow widths for gradient checks."""
        base = dict(n_points=8, enc=(8, 8, 16, 16), seg=(16, 16, 8), fc=(16, 8, 8),
                    resolutions=(4, 8, 16), tnet_hidden=(8, 8, 8), anchor_hidden=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GprNetConfig":
        d = dict(d)
        for k in ("enc", "seg", "fc", "resolutions", "tnet_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


ABLATIONS = {
    "none": dict(use_tnet=False, use_seg=False, use_local=False),
    "tnet": dict(use_tnet=True, use_seg=False, use_local=False),
    "tnet+seg": dict(use_tnet=True, use_seg=True, use_local=False),
    "full": dict(use_tnet=True, use_seg=True, use_local=True),
}


# ---------------------------------------------------------------- parameters

def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))


def _tnet_shapes(prefix: str, k: int, hidden: tuple[int, int, int]) -> list[tuple[str, tuple, str]]:
    h1, h2, h3 = hidden
    return [(f"{prefix}.w1", (k, h1), "he"), (f"{prefix}.b1", (h1,), "zero"),
            (f"{prefix}.w2", (h1, h2), "he"), (f"{prefix}.b2", (h2,), "zero"),
            (f"{prefix}.w3", (h2, h3), "he"), (f"{prefix}.b3", (h3,), "zero"),
            (f"{prefix}.head.w", (h3, k * k), "zero"), (f"{prefix}.head.b", (k * k,), "zero")]


def param_shapes(cfg: GprNetConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for every tensor of the configuration, in a fixed order."""
    e1, e2, e3, e4 = cfg.enc
    s1, s2, s3 = cfg.seg
    f1, f2, f3 = cfg.fc
    m1, m2, m3 = cfg.resolutions
    out = []
    if cfg.use_tnet:
        out += _tnet_shapes("tnet_in", 3, cfg.tnet_hidden)
    out += [("enc.w1", (3, e1), "he"), ("enc.b1", (e1,), "zero"),
            ("enc.w2", (e1, e2), "he"), ("enc.b2", (e2,), "zero")]
    if cfg.use_tnet:
        out += _tnet_shapes("tnet_feat", e2, cfg.tnet_hidden)
    out += [("enc.w3", (e2, e3), "he"), ("enc.b3", (e3,), "zero"),
            ("enc.w4", (e3, e4), "he"), ("enc.b4", (e4,), "zero")]
    if cfg.use_seg:
        out += [("seg.w1", (cfg.concat_width, s1), "he"), ("seg.b1", (s1,), "zero"),
                ("seg.w2", (s1, s2), "he"), ("seg.b2", (s2,), "zero"),
                ("seg.w3", (s2, s3), "he"), ("seg.b3", (s3,), "zero"),
                ("seg.head.w", (s3, cfg.n_classes), "small"), ("seg.head.b", (cfg.n_classes,), "zero")]
    out += [("comp.fc1.w", (e4, f1), "he"), ("comp.fc1.b", (f1,), "zero"),
            ("comp.fc2.w", (f1, f2), "he"), ("comp.fc2.b", (f2,), "zero"),
            ("comp.fc3.w", (f2, f3), "he"), ("comp.fc3.b", (f3,), "zero"),
            ("comp.coarse.w", (f3, 3 * m1), "small"), ("comp.coarse.b", (3 * m1,), "zero")]
    out += [("comp.mid.w", (f2, 3 * m2), "small"), ("comp.mid.b", (3 * m2,), "zero")]
    out += [("comp.fine.w", (f1, 3 * m3), "small"), ("comp.fine.b", (3 * m3,), "zero")]
    if cfg.seg_aware:
        out += [("comp.anchor.w", (s3, cfg.anchor_hidden), "he"), ("comp.anchor.b", (cfg.anchor_hidden,), "zero"),
                ("comp.mid.local.w", (cfg.anchor_hidden, 3 * (m2 // m1)), "zero"),
                ("comp.fine.local.w", (cfg.anchor_hidden, 3 * (m3 // m1)), "zero")]
    return out


def init_params(cfg: GprNetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "he":
            params[name] = _he(rng, *shape)
        elif kind == "small":
            params[name] = rng.normal(0.0, 0.01, shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class GprNetOutput:
    seg_logits: Tensor | None
    completion: Tensor
    transform_in: Tensor | None
    transform_feat: Tensor | None
    local: Tensor
    global_feat: Tensor
    concat: Tensor


class GprNet:
    def __init__(self, cfg: GprNetConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        raw = init_params(cfg, seed) if params is None else params
        want = {n: s for n, s, _ in param_shapes(cfg)}
        if set(raw) != set(want):
            raise ValueError(f"parameter names do not match the configuration: "
                             f"missing {sorted(set(want) - set(raw))}, extra {sorted(set(raw) - set(want))}")
        for n, s in want.items():
            if tuple(np.shape(raw[n])) != s:
                raise ValueError(f"{n}: shape {np.shape(raw[n])} != {s}")
        self.params = {n: ad.param(np.array(raw[n], dtype=np.float64), n) for n, _, _ in param_shapes(cfg)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data = np.array(state[n], dtype=np.float64)

    @property
    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    # -- building blocks

    def _layer(self, x: Tensor, w: str, b: str, relu: bool = True) -> Tensor:
        y = ad.add_bias(ad.matmul(x, self.params[w]), self.params[b])
        return ad.relu(y) if relu else y

    def tnet(self, x: Tensor, prefix: str) -> Tensor:
        """k x k transform: shared MLP, max-pool, zero-initialised head, plus identity."""
        k = x.shape[1]
        h = self._layer(x, f"{prefix}.w1", f"{prefix}.b1")
        h = self._layer(h, f"{prefix}.w2", f"{prefix}.b2")
        g = ad.max_over_rows(h)
        g = self._layer(g, f"{prefix}.w3", f"{prefix}.b3")
        r = self._layer(g, f"{prefix}.head.w", f"{prefix}.head.b", relu=False)
        return ad.reshape(r, (k, k)) + Tensor(np.eye(k))

    def encode(self, pts: np.ndarray | Tensor):
        cfg = self.cfg
        x = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts, dtype=np.float64))
        if x.shape[0] < 8 or x.shape[1] != 3:
            raise ValueError(f"encoder needs an (N >= 8, 3) point set, got {x.shape}")
        a_in = a_feat = None
        if cfg.use_tnet:
            a_in = self.tnet(x, "tnet_in")
            x = ad.matmul(x, a_in)
        if cfg.radius > 0:
            # shared MLP on offsets to every neighbour within the radius, max-pooled per point
            i, j = ball_pairs(pts.data if isinstance(pts, Tensor) else np.asarray(pts, dtype=np.float64),
                              cfg.radius)
            rel = (ad.take(x, j) - ad.take(x, i)) * (1.0 / cfg.radius)
            h = self._layer(rel, "enc.w1", "enc.b1")
            h = ad.segment_max(self._layer(h, "enc.w2", "enc.b2"), i, x.shape[0])
        else:
            h = self._layer(x, "enc.w1", "enc.b1")
            h = self._layer(h, "enc.w2", "enc.b2")
        if cfg.use_tnet:
            a_feat = self.tnet(h, "tnet_feat")
            h = ad.matmul(h, a_feat)
        local = h
        g = self._layer(h, "enc.w3", "enc.b3")
        g = self._layer(g, "enc.w4", "enc.b4")
        glob = ad.max_over_rows(g)
        concat = ad.concat([local, ad.tile_rows(glob, local.shape[0])], axis=1)
        return local, glob, concat, a_in, a_feat

    def seg_hidden(self, feat: Tensor) -> Tensor:
        h = self._layer(feat, "seg.w1", "seg.b1")
        h = self._layer(h, "seg.w2", "seg.b2")
        return self._layer(h, "seg.w3", "seg.b3")

    def complete(self, glob: Tensor, pts: Tensor | None = None, hidden: Tensor | None = None) -> Tensor:
        """Coarse, mid and fine point sets stacked into an M x 3 array.

        Coarse points are farthest-point samples of the input moved by offsets
        from the last FC feature; mid and fine points are offsets around them
        from the earlier FC features.  With the segmentation decoder active,
        each coarse anchor's segmentation features pass through a small MLP
        that adds a correction to the offsets of its own mid and fine points.
        """
        m1, m2, m3 = self.cfg.resolutions
        f1 = self._layer(glob, "comp.fc1.w", "comp.fc1.b")
        f2 = self._layer(f1, "comp.fc2.w", "comp.fc2.b")
        f3 = self._layer(f2, "comp.fc3.w", "comp.fc3.b")
        anchors = farthest_point_sample(pts.data, m1)
        coarse = ad.reshape(self._layer(f3, "comp.coarse.w", "comp.coarse.b", relu=False), (m1, 3))
        coarse = ad.take(pts, anchors) + coarse
        h = None
        if self.cfg.seg_aware:
            h = self._layer(ad.take(hidden, anchors), "comp.anchor.w", "comp.anchor.b")
        mid = self._expand(coarse, f2, "comp.mid", m2 // m1, h)
        fine = self._expand(coarse, f1, "comp.fine", m3 // m1, h)
        return ad.concat([coarse, mid, fine], axis=0)

    def _expand(self, coarse: Tensor, feat: Tensor, name: str, k: int, h: Tensor | None) -> Tensor:
        m1 = coarse.shape[0]
        off = ad.reshape(self._layer(feat, f"{name}.w", f"{name}.b", relu=False), (m1, 3 * k))
        if h is not None:
            off = off + ad.matmul(h, self.params[f"{name}.local.w"])
        return ad.take(coarse, np.repeat(np.arange(m1), k)) + ad.reshape(off, (m1 * k, 3))

    def forward(self, pts) -> GprNetOutput:
        x = pts if isinstance(pts, Tensor) else Tensor(np.asarray(pts, dtype=np.float64))
        local, glob, concat, a_in, a_feat = self.encode(x)
        logits = hidden = None
        if self.cfg.use_seg:
            hidden = self.seg_hidden(concat if self.cfg.use_local else local)
            logits = self._layer(hidden, "seg.head.w", "seg.head.b", relu=False)
        comp = self.complete(glob, x, hidden)
        return GprNetOutput(logits, comp, a_in, a_feat, local, glob, concat)


def ball_pairs(pts: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """(i, j) index pairs with |p_j - p_i| <= radius, each point paired with itself, sorted by i then j."""
    d = pts[:, None, :] - pts[None, :, :]
    i, j = np.nonzero((d * d).sum(axis=2) <= radius * radius)
    return i, j


def farthest_point_sample(pts: np.ndarray, m: int) -> np.ndarray:
    """Indices of ``m`` farthest-point samples, independent of the input row order.

    The walk runs over the lexicographically sorted rows, starting from the
    smallest; ties go to the earlier sorted row.  Clouds with fewer distinct
    points than ``m`` repeat the walk.
    """
    order = np.lexsort(pts.T[::-1])
    p = pts[order]
    n = len(p)
    chosen = np.empty(m, dtype=np.int64)
    d = np.full(n, np.inf)
    cur = 0
    for i in range(m):
        chosen[i] = cur
        diff = p - p[cur]
        d = np.minimum(d, (diff * diff).sum(axis=1))
        cur = int(np.argmax(d))
        if d[cur] == 0.0:
            d[:] = np.inf  # exhausted distinct points: start over
            cur = 0 if i + 1 < m else cur
    return order[chosen]


def orthogonality_penalty(a: Tensor) -> Tensor:
    """Squared Frobenius norm of A A^T - I."""
    k = a.shape[0]
    d = ad.matmul(a, ad.transpose(a)) - Tensor(np.eye(k))
    return ad.reduce_sum(ad.square(d))


# ---------------------------------------------------------------- metrics

def _check_cloud(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
        raise ValueError(f"point cloud must be a nonempty (n, 3) array, got shape {a.shape}")
    return a


def pred_gt(pred, gt) -> float:
    """Mean squared distance from each predicted point to its nearest ground-truth point."""
    d, _ = nearest_sq_dists(_check_cloud(pred), _check_cloud(gt))
    return float(np.mean(d))


def gt_pred(pred, gt) -> float:
    """Mean squared distance from each ground-truth point to its nearest prediction."""
    return pred_gt(gt, pred)


def chamfer_distance(pred, gt) -> float:
    return pred_gt(pred, gt) + gt_pred(pred, gt)


def f_score(pred, gt, tau: float = 0.02) -> float:
    """Harmonic mean of precision and recall at distance threshold ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    a, b = _check_cloud(pred), _check_cloud(gt)
    da, _ = nearest_sq_dists(a, b)
    db, _ = nearest_sq_dists(b, a)
    p = float(np.mean(np.sqrt(da) <= tau))
    r = float(np.mean(np.sqrt(db) <= tau))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def chamfer_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable Chamfer distance; nearest neighbours are found outside the graph."""
    gt = np.ascontiguousarray(gt, dtype=np.float64)
    _, i_pg = nearest_sq_dists(pred.data, gt)
    _, i_gp = nearest_sq_dists(gt, pred.data)
    d1 = pred - Tensor(gt[i_pg])
    d2 = ad.take(pred, i_gp) - Tensor(gt)
    return ad.reduce_sum(ad.square(d1)) / float(len(pred.data)) + ad.reduce_sum(ad.square(d2)) / float(len(gt))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, m = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= m:
        raise ValueError("labels must be (N,) integers in [0, m)")
    ls = ad.reshape(ad.log_softmax(logits, axis=1), (n * m,))
    return -ad.reduce_mean(ad.take(ls, np.arange(n) * m + labels))


# ---------------------------------------------------------------- data

@dataclass
class Normalization:
    center: np.ndarray
    scale: float

    @classmethod
    def fit(cls, pts: np.ndarray) -> "Normalization":
        pts = np.asarray(pts, dtype=np.float64)
        ext = float((pts.max(axis=0) - pts.min(axis=0)).max())
        return cls(pts.mean(axis=0), ext if ext > 0 else 1.0)

    def apply(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) / self.scale

    def invert(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + self.center


@dataclass
class GprSample:
    """Sparse input and dense ground truth, both already normalized."""

    points: np.ndarray
    labels: np.ndarray
    gt_points: np.ndarray
    gt_labels: np.ndarray
    norm: Normalization | None = None
    scene_seed: int | None = None


def resample(pts: np.ndarray, n: int, rng: np.random.Generator, labels=None):
    """Exactly ``n`` rows: a random subset, or every row plus random repeats."""
    k = len(pts)
    if k >= n:
        idx = np.sort(rng.choice(k, n, replace=False))
    else:
        idx = np.concatenate([np.arange(k), np.sort(rng.choice(k, n - k, replace=True))])
    return (pts[idx], labels[idx]) if labels is not None else pts[idx]


@dataclass(frozen=True)
class DataConfig:
    line_spacing: float = 0.1
    trace_spacing: float = 0.02
    dt: float = 0.05e-9
    directions: tuple[str, ...] = ("x", "y")


def make_sample(scene, cfg: GprNetConfig, data: DataConfig = DataConfig(), seed: int = 0) -> GprSample:
    from .mapping import contour_cloud
    from .scene import generate_grid_trajectory, sample_surface_points

    (x0, x1), (y0, y1), _ = scene.extent
    trajs = generate_grid_trajectory(((x0, x1), (y0, y1)), data.line_spacing, data.trace_spacing,
                                     directions=data.directions)
    pts, labs = contour_cloud(scene, trajs, data.dt)
    if len(pts) < 8:
        raise ValueError(f"scene {scene.seed}: only {len(pts)} contour points")
    rng = np.random.default_rng(seed)
    pts, labs = resample(pts, cfg.n_points, rng, labs)
    gt = sample_surface_points(scene, cfg.n_dense, seed=seed)
    norm = Normalization.fit(pts)
    return GprSample(norm.apply(pts), labs, norm.apply(gt.points), gt.labels, norm, scene.seed)


def make_dataset(n_scenes: int, cfg: GprNetConfig, seed: int = 0, data: DataConfig = DataConfig(),
                 scene_config=None) -> list[GprSample]:
    """Three-class scenes holding one sphere, one box and one cylinder each."""
    from .scene import SceneConfig, generate_scene

    sc = scene_config or SceneConfig(one_of_each=True)
    out = []
    for k in range(n_scenes):
        s = seed * 100003 + k
        out.append(make_sample(generate_scene(s, sc), cfg, data, seed=s))
    return out


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    clip_norm: float | None = 10.0
    final_lr_fraction: float = 0.1  # cosine decay of the learning rate down to this share

    def lr_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.learning_rate
        f = 0.5 * (1.0 + math.cos(math.pi * epoch / (self.epochs - 1)))
        return self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * f)


class GprNetDiverged(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


def sample_loss(model: GprNet, s: GprSample) -> tuple[Tensor, dict]:
    cfg = model.cfg
    out = model.forward(s.points)
    cd = chamfer_loss(out.completion, s.gt_points)
    total = cd
    parts = {"cd": cd.item()}
    if cfg.use_seg:
        parts["logits"] = out.seg_logits.data
    if cfg.use_seg and cfg.beta > 0:
        ce = cross_entropy(out.seg_logits, s.labels)
        total = total + cfg.beta * ce
        parts["ce"] = ce.item()
    if out.transform_feat is not None and cfg.gamma > 0:
        reg = orthogonality_penalty(out.transform_feat)
        total = total + cfg.gamma * reg
        parts["reg"] = reg.item()
    return total, parts


def train_gprnet(train: Sequence[GprSample], cfg: GprNetConfig, tcfg: TrainConfig = TrainConfig(),
                 val: Sequence[GprSample] | None = None) -> tuple[GprNet, list[dict]]:
    """Mini-batch Adam with cosine learning-rate decay.

    With a validation set the returned parameters are those of the epoch
    with the lowest validation objective (the training loss evaluated on the
    validation scenes), and history starts with an ``epoch = -1`` record of
    the untrained model.
    """
    if not train:
        raise ValueError("training set is empty")
    for s in train:
        if s.labels.max(initial=0) >= cfg.n_classes:
            raise ValueError("sample labels exceed the configured number of classes")
    model = GprNet(cfg, seed=tcfg.seed)
    opt = ad.Adam(model.trainable, ad.AdamConfig(learning_rate=tcfg.learning_rate))
    rng = np.random.default_rng(tcfg.seed)
    val = list(val) if val else []
    history: list[dict] = []
    best, best_state = math.inf, model.state_dict()
    if val:
        history.append({"epoch": -1, **validation_record(model, val)})
        best = history[0]["val_loss"]
    for epoch in range(tcfg.epochs):
        opt.config = replace(opt.config, learning_rate=tcfg.lr_at(epoch))
        order = rng.permutation(len(train))
        losses = []
        for b0 in range(0, len(order), tcfg.batch_size):
            batch = order[b0:b0 + tcfg.batch_size]
            opt.zero_grad()
            for i in batch:
                try:
                    loss, _ = sample_loss(model, train[i])
                except (ValueError, ZeroDivisionError) as exc:
                    raise GprNetDiverged(f"epoch {epoch}: {exc}", history) from None
                ad.backward(loss * (1.0 / len(batch)))
                losses.append(loss.item())
            if tcfg.clip_norm is not None:
                _clip(model.trainable, tcfg.clip_norm)
            opt.step()
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            rec.update(validation_record(model, val))
            if rec["val_loss"] < best:
                best, best_state = rec["val_loss"], model.state_dict()
        history.append(rec)
        log.info("epoch %d %s", epoch, rec)
    if val:
        model.load_state_dict(best_state)
    return model, history


def validation_record(model: GprNet, val: Sequence[GprSample]) -> dict:
    """Mean validation objective, CD and (with a segmentation head) accuracy."""
    losses, cds, accs = [], [], []
    for s in val:
        loss, parts = sample_loss(model, s)
        losses.append(loss.item())
        cds.append(parts["cd"])
        if model.cfg.use_seg:
            accs.append(float(np.mean(np.argmax(parts["logits"], axis=1) == s.labels)))
    rec = {"val_loss": float(np.mean(losses)), "val_cd": float(np.mean(cds))}
    if accs:
        rec["val_acc"] = float(np.mean(accs))
    return rec


def _clip(params: Sequence[Tensor], max_norm: float) -> None:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


# ---------------------------------------------------------------- inference and evaluation

@dataclass
class Prediction:
    completion: np.ndarray
    labels: np.ndarray
    scores: np.ndarray | None
    input_points: np.ndarray


def predict_normalized(model: GprNet, pts: np.ndarray) -> Prediction:
    out = model.forward(pts)
    scores = None if out.seg_logits is None else out.seg_logits.data
    labels = np.zeros(len(pts), dtype=np.int64) if scores is None else np.argmax(scores, axis=1)
    return Prediction(out.completion.data, labels, scores, np.asarray(pts))


def predict(model: GprNet, pts: np.ndarray, seed: int = 0) -> Prediction:
    """World-frame prediction for an arbitrary-size cloud (resampled to the model's N)."""
    pts = np.asarray(pts, dtype=np.float64)
    x = resample(pts, model.cfg.n_points, np.random.default_rng(seed))
    norm = Normalization.fit(x)
    p = predict_normalized(model, norm.apply(x))
    return Prediction(norm.invert(p.completion), p.labels, p.scores, x)


def nn_densify(pts: np.ndarray, m: int) -> np.ndarray:
    """Baseline: input points plus midpoints to their nearest neighbours, cut to ``m`` rows."""
    pts = np.asarray(pts, dtype=np.float64)
    uniq = np.unique(pts, axis=0)
    k = max(1, min(len(uniq) - 1, int(np.ceil(m / len(uniq))) - 1))
    d2 = ((uniq[:, None, :] - uniq[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    mids = [(uniq + uniq[nn[:, j]]) / 2 for j in range(k)]
    out = np.concatenate([uniq] + mids)
    if len(out) < m:
        out = np.concatenate([out, out[np.arange(m - len(out)) % len(out)]])
    return out[:m]


METRIC_COLUMNS = ("CD", "PredGT", "GTPred", "FScore", "SegAcc")


def scene_metrics(completion, gt, labels_pred=None, labels_true=None, tau: float = 0.02) -> dict:
    pg, gp = pred_gt(completion, gt), gt_pred(completion, gt)
    acc = float("nan") if labels_pred is None else float(np.mean(np.asarray(labels_pred) == np.asarray(labels_true)))
    return {"CD": pg + gp, "PredGT": pg, "GTPred": gp, "FScore": f_score(completion, gt, tau), "SegAcc": acc}


def evaluate(model: GprNet | None, samples: Sequence[GprSample], tau: float = 0.02,
             baseline: bool = False) -> tuple[list[dict], dict]:
    """Per-scene and mean metrics; ``baseline`` scores nearest-neighbour densification instead."""
    rows = []
    for s in samples:
        if baseline:
            comp = nn_densify(s.points, len(s.gt_points))
            rows.append(scene_metrics(comp, s.gt_points, tau=tau))
        else:
            p = predict_normalized(model, s.points)
            rows.append(scene_metrics(p.completion, s.gt_points,
                                      p.labels if model.cfg.use_seg else None, s.labels, tau))
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_COLUMNS}
    return rows, mean


def metrics_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(float(r[k])) for k in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def ablation(train: Sequence[GprSample], val: Sequence[GprSample], base: GprNetConfig = GprNetConfig(),
             tcfg: TrainConfig = TrainConfig(), tau: float = 0.02) -> list[dict]:
    """Train the four encoder/decoder variants and report validation metrics for each."""
    out = []
    for name, flags in ABLATIONS.items():
        cfg = replace(base, **flags)
        model, _ = train_gprnet(train, cfg, tcfg, val)
        _, mean = evaluate(model, val, tau)
        out.append({"config": name, "tnet": cfg.use_tnet, "seg_decoder": cfg.use_seg,
                    "global_local": cfg.use_local, **mean})
    return out
