"""From detected hyperbola vertices to a world-frame sparse cloud, and on to a dense map."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .fileio import FormatError, atomic_write_text
from .forward import depth_to_time, time_to_depth, wave_velocity
from .geometry import Pose, interpolate_pose, validate_rotation
from .parnet import Detection
from .scene import Scene, SoilMaterial, Trajectory, top_surface_depth

DOWN = np.array([0.0, 0.0, 1.0])


def depth_to_world(d: float, pose: Pose) -> np.ndarray:
    """World point of depth ``d`` straight below the antenna: R (0, 0, d) + P."""
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    validate_rotation(pose.rotation)
    return pose.rotation @ (d * DOWN) + pose.position


def ray_direction(angle: float, orientation) -> np.ndarray:
    """Down axis tilted by ``angle`` (radians) toward the horizontal heading ``orientation``."""
    h = np.asarray(orientation, dtype=np.float64).reshape(3).copy()
    h[2] = 0.0
    n = np.linalg.norm(h)
    if n == 0:
        if angle != 0:
            raise ValueError("a tilted ray needs a horizontal heading")
        return DOWN.copy()
    return np.cos(angle) * DOWN + np.sin(angle) * (h / n)


def depth_to_world_general(d: float, angle: float, orientation, pose: Pose) -> np.ndarray:
    """R f(d, angle, orientation) + P with f = d * ray_direction(angle, orientation)."""
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    validate_rotation(pose.rotation)
    return pose.rotation @ (d * ray_direction(angle, orientation)) + pose.position


@dataclass(frozen=True)
class DepthSample:
    depth: float
    trace: float
    bscan_id: str | int
    confidence: float = 1.0
    detection_id: int = 0
    label: int = -1

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("depth samples must have positive depth")


@dataclass
class SparseCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


@dataclass
class SurveyLine:
    """One B-scan's detections together with its trajectory."""

    bscan_id: str | int
    detections: Sequence[Detection]
    trajectory: Trajectory
    dt: float


def vertex_sample(det: Detection, dt: float, material: SoilMaterial, bscan_id, detection_id: int,
                  label: int = -1) -> DepthSample:
    """Vertex (trace, sample) of a detection to a depth sample."""
    vx, vy = det.vertex
    return DepthSample(float(time_to_depth(vy * dt, material)), float(vx), bscan_id,
                       det.confidence, detection_id, label)


def build_sparse_cloud(lines: Sequence[SurveyLine], material: SoilMaterial, dedup_tol: float = 1e-6,
                       labels: dict | None = None) -> SparseCloud:
    """Union of all vertex points in (bscan id, detection id) order, deduplicated.

    ``labels`` optionally maps (bscan_id, detection_id) to a class label.
    """
    pts, samples = [], []
    for line in lines:
        poses = list(line.trajectory.poses)
        for k, det in enumerate(line.detections):
            lab = labels.get((line.bscan_id, k), -1) if labels else -1
            s = vertex_sample(det, line.dt, material, line.bscan_id, k, lab)
            if not 0 <= s.trace <= len(poses) - 1:
                raise IndexError(f"B-scan {line.bscan_id!r}: no pose for trace {s.trace:.3f} "
                                 f"(have {len(poses)} poses)")
            pts.append(depth_to_world(s.depth, interpolate_pose(poses, s.trace)))
            samples.append(s)
    if not pts:
        return SparseCloud()
    P = np.array(pts)
    keep = _dedup(P, dedup_tol)
    return SparseCloud(P[keep], [samples[i] for i in keep])


def _dedup(P: np.ndarray, tol: float) -> list[int]:
    """Indices of points kept when later duplicates within ``tol`` are dropped."""
    tree = cKDTree(P)
    dropped = np.zeros(len(P), dtype=bool)
    keep = []
    for i in range(len(P)):
        if dropped[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(P[i], tol):
            if j > i:
                dropped[j] = True
    return keep


def oracle_detections(scene: Scene, trajectory: Trajectory, dt: float,
                      half_width: int = 3) -> tuple[list[Detection], list[int]]:
    """Detector stand-in built from the true top profile.

    Each contiguous run of traces over the same object yields one detection
    whose apex is the run's shallowest point, timed to the nearest sample.
    Keypoints lie on the point-target hyperbola through that apex.  Returns
    the detections and the class label of each.
    """
    pos = trajectory.positions
    depth, owner = top_surface_depth(scene, pos[:, 0], pos[:, 1], return_index=True)
    v = wave_velocity(scene.soil)
    dets, labs = [], []
    n = len(pos)
    i = 0
    while i < n:
        if owner[i] < 0:
            i += 1
            continue
        j = i
        while j + 1 < n and owner[j + 1] == owner[i]:
            j += 1
        run = depth[i:j + 1]
        lo = np.flatnonzero(run <= run.min() + 1e-12)
        apex = i + int(lo[len(lo) // 2])
        r = run.min() - pos[apex, 2]
        y = float(np.round(depth_to_time(r, scene.soil) / dt))
        xs = np.array([apex - half_width, apex + half_width, apex], dtype=np.float64)
        off = (xs - apex) * trajectory.spacing
        ys = 2.0 * np.sqrt((y * dt * v / 2) ** 2 + off ** 2) / (v * dt)
        ys[2] = y
        box = [apex, (y + ys[0]) / 2 + 1.0, 2.0 * half_width, ys[0] - y + 2.0]
        dets.append(Detection(box, np.stack([xs, ys], axis=1)))
        labs.append(scene.primitives[owner[i]].label)
        i = j + 1
    return dets, labs


def oracle_sparse_cloud(scene: Scene, trajectories: Sequence[Trajectory], dt: float) -> SparseCloud:
    """Sparse cloud of a survey from oracle detections, with class labels."""
    lines, labels = [], {}
    for b, traj in enumerate(trajectories):
        dets, labs = oracle_detections(scene, traj, dt)
        lines.append(SurveyLine(b, dets, traj, dt))
        labels.update({(b, k): lab for k, lab in enumerate(labs)})
    return build_sparse_cloud(lines, scene.soil, labels=labels)


def contour_cloud(scene: Scene, trajectories: Sequence[Trajectory], dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Top-contour samples under every trace of a survey, depth quantized to the time grid.

    Returns world points and class labels.
    """
    v = wave_velocity(scene.soil)
    pts, labs = [], []
    for traj in trajectories:
        pos = traj.positions
        depth, owner = top_surface_depth(scene, pos[:, 0], pos[:, 1], return_index=True)
        hit = owner >= 0
        r = depth[hit] - pos[hit, 2]
        r = np.round(2 * r / (v * dt)) * (v * dt / 2)
        pts.append(np.stack([pos[hit, 0], pos[hit, 1], pos[hit, 2] + r], axis=1))
        labs.append(np.array([scene.primitives[k].label for k in owner[hit]], dtype=np.int64))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(pts), np.concatenate(labs)


# ---------------------------------------------------------------- dense map

@dataclass
class DenseMap:
    points: np.ndarray
    labels: np.ndarray


def complete_map(cloud, model, seed: int = 0) -> DenseMap:
    """Run the completion network on a sparse cloud and label every dense point.

    Each dense point takes the predicted label of its nearest input point.
    """
    from . import gprnet  # deferred: gprnet imports this module for data generation

    pts = cloud.points if isinstance(cloud, SparseCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 8:
        raise ValueError(f"completion needs at least 8 points, got {len(pts)}")
    res = gprnet.predict(model, pts, seed=seed)
    from .kernels import nearest_sq_dists
    _, idx = nearest_sq_dists(res.completion, res.input_points)
    return DenseMap(res.completion, res.labels[idx])


# ---------------------------------------------------------------- pose CSV

POSE_HEADER = ["index", "Px", "Py", "Pz"] + [f"r{i}{j}" for i in range(1, 4) for j in range(1, 4)]


def write_poses(path, poses: Sequence[Pose]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_HEADER)
    for p in poses:
        w.writerow([p.index] + [repr(float(v)) for v in p.position] + [repr(float(v)) for v in p.rotation.reshape(-1)])
    atomic_write_text(path, buf.getvalue())


def read_poses(path) -> list[Pose]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != POSE_HEADER:
        raise FormatError(f"{path}: pose CSV header must be {','.join(POSE_HEADER)}", 0)
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(POSE_HEADER):
            raise FormatError(f"{path}: line {n} has {len(row)} fields, expected {len(POSE_HEADER)}")
        try:
            vals = [float(v) for v in row[1:]]
            out.append(Pose(np.array(vals[3:]).reshape(3, 3), np.array(vals[:3]), index=int(row[0])))
        except ValueError as exc:
            raise FormatError(f"{path}: line {n}: {exc}") from None
    return out
