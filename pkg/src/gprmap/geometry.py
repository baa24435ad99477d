"""Rigid poses shared by the survey simulator and the mapping stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Pose:
    """Antenna pose: world point = rotation @ local + position."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    index: int = 0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        P = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", P)
        validate_rotation(R)
        if not np.all(np.isfinite(P)):
            raise ValueError("pose position must be finite")

    def apply(self, local: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(local, dtype=np.float64) + self.position

    def inverse_apply(self, world: np.ndarray) -> np.ndarray:
        return self.rotation.T @ (np.asarray(world, dtype=np.float64) - self.position)


def validate_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.linalg.norm(R.T @ R - np.eye(3)) >= tol or np.linalg.det(R) <= 0:
        raise ValueError("rotation is not orthonormal with det +1")


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def interpolate_pose(poses: list[Pose], u: float) -> Pose:
    """Pose at fractional index ``u``: linear in position, nearest-bracket rotation.

    Rotations along a survey line are constant in practice; when they differ,
    the bracketing rotations are blended and re-orthonormalised by SVD.
    """
    n = len(poses)
    if n == 0:
        raise ValueError("no poses to interpolate")
    if u < 0 or u > n - 1:
        raise IndexError(f"trace position {u} outside 0..{n - 1}")
    i0 = min(int(np.floor(u)), n - 1)
    i1 = min(i0 + 1, n - 1)
    w = u - i0
    if i0 == i1 or w == 0.0:
        return poses[i0]
    a, b = poses[i0], poses[i1]
    P = (1.0 - w) * a.position + w * b.position
    if np.array_equal(a.rotation, b.rotation):
        R = a.rotation
    else:
        U, _, Vt = np.linalg.svd((1.0 - w) * a.rotation + w * b.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U[:, -1] *= -1
            R = U @ Vt
    return Pose(R, P, index=a.index)
