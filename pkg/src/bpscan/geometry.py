"""
Rigid transforms in SE(2).

A :class:`Pose` stores a 2x2 rotation matrix and a translation vector. Points
and normals are handled in homogeneous coordinates (last entry 1 for points,
0 for directions) so the same 3x3 matrix acts on both.

Convention used throughout the package: a sensor pose ``T`` maps sensor-frame
coordinates into the world frame. The relative pose between a source scan and
a destination scan is the transform taking source-frame points into the
destination frame, ``inverse(T_dest) @ T_source``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: Spatial dimension of the implemented system.
N_DIM = 2

# Composition chains longer than this are projected back onto SO(2).
_REORTHO_EVERY = 64


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to ``m`` in Frobenius norm (polar decomposition)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def wrap_angle(theta):
    """Wrap angles to the half-open interval (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Pose:
    """Element of SE(2). Immutable.

    :param rotation: 2x2 rotation matrix
    :param translation: translation vector in meters
    """

    rotation: np.ndarray
    translation: np.ndarray
    chain: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(N_DIM)
        if r.shape != (N_DIM, N_DIM):
            raise ValueError(f"rotation must be {N_DIM}x{N_DIM}, got {r.shape}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(N_DIM), np.zeros(N_DIM))

    @classmethod
    def from_xytheta(cls, x: float, y: float, theta: float) -> "Pose":
        return cls(rotation_matrix(theta), [x, y])

    @property
    def theta(self) -> float:
        """Heading in (-pi, pi], from the first column of the rotation."""
        return wrap_angle(math.atan2(self.rotation[1, 0], self.rotation[0, 0]))

    @property
    def x(self) -> float:
        return float(self.translation[0])

    @property
    def y(self) -> float:
        return float(self.translation[1])

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix."""
        m = np.eye(N_DIM + 1)
        m[:N_DIM, :N_DIM] = self.rotation
        m[:N_DIM, N_DIM] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 2) array of Cartesian points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        """Rotate an (N, 2) array of direction vectors (translation ignored)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Matrix product ``a @ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    chain = a.chain + b.chain + 1
    if chain > _REORTHO_EVERY:
        r = nearest_rotation(r)
        chain = 0
    return Pose(r, a.rotation @ b.translation + a.translation, chain)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation, p.chain)


def relative_pose(source: Pose, dest: Pose) -> Pose:
    """``dest @ inverse(source)``, so that ``compose(result, source) == dest``."""
    return compose(dest, inverse(source))


def scan_relative_pose(sensor_source: Pose, sensor_dest: Pose) -> Pose:
    """Transform taking source-scan coordinates into destination-scan coordinates.

    Sensor poses map sensor frame to world. The matrices that map world into
    the sensor frames are their inverses, and the relative pose of those is
    ``inverse(T_dest) @ T_source``.
    """
    return relative_pose(inverse(sensor_source), inverse(sensor_dest))


def to_chart(p: Pose) -> np.ndarray:
    """(x, y, theta) coordinates with theta in (-pi, pi]."""
    return np.array([p.x, p.y, p.theta])


def from_chart(v) -> Pose:
    x, y, theta = (float(c) for c in v)
    return Pose.from_xytheta(x, y, theta)


def to_homogeneous(points, is_direction: bool = False) -> np.ndarray:
    """Append the homogeneous flag: 0 for directions (normals), 1 for points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    flag = 0.0 if is_direction else 1.0
    return np.hstack([pts, np.full((pts.shape[0], 1), flag)])


def transform_point(p: Pose, pt) -> np.ndarray:
    """Apply ``p`` to homogeneous point(s) ``pt`` of shape (3,) or (N, 3).

    Directions (last entry 0) are only rotated; points (last entry 1) are also
    translated.
    """
    h = np.asarray(pt, dtype=float)
    last = h[..., -1]
    if not np.all((last == 0.0) | (last == 1.0)):
        raise ValueError("homogeneous flag must be 0 (direction) or 1 (point)")
    return h @ p.matrix().T


def translation_error(est: Pose, truth: Pose) -> float:
    """Relative translation error ``||t_est - t_true|| / ||t_true||``."""
    norm = float(np.linalg.norm(truth.translation))
    if norm == 0.0:
        raise UndefinedMetricError("ground-truth translation is zero")
    return float(np.linalg.norm(est.translation - truth.translation)) / norm


def rotation_error(est: Pose, truth: Pose) -> float:
    """Geodesic rotation error per meter travelled (rad/m).

    The planar rotations are embedded as 3x3 matrices with a unit third
    diagonal entry, so ``(trace - 1) / 2`` is the cosine of the angle.
    """
    norm = float(np.linalg.norm(truth.translation))
    if norm == 0.0:
        raise UndefinedMetricError("ground-truth translation is zero")
    r = np.eye(3)
    r[:2, :2] = est.rotation.T @ truth.rotation
    cos_angle = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle)) / norm


class UndefinedMetricError(ValueError):
    """Raised when a drift metric is requested for a stationary frame."""
