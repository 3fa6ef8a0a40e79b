"""Point-cloud containers, fixed-radius neighborhoods, PCA normals and cloud files."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLOUD_HEADER = "# bp-scanmatch cloud v1"

MIN_NEIGHBORS = 3


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (N, 2) array of points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


@dataclass(frozen=True)
class SourceCloud:
    """Scan points in the source sensor frame, shape (N_S, 2)."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class SurfaceCloud:
    """Destination points paired with unit normals.

    ``valid`` marks points whose normal could be estimated; use
    :meth:`valid_only` to get the surface set used for inference.
    """

    points: np.ndarray
    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points).copy()
        nrm = np.asarray(self.normals, dtype=float).reshape(-1, 2).copy()
        val = np.asarray(self.valid, dtype=bool).reshape(-1).copy()
        if not (len(pts) == len(nrm) == len(val)):
            raise ValueError("points, normals and valid mask must have equal length")
        if val.any():
            norms = np.linalg.norm(nrm[val], axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError("valid normals must have unit length")
        for a in (pts, nrm, val):
            a.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "valid", val)

    def __len__(self):
        return len(self.points)

    def valid_only(self) -> "SurfaceCloud":
        v = self.valid
        return SurfaceCloud(self.points[v], self.normals[v], np.ones(int(v.sum()), bool))


class GridIndex:
    """Uniform grid binning with cell size equal to the query radius.

    Queries are exact: every point within ``radius`` of the query lies in one
    of the 3x3 surrounding cells.
    """

    def __init__(self, points, radius: float):
        if not radius > 0:
            raise ValueError("radius must be positive")
        self.points = _as_points(points)
        self.radius = float(radius)
        self._cells = defaultdict(list)
        keys = np.floor(self.points / self.radius).astype(np.int64)
        for idx, (kx, ky) in enumerate(keys):
            self._cells[(int(kx), int(ky))].append(idx)
        self._keys = keys

    def query(self, i: int) -> np.ndarray:
        if not 0 <= i < len(self.points):
            raise IndexError(f"point index {i} out of range for {len(self.points)} points")
        kx, ky = self._keys[i]
        cand = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                cand.extend(self._cells.get((int(kx + dx), int(ky + dy)), ()))
        cand = np.array(sorted(cand), dtype=np.int64)
        d2 = np.sum((self.points[cand] - self.points[i]) ** 2, axis=1)
        return cand[d2 <= self.radius**2]


def neighbors(cloud, i: int, d_th: float) -> np.ndarray:
    """Sorted indices of all points within ``d_th`` of point ``i`` (``i`` included)."""
    return GridIndex(cloud, d_th).query(i)


def smallest_eigenvector(cov: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Closed-form eigen-decomposition of a symmetric 2x2 matrix.

    Returns the unit eigenvector of the smallest eigenvalue together with the
    (smallest, largest) eigenvalues.
    """
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    mid = 0.5 * (a + c)
    rad = math.hypot(0.5 * (a - c), b)
    phi = 0.5 * math.atan2(2.0 * b, a - c)  # major-axis angle
    return np.array([-math.sin(phi), math.cos(phi)]), mid - rad, mid + rad


def estimate_normals(points, d_th: float, sensor_origin=(0.0, 0.0)) -> SurfaceCloud:
    """PCA surface normals over fixed-radius neighborhoods.

    Each normal is the minor eigenvector of the neighborhood covariance
    (centroid-centered), oriented toward ``sensor_origin``. Points with fewer
    than three neighbors or a zero covariance are marked invalid.
    """
    pts = _as_points(points)
    n = len(pts)
    normals = np.zeros((n, 2))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return SurfaceCloud(pts, normals, valid)
    index = GridIndex(pts, d_th)
    origin = np.asarray(sensor_origin, dtype=float)
    for i in range(n):
        nb = index.query(i)
        if len(nb) < MIN_NEIGHBORS:
            continue
        local = pts[nb]
        centered = local - local.mean(axis=0)
        cov = centered.T @ centered / (len(nb) - 1)
        vec, _, lam_max = smallest_eigenvector(cov)
        if not lam_max > 0.0:
            continue
        if np.dot(vec, origin - pts[i]) < 0.0:
            vec = -vec
        normals[i] = vec
        valid[i] = True
    return SurfaceCloud(pts, normals, valid)


class CloudFormatError(ValueError):
    """Malformed cloud or map file; the message names the offending line."""


def save_cloud(cloud, path) -> None:
    """Write a source or surface cloud as comma-separated text."""
    path = Path(path)
    if isinstance(cloud, SurfaceCloud):
        lines = [f"{CLOUD_HEADER} surface"]
        for p, nv, v in zip(cloud.points, cloud.normals, cloud.valid):
            lines.append(f"{p[0]:.17g},{p[1]:.17g},{nv[0]:.17g},{nv[1]:.17g},{int(v)}")
    else:
        pts = cloud.points if isinstance(cloud, SourceCloud) else _as_points(cloud)
        lines = [f"{CLOUD_HEADER} source"]
        lines += [f"{p[0]:.17g},{p[1]:.17g}" for p in pts]
    path.write_text("\n".join(lines) + "\n")


def _parse_rows(lines, ncols: int, path, first_lineno: int) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(lines, start=first_lineno):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != ncols:
            raise CloudFormatError(
                f"{path}:{lineno}: expected {ncols} columns, found {len(fields)}"
            )
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    return rows


def load_cloud(path):
    """Read a cloud file written by :func:`save_cloud`.

    An empty file yields an empty :class:`SourceCloud`.
    """
    lines = Path(path).read_text().splitlines()
    if not any(l.strip() for l in lines):
        return SourceCloud(np.zeros((0, 2)))
    header = lines[0].strip()
    if not header.startswith(CLOUD_HEADER):
        raise CloudFormatError(f"{path}:1: missing header {CLOUD_HEADER!r}")
    kind = header[len(CLOUD_HEADER):].strip()
    if kind == "source":
        rows = _parse_rows(lines[1:], 2, path, 2)
        return SourceCloud(np.array(rows).reshape(-1, 2))
    if kind == "surface":
        rows = np.array(_parse_rows(lines[1:], 5, path, 2)).reshape(-1, 5)
        return SurfaceCloud(rows[:, :2], rows[:, 2:4], rows[:, 4] != 0)
    raise CloudFormatError(f"{path}:1: unknown cloud kind {kind!r}")
