"""Synthetic 2D LiDAR over a line-segment map.

Scans are produced in the sensor frame: bearing 0 is the sensor's heading.
Range and bearing noise are applied in polar coordinates before conversion to
Cartesian; clutter points are drawn uniformly in range x bearing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Pose
from .pointcloud import CloudFormatError, SourceCloud

MAP_HEADER = "# bp-scanmatch map v1"
TRAJECTORY_HEADER = "# bp-scanmatch trajectory v1"


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream keyed by ``(seed, *keys)``.

    Streams with different keys are statistically independent, so scans can
    be simulated in any order or in parallel with identical results.
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SegmentMap:
    """Line segments, array of shape (M, 4) holding ``ax, ay, bx, by``."""

    segments: np.ndarray

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=float).reshape(-1, 4).copy()
        lengths = np.hypot(seg[:, 2] - seg[:, 0], seg[:, 3] - seg[:, 1])
        if np.any(lengths == 0.0):
            raise ValueError("segment map contains a zero-length segment")
        seg.setflags(write=False)
        object.__setattr__(self, "segments", seg)

    def __len__(self):
        return len(self.segments)

    def distance_to(self, points) -> np.ndarray:
        """Euclidean distance from each point to the nearest segment."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(self.segments) == 0:
            return np.full(len(pts), np.inf)
        a = self.segments[:, :2]
        ab = self.segments[:, 2:] - a
        ap = pts[:, None, :] - a[None, :, :]
        u = np.clip(np.sum(ap * ab, axis=2) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        closest = a + u[..., None] * ab
        return np.min(np.linalg.norm(pts[:, None, :] - closest, axis=2), axis=1)


@dataclass(frozen=True)
class SensorSpec:
    angular_resolution: float = math.radians(1.0)
    max_range: float = 100.0
    sigma_range: float = 0.05
    sigma_bearing: float = math.radians(0.5)

    def __post_init__(self):
        if self.angular_resolution <= 0 or self.max_range <= 0:
            raise ValueError("angular resolution and max range must be positive")
        if self.sigma_range < 0 or self.sigma_bearing < 0:
            raise ValueError("noise levels must be non-negative")
        n = 2.0 * math.pi / self.angular_resolution
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("angular resolution must divide 2*pi")

    @property
    def n_beams(self) -> int:
        return int(round(2.0 * math.pi / self.angular_resolution))

    def bearings(self) -> np.ndarray:
        return np.arange(self.n_beams) * self.angular_resolution


@dataclass(frozen=True)
class ClutterSpec:
    """Poisson number of clutter points, uniform in range and bearing.

    ``max_range`` of ``None`` means the sensor's maximum range.
    """

    lambda_na: float = 1.0
    min_range: float = 0.0
    max_range: float | None = None
    min_bearing: float = 0.0
    max_bearing: float = 2.0 * math.pi

    def __post_init__(self):
        if self.lambda_na < 0:
            raise ValueError("lambda_na must be non-negative")


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: np.ndarray
    speed: float = 10.0
    scan_period: float = 0.08

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float).reshape(-1, 2).copy()
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        if self.speed <= 0 or self.scan_period <= 0:
            raise ValueError("speed and scan period must be positive")

    @property
    def spacing(self) -> float:
        return self.speed * self.scan_period


def raycast_all(segments: np.ndarray, origin, bearings, max_range: float) -> np.ndarray:
    """First-hit ranges for many bearings; ``nan`` where nothing is hit."""
    bearings = np.atleast_1d(np.asarray(bearings, dtype=float))
    out = np.full(len(bearings), np.nan)
    if len(segments) == 0 or len(bearings) == 0:
        return out
    o = np.asarray(origin, dtype=float)
    d = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)  # (B, 2)
    a = segments[:, :2] - o  # (M, 2)
    e = segments[:, 2:] - segments[:, :2]  # (M, 2)
    # o + t d = a + u e  ->  t (d x e) = a x e,  u (d x e) = a x d
    cross_de = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]
    cross_ae = a[:, 0] * e[:, 1] - a[:, 1] * e[:, 0]
    cross_ad = a[None, :, 0] * d[:, 1:2] - a[None, :, 1] * d[:, 0:1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_ae[None, :] / cross_de
        u = cross_ad / cross_de
    hit = (cross_de != 0.0) & (t > 0.0) & (u >= 0.0) & (u <= 1.0) & (t <= max_range)
    t = np.where(hit, t, np.inf)
    best = t.min(axis=1)
    found = np.isfinite(best)
    out[found] = best[found]
    return out


def raycast(map_: SegmentMap, origin, bearing: float, max_range: float) -> float | None:
    """Distance to the nearest segment along a ray, or ``None``."""
    r = raycast_all(map_.segments, origin, [bearing], max_range)[0]
    return None if np.isnan(r) else float(r)


def scan(
    map_: SegmentMap,
    sensor_pose: Pose,
    spec: SensorSpec,
    clutter: ClutterSpec,
    rng: np.random.Generator,
) -> SourceCloud:
    """Simulate one revolution; points are returned in the sensor frame.

    Beam hits come first in bearing order, followed by clutter points.
    Returns at or beyond the maximum range are dropped.
    """
    bearings = spec.bearings()
    ranges = raycast_all(map_.segments, sensor_pose.translation, bearings + sensor_pose.theta, spec.max_range)
    hit = np.isfinite(ranges) & (ranges < spec.max_range)
    r = ranges[hit]
    b = bearings[hit]
    # noise is drawn for every beam so streams do not depend on the map
    nr = rng.standard_normal(len(bearings))[hit]
    nb = rng.standard_normal(len(bearings))[hit]
    r = r + spec.sigma_range * nr
    b = b + spec.sigma_bearing * nb
    keep = r > 0.0
    pts = np.stack([r[keep] * np.cos(b[keep]), r[keep] * np.sin(b[keep])], axis=1)

    k = rng.poisson(clutter.lambda_na) if clutter.lambda_na > 0 else 0
    if k:
        rmax = spec.max_range if clutter.max_range is None else clutter.max_range
        cr = rng.uniform(clutter.min_range, rmax, size=k)
        cb = rng.uniform(clutter.min_bearing, clutter.max_bearing, size=k)
        pts = np.vstack([pts, np.stack([cr * np.cos(cb), cr * np.sin(cb)], axis=1)])
    return SourceCloud(pts.reshape(-1, 2))


def generate_trajectory(spec: TrajectorySpec) -> list[Pose]:
    """Sensor poses every ``speed * scan_period`` meters of arc length.

    Headings follow the tangent of the current polyline segment; a pose that
    falls exactly on a vertex takes the heading of the outgoing segment.
    """
    wp = spec.waypoints
    if len(wp) < 2:
        raise ValueError("trajectory needs at least two waypoints")
    seg = np.diff(wp, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths == 0.0):
        raise ValueError("trajectory contains repeated waypoints")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    step = spec.spacing
    n = int(math.floor(total / step + 1e-9)) + 1
    poses = []
    for k in range(n):
        s = min(k * step, total)
        idx = int(np.searchsorted(cum, s, side="right") - 1)
        idx = min(idx, len(seg) - 1)
        frac = (s - cum[idx]) / lengths[idx]
        pos = wp[idx] + frac * seg[idx]
        heading = math.atan2(seg[idx, 1], seg[idx, 0])
        poses.append(Pose.from_xytheta(pos[0], pos[1], heading))
    return poses


def _read_table(path, header: str, ncols: int) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip().startswith(header):
        raise CloudFormatError(f"{path}:1: missing header {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != ncols:
            raise CloudFormatError(f"{path}:{lineno}: expected {ncols} columns, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    return np.array(rows, dtype=float).reshape(-1, ncols)


def load_map(path) -> SegmentMap:
    return SegmentMap(_read_table(path, MAP_HEADER, 4))


def save_map(map_: SegmentMap, path) -> None:
    rows = [",".join(f"{v:.17g}" for v in s) for s in map_.segments]
    Path(path).write_text("\n".join([MAP_HEADER, *rows]) + "\n")


def load_waypoints(path) -> np.ndarray:
    return _read_table(path, TRAJECTORY_HEADER, 2)


def save_waypoints(waypoints, path) -> None:
    rows = [f"{x:.17g},{y:.17g}" for x, y in np.asarray(waypoints, dtype=float)]
    Path(path).write_text("\n".join([TRAJECTORY_HEADER, *rows]) + "\n")


def demo_map_path() -> Path:
    return Path(str(resources.files("bpscan") / "data" / "demo_map.txt"))


def demo_trajectory_path() -> Path:
    return Path(str(resources.files("bpscan") / "data" / "demo_trajectory.txt"))


def demo_map() -> SegmentMap:
    """Bundled urban-block map: a loop road between rectangular buildings."""
    return load_map(demo_map_path())
