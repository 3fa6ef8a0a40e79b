"""
Point-to-plane pseudo-measurements and the association likelihood factors.

All combination of densities happens in log space; the linear-space helpers
exist for small instances and tests.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .geometry import Pose

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ErrorModel:
    """Zero-mean Gaussian point-to-plane error with standard deviation ``sigma_e`` (m)."""

    sigma_e: float = 0.03

    def __post_init__(self):
        if not self.sigma_e > 0:
            raise ValueError("sigma_e must be positive")

    def log_pdf(self, residual):
        r = np.asarray(residual, dtype=float) / self.sigma_e
        return -0.5 * r * r - math.log(self.sigma_e) - LOG_SQRT_2PI


@dataclass(frozen=True)
class AssociabilityModel:
    """Constant probability ``f_a`` that a destination surface point has a partner."""

    f_a: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.f_a < 1.0:
            raise ValueError("f_a must lie in [0, 1)")

    def value(self, delta_p: Pose | None = None) -> float:
        return self.f_a


@dataclass(frozen=True)
class ClutterModel:
    """Non-associable source points: Poisson count, uniform in range x bearing.

    The Cartesian density of a point at radius ``r`` is
    ``1 / ((max_range - min_range) * bearing_span * r)`` inside the support.
    """

    lambda_na: float = 1.0
    max_range: float = 100.0
    min_range: float = 0.0
    bearing_span: float = 2.0 * math.pi

    def __post_init__(self):
        if not self.lambda_na > 0:
            # q-factors divide by lambda_na; zero clutter is expressed by a tiny rate
            raise ValueError("lambda_na must be positive in the inference model")
        if not self.max_range > self.min_range >= 0:
            raise ValueError("need 0 <= min_range < max_range")

    def in_support(self, points) -> np.ndarray:
        r = np.hypot(*np.asarray(points, dtype=float).reshape(-1, 2).T)
        return (r > 0.0) & (r >= self.min_range) & (r <= self.max_range)

    def log_density(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        r = np.hypot(pts[:, 0], pts[:, 1])
        ok = self.in_support(pts)
        out = np.full(len(pts), -np.inf)
        area = (self.max_range - self.min_range) * self.bearing_span
        out[ok] = -np.log(area * r[ok])
        return out


@dataclass(frozen=True)
class ScanModel:
    """Bundle of the three model components used by inference."""

    error: ErrorModel = field(default_factory=ErrorModel)
    assoc: AssociabilityModel = field(default_factory=AssociabilityModel)
    clutter: ClutterModel = field(default_factory=ClutterModel)


class SupportViolation(ValueError):
    """A source point lies where the clutter density is zero."""


def point_to_plane_residual(d, n, s, delta_p: Pose):
    """Signed distance ``n . (d - delta_p(s))``; broadcasts over leading axes."""
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    moved = delta_p.apply(np.asarray(s, dtype=float).reshape(-1, 2)).reshape(np.shape(s))
    return np.sum(n * (d - moved), axis=-1)


def pair_likelihood(d, n, s, delta_p: Pose, em: ErrorModel):
    return np.exp(em.log_pdf(point_to_plane_residual(d, n, s, delta_p)))


def clutter_density(s, delta_p: Pose, cm: ClutterModel) -> tuple[float, bool]:
    """Density of a clutter point at ``s`` and whether ``s`` is in the support.

    The density does not depend on ``delta_p``; the argument keeps the
    general signature. Outside the support the density is 0 and the flag is
    ``False``.
    """
    ld = cm.log_density(s)[0]
    return (float(math.exp(ld)), True) if np.isfinite(ld) else (0.0, False)


def clutter_product(delta_p: Pose, sources, cm: ClutterModel) -> tuple[float, bool]:
    """Product of clutter densities over all source points, with a support flag."""
    lv, ok = log_clutter_product(delta_p, sources, cm)
    return float(np.exp(lv)), ok


def log_clutter_product(delta_p: Pose, sources, cm: ClutterModel) -> tuple[float, bool]:
    pts = np.asarray(getattr(sources, "points", sources), dtype=float).reshape(-1, 2)
    ld = cm.log_density(pts)
    if not np.all(np.isfinite(ld)):
        return -np.inf, False
    return float(np.sum(ld)), True


def log_q_factor(delta_p: Pose, a_i: int, d_i, n_i, sources, model: ScanModel) -> float:
    """Log of the per-destination factor for association value ``a_i``.

    ``a_i = 0`` gives ``log(1 - f_a)``; ``a_i = j`` gives
    ``log(f_a * f(z_ij | delta_p) / (lambda_na * f_na(s_j)))``.
    """
    pts = np.asarray(getattr(sources, "points", sources), dtype=float).reshape(-1, 2)
    f_a = model.assoc.value(delta_p)
    if a_i == 0:
        return math.log1p(-f_a)
    if not 1 <= a_i <= len(pts):
        raise IndexError(f"association value {a_i} outside 0..{len(pts)}")
    if f_a == 0.0:
        return -np.inf
    s = pts[a_i - 1]
    lna = model.clutter.log_density(s)[0]
    if not np.isfinite(lna):
        raise SupportViolation(f"source point {a_i} has zero clutter density")
    r = point_to_plane_residual(d_i, n_i, s, delta_p)
    return (
        math.log(f_a)
        + float(model.error.log_pdf(r))
        - math.log(model.clutter.lambda_na)
        - lna
    )


def q_factor(delta_p: Pose, a_i: int, d_i, n_i, sources, model: ScanModel) -> float:
    return math.exp(log_q_factor(delta_p, a_i, d_i, n_i, sources, model))


def log_count_constant(n_s: int, lambda_na: float) -> float:
    """``log(lambda^N_S exp(-lambda) / N_S!)``, the pose-independent factor that
    relates the factorized posterior to the full joint density."""
    return n_s * math.log(lambda_na) - lambda_na - float(gammaln(n_s + 1))


def log_joint_density_exact(delta_p: Pose, a, surface, sources, model: ScanModel) -> float:
    """Log of ``f(z, a, N_S | delta_p)`` for one full association vector.

    Assembled term by term from the Poisson count, the uniform prior over
    valid associations, the Bernoulli associability and the pair
    likelihoods. Invalid vectors (a repeated nonzero entry) give ``-inf``.
    """
    a = np.asarray(a, dtype=int).reshape(-1)
    pts = np.asarray(getattr(sources, "points", sources), dtype=float).reshape(-1, 2)
    n_s = len(pts)
    if len(a) != len(surface.points):
        raise ValueError("association vector length must equal the number of surface points")
    nz = a[a != 0]
    if len(np.unique(nz)) != len(nz):
        return -np.inf
    lam = model.clutter.lambda_na
    f_a = model.assoc.value(delta_p)
    n_assoc = len(nz)
    out = (n_s - n_assoc) * math.log(lam) - float(gammaln(n_s + 1)) - lam
    lv, ok = log_clutter_product(delta_p, pts, model.clutter)
    if not ok:
        return -np.inf
    out += lv
    for i, ai in enumerate(a):
        if ai == 0:
            out += math.log1p(-f_a)
            continue
        if f_a == 0.0:
            return -np.inf
        s = pts[ai - 1]
        r = point_to_plane_residual(surface.points[i], surface.normals[i], s, delta_p)
        out += math.log(f_a) + float(model.error.log_pdf(r)) - model.clutter.log_density(s)[0]
    return out


def joint_density_exact(delta_p: Pose, a, surface, sources, model: ScanModel) -> float:
    return math.exp(log_joint_density_exact(delta_p, a, surface, sources, model))


def log_marginal_exact(delta_p: Pose, surface, sources, model: ScanModel) -> float:
    """Log of the exact joint summed over every association vector (toy sizes only)."""
    n_s = len(np.asarray(getattr(sources, "points", sources)).reshape(-1, 2))
    terms = [
        log_joint_density_exact(delta_p, a, surface, sources, model)
        for a in itertools.product(range(n_s + 1), repeat=len(surface.points))
    ]
    return float(logsumexp(terms))
