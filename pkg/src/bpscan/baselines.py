"""
Reference scan matchers: 2D NDT and a simplified IMLS-style matcher.

Both take an initial relative pose and return a local optimum; neither models
data association probabilistically. They exist to reproduce the comparison
setting of the benchmark harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, from_chart, to_chart, wrap_angle


class NoOverlapError(RuntimeError):
    """No source point interacts with the destination model at the start pose."""


# ---------------------------------------------------------------------------
# NDT


@dataclass
class _Grid:
    offset: np.ndarray
    keys: np.ndarray  # sorted encoded cell keys of the populated cells
    means: np.ndarray
    inv_covs: np.ndarray
    covs: np.ndarray
    counts: np.ndarray


def _encode(keys):
    # cell indices stay far below 2**31 for any realistic map and cell size
    return (keys[:, 0].astype(np.int64) << 32) + (keys[:, 1].astype(np.int64) & 0xFFFFFFFF)


class NdtGrid:
    """Four half-cell-shifted grids of per-cell Gaussians over the destination.

    Cells with fewer than three points are left empty. Covariance eigenvalues
    are floored at ``1e-4 * cell_size**2``.
    """

    MIN_POINTS = 3

    def __init__(self, points, cell_size: float = 2.0, n_grids: int = 4):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("cannot build an NDT grid from an empty cloud")
        self.cell_size = float(cell_size)
        half = 0.5 * self.cell_size
        offsets = [(0.0, 0.0), (half, 0.0), (0.0, half), (half, half)][:n_grids]
        self.grids = [self._build(pts, np.array(o)) for o in offsets]

    def _keys(self, pts, offset):
        return np.floor((pts - offset) / self.cell_size).astype(np.int64)

    def _build(self, pts, offset) -> _Grid:
        keys = self._keys(pts, offset)
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        floor = 1e-4 * self.cell_size**2
        codes, means, covs, invs, counts = [], [], [], [], []
        uniq, start = np.unique(keys[order], axis=0, return_index=True)
        bounds = list(start) + [len(order)]
        for k, key in enumerate(uniq):
            members = pts[order[bounds[k]:bounds[k + 1]]]
            if len(members) < self.MIN_POINTS:
                continue
            mu = members.mean(axis=0)
            c = np.cov(members.T)
            vals, vecs = np.linalg.eigh(c)
            vals = np.maximum(vals, floor)
            c = (vecs * vals) @ vecs.T
            codes.append(_encode(key[None, :])[0])
            means.append(mu)
            covs.append(c)
            invs.append((vecs / vals) @ vecs.T)
            counts.append(len(members))
        codes = np.array(codes, dtype=np.int64)
        srt = np.argsort(codes)
        return _Grid(
            offset,
            codes[srt],
            np.array(means).reshape(-1, 2)[srt],
            np.array(invs).reshape(-1, 2, 2)[srt],
            np.array(covs).reshape(-1, 2, 2)[srt],
            np.array(counts, dtype=int)[srt],
        )

    def lookup(self, grid: _Grid, pts):
        """Cell index per point (-1 where the cell is empty)."""
        code = _encode(self._keys(pts, grid.offset))
        if len(grid.keys) == 0:
            return np.full(len(code), -1)
        pos = np.minimum(np.searchsorted(grid.keys, code), len(grid.keys) - 1)
        return np.where(grid.keys[pos] == code, pos, -1)

    def score_terms(self, pts):
        """Yield ``(points, means, inverse covariances, point index)`` per grid."""
        for g in self.grids:
            idx = self.lookup(g, pts)
            hit = idx >= 0
            yield np.flatnonzero(hit), g.means[idx[hit]], g.inv_covs[idx[hit]]


def ndt_score(grid: NdtGrid, source, pose: Pose) -> float:
    """Sum of Gaussian cell scores of the transformed source points."""
    pts = pose.apply(np.asarray(source, dtype=float).reshape(-1, 2))
    total = 0.0
    for hit, mu, inv in grid.score_terms(pts):
        q = pts[hit] - mu
        total += float(np.sum(np.exp(-0.5 * np.einsum("ni,nij,nj->n", q, inv, q))))
    return total


def _ndt_derivatives(grid: NdtGrid, src, chart):
    pose = from_chart(chart)
    c, s = math.cos(chart[2]), math.sin(chart[2])
    pts = pose.apply(src)
    score = 0.0
    g = np.zeros(3)
    h = np.zeros((3, 3))
    n_hit = 0
    for hit, mu, inv in grid.score_terms(pts):
        if not len(hit):
            continue
        n_hit += len(hit)
        q = pts[hit] - mu
        sx, sy = src[hit, 0], src[hit, 1]
        # dq/dparams: columns x, y, theta
        jt = np.stack([-s * sx - c * sy, c * sx - s * sy], axis=1)
        jt2 = np.stack([-c * sx + s * sy, -s * sx - c * sy], axis=1)
        cq = np.einsum("nij,nj->ni", inv, q)
        e = np.exp(-0.5 * np.einsum("ni,ni->n", q, cq))
        d = np.stack([cq[:, 0], cq[:, 1], np.einsum("ni,ni->n", cq, jt)], axis=1)  # q^T C dq_a
        score += float(e.sum())
        g -= np.einsum("n,na->a", e, d)
        # second-order terms: (q'C dq_a)(q'C dq_b) - dq_b' C dq_a - q' C d2q_ab
        cjt = np.einsum("nij,nj->ni", inv, jt)
        m = np.zeros((len(hit), 3, 3))
        m[:, 0, 0] = inv[:, 0, 0]
        m[:, 0, 1] = m[:, 1, 0] = inv[:, 0, 1]
        m[:, 1, 1] = inv[:, 1, 1]
        m[:, 0, 2] = m[:, 2, 0] = cjt[:, 0]
        m[:, 1, 2] = m[:, 2, 1] = cjt[:, 1]
        m[:, 2, 2] = np.einsum("ni,ni->n", jt, cjt) + np.einsum("ni,ni->n", cq, jt2)
        h += np.einsum("n,nab->ab", e, d[:, :, None] * d[:, None, :] - m)
    return score, g, h, n_hit


def ndt_match(
    source,
    destination_points,
    initial: Pose = Pose.identity(),
    cell_size: float = 2.0,
    max_iters: int = 100,
    tol: float = 1e-6,
    grid: NdtGrid | None = None,
) -> Pose:
    """Maximize the NDT score with Newton steps and step halving."""
    src = np.asarray(getattr(source, "points", source), dtype=float).reshape(-1, 2)
    dst = np.asarray(getattr(destination_points, "points", destination_points), dtype=float)
    grid = grid if grid is not None else NdtGrid(dst, cell_size)
    x = to_chart(initial)
    score, g, h, n_hit = _ndt_derivatives(grid, src, x)
    if n_hit == 0:
        raise NoOverlapError("no source point falls into a populated NDT cell")
    for _ in range(max_iters):
        # Newton on a concave model; shift the Hessian until it is negative definite
        lam = 0.0
        for _attempt in range(60):
            hm = h - lam * np.eye(3)
            if np.all(np.linalg.eigvalsh(hm) < 0):
                break
            lam = max(2.0 * lam, 1e-6 * max(1.0, np.abs(h).max()))
        step = -np.linalg.solve(hm, g)
        improved = False
        for _half in range(40):
            cand = x + step
            sc = ndt_score(grid, src, from_chart(cand))
            if sc > score:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        x = cand
        score, g, h, _ = _ndt_derivatives(grid, src, x)
        if np.linalg.norm(step) < tol:
            break
    return from_chart([x[0], x[1], wrap_angle(x[2])])


# ---------------------------------------------------------------------------
# IMLS


@dataclass(frozen=True)
class ImlsConfig:
    """``h`` is the neighborhood parameter: the weight bandwidth, and by
    default also the radius beyond which destination points are ignored. A
    query with no destination point in range is dropped from the cost."""

    h: float = 2.0
    radius: float | None = None
    max_iters: int = 50
    step_tol: float = 1e-6

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def neighborhood(self) -> float:
        return self.h if self.radius is None else self.radius


def implicit_surface(x, dpts, nrm, h: float, radius: float = np.inf, tree: cKDTree | None = None):
    """IMLS distance ``I(x)`` and its gradient, with a validity mask.

    Query points with no destination point within ``radius`` (or whose
    weights all underflow) are marked invalid. ``tree`` is an optional
    KD-tree over ``dpts``; with a finite radius only nearby pairs are formed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k_q = len(x)
    if np.isfinite(radius):
        tree = tree if tree is not None else cKDTree(dpts)
        pairs = cKDTree(x).query_ball_tree(tree, radius)
        qi = np.repeat(np.arange(k_q), [len(p) for p in pairs])
        di = np.fromiter((j for p in pairs for j in p), dtype=np.int64, count=len(qi))
    else:
        qi, di = np.divmod(np.arange(k_q * len(dpts)), len(dpts))
    diff = x[qi] - dpts[di]
    d2 = np.einsum("ni,ni->n", diff, diff)
    w = np.exp(-d2 / h**2)
    proj = np.einsum("ni,ni->n", diff, nrm[di])
    dw = (-2.0 / h**2 * w)[:, None] * diff  # gradient of each weight

    def per_query(v):
        return np.bincount(qi, weights=v, minlength=k_q)

    wsum = per_query(w)
    ok = wsum > 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        val = per_query(w * proj) / wsum
        grad = np.empty((k_q, 2))
        for ax in range(2):
            grad[:, ax] = (
                per_query(w * nrm[di, ax]) + per_query(dw[:, ax] * proj) - val * per_query(dw[:, ax])
            ) / wsum
    return np.where(ok, val, np.nan), np.where(ok[:, None], grad, np.nan), ok


def imls_match(source, destination_surface, config: ImlsConfig = ImlsConfig(), initial: Pose = Pose.identity()) -> Pose:
    """Gauss-Newton on the sum of squared implicit-surface distances."""
    src = np.asarray(getattr(source, "points", source), dtype=float).reshape(-1, 2)
    surf = destination_surface.valid_only()
    dpts, nrm = surf.points, surf.normals
    if len(dpts) == 0:
        raise NoOverlapError("destination has no valid surface points")
    x = to_chart(initial)
    tree = cKDTree(dpts)

    def residuals(chart):
        pose = from_chart(chart)
        return implicit_surface(pose.apply(src), dpts, nrm, config.h, config.neighborhood, tree)

    val, grad, ok = residuals(x)
    if not ok.any():
        raise NoOverlapError("every source point is far from the destination surface")
    cost = float(np.sum(val[ok] ** 2))
    for _ in range(config.max_iters):
        c, s = math.cos(x[2]), math.sin(x[2])
        sx, sy = src[ok, 0], src[ok, 1]
        jt = np.stack([-s * sx - c * sy, c * sx - s * sy], axis=1)
        g = grad[ok]
        jac = np.column_stack([g[:, 0], g[:, 1], np.einsum("ni,ni->n", g, jt)])
        r = val[ok]
        try:
            step = -np.linalg.lstsq(jac, r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _half in range(30):
            cand = x + step
            v2, g2, ok2 = residuals(cand)
            if ok2.any():
                c2 = float(np.sum(v2[ok2] ** 2))
                if c2 <= cost:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        x, val, grad, ok, cost = cand, v2, g2, ok2, c2
        if np.linalg.norm(step) < config.step_tol:
            break
    return from_chart([x[0], x[1], wrap_angle(x[2])])
