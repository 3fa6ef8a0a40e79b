"""
Enumeration oracles at toy sizes.

The factorized pipeline is checked against brute force: the exact marginal
posterior of the pose is the joint density summed over every valid
association vector, and the exact association marginals come from the same
enumeration. Both are affordable only for a handful of points.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .association import BeliefTable, brute_force_marginals, run_bp, validity_psi
from .geometry import from_chart, inverse
from .inference import (
    InferenceConfig,
    Posterior,
    PosePrior,
    ScanPair,
    draw_samples,
    marginal_out_messages,
    sample_evidence,
)
from .lidar import make_rng
from .measurement import AssociabilityModel, ClutterModel, ErrorModel, ScanModel, log_count_constant
from .pointcloud import SourceCloud, SurfaceCloud


@dataclass(frozen=True)
class ToyInstance:
    surface: SurfaceCloud
    source: SourceCloud
    model: ScanModel
    prior: PosePrior
    truth: np.ndarray  # chart of the generating pose
    grid: tuple  # three 1-D axes; truth sits on a node


TOY_PRIOR = PosePrior((-2.0, 2.0), (-2.0, 2.0), (-math.pi / 4, math.pi / 4))


def toy_instance(rng: np.random.Generator, max_points: int = 3, n_grid: int = 20, sigma_e: float = 0.3) -> ToyInstance:
    """Random instance with 1..max_points destination and source points.

    Associated source points are placed so their residual at the true pose
    is a draw from the error model; the rest are clutter. The true pose is
    one node of an ``n_grid``^3 grid spanning the prior box.
    """
    prior = TOY_PRIOR
    axes = tuple(np.linspace(lo, hi, n_grid) for lo, hi in prior.bounds)
    idx = rng.integers(1, n_grid - 1, size=3)
    truth = np.array([axes[k][idx[k]] for k in range(3)])
    pose = from_chart(truth)

    n_d = int(rng.integers(1, max_points + 1))
    n_s = int(rng.integers(1, max_points + 1))
    d = rng.uniform(-5.0, 5.0, size=(n_d, 2))
    phi = rng.uniform(-math.pi, math.pi, size=n_d)
    nrm = np.column_stack([np.cos(phi), np.sin(phi)])

    n_pair = int(rng.integers(0, min(n_d, n_s) + 1))
    partners = rng.permutation(n_d)[:n_pair]
    src_world = rng.uniform(-6.0, 6.0, size=(n_s, 2))
    for j, i in enumerate(partners):
        tang = np.array([-nrm[i, 1], nrm[i, 0]])
        src_world[j] = d[i] + rng.normal(0.0, 0.5) * tang - rng.normal(0.0, sigma_e) * nrm[i]
    src = inverse(pose).apply(src_world)
    src = src[rng.permutation(n_s)]

    model = ScanModel(ErrorModel(sigma_e), AssociabilityModel(0.8), ClutterModel(lambda_na=1.0, max_range=20.0))
    surface = SurfaceCloud(d, nrm, np.ones(n_d, bool))
    return ToyInstance(surface, SourceCloud(src), model, prior, truth, axes)


def grid_charts(axes) -> np.ndarray:
    g = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in g])


def valid_associations(n_d: int, n_s: int):
    """Every association vector with no source point used twice."""
    return [a for a in itertools.product(range(n_s + 1), repeat=n_d) if validity_psi(a)]


def exact_log_marginal(charts, surface: SurfaceCloud, source, model: ScanModel) -> np.ndarray:
    """``log sum_a f(z, a, N_S | pose)`` at K chart points, by enumeration.

    Vectorized over the poses; the per-vector sum is assembled from the
    same ingredients as :func:`bpscan.measurement.log_joint_density_exact`.
    """
    charts = np.atleast_2d(np.asarray(charts, dtype=float))
    pts = np.asarray(getattr(source, "points", source), dtype=float).reshape(-1, 2)
    d, nrm = surface.points, surface.normals
    n_d, n_s = len(d), len(pts)
    lam, f_a = model.clutter.lambda_na, model.assoc.f_a
    log_fna = model.clutter.log_density(pts)

    c, s = np.cos(charts[:, 2]), np.sin(charts[:, 2])
    mx = c[:, None] * pts[None, :, 0] - s[:, None] * pts[None, :, 1] + charts[:, 0, None]
    my = s[:, None] * pts[None, :, 0] + c[:, None] * pts[None, :, 1] + charts[:, 1, None]
    # r[k, i, j] = n_i . (d_i - pose_k(s_j))
    r = (nrm[:, 0] * d[:, 0] + nrm[:, 1] * d[:, 1])[None, :, None] - (
        nrm[None, :, 0, None] * mx[:, None, :] + nrm[None, :, 1, None] * my[:, None, :]
    )
    pair = math.log(f_a) + model.error.log_pdf(r) - log_fna[None, None, :] if f_a > 0 else np.full(r.shape, -np.inf)
    none = math.log1p(-f_a)

    base = -lam - math.lgamma(n_s + 1) + float(np.sum(log_fna))
    terms = []
    for a in valid_associations(n_d, n_s):
        t = np.full(len(charts), base + (n_s - sum(1 for x in a if x)) * math.log(lam))
        for i, ai in enumerate(a):
            t = t + (pair[:, i, ai - 1] if ai else none)
        terms.append(t)
    return logsumexp(np.stack(terms), axis=0)


def approximate_log_posterior(charts, inst: ToyInstance, n_p: int = 5000, seed: int = 0) -> np.ndarray:
    """Pipeline log posterior (no pruning) at K chart points."""
    cfg = InferenceConfig(n_p=n_p, prune=False)
    pair = ScanPair(inst.source, inst.surface, inst.model)
    samples = draw_samples(inst.prior, n_p, make_rng(seed, 0))
    beliefs, _ = sample_evidence(samples, pair, cfg)
    _, state = run_bp(beliefs, cfg.n_da, cfg.bp_tol)
    post = Posterior(inst.prior, marginal_out_messages(pair, state.nu), cfg)
    return post.log_values(charts)


@dataclass
class OracleComparison:
    max_rel_error: float
    argmax_match: bool
    seconds: float


def compare_posterior(inst: ToyInstance, n_p: int = 5000, seed: int = 0) -> OracleComparison:
    """Relative log-density error over the whole grid and argmax agreement.

    The approximate posterior omits the pose-independent count constant of
    the joint; it is added back before comparing.
    """
    t0 = time.perf_counter()
    charts = grid_charts(inst.grid)
    exact = exact_log_marginal(charts, inst.surface, inst.source, inst.model) + inst.prior.log_density
    approx = approximate_log_posterior(charts, inst, n_p, seed)
    approx = approx + log_count_constant(len(inst.source), inst.model.clutter.lambda_na)
    rel = np.abs(approx - exact) / np.abs(exact)
    same = int(np.argmax(approx)) == int(np.argmax(exact))
    return OracleComparison(float(np.max(rel)), same, time.perf_counter() - t0)


def random_tree_beliefs(rng: np.random.Generator, max_points: int = 6) -> BeliefTable:
    """Random evidence with a single destination or a single source point."""
    n = int(rng.integers(1, max_points + 1))
    shape = (1, n + 1) if rng.random() < 0.5 else (n, 2)
    return BeliefTable(rng.normal(0.0, 2.0, size=shape))


def bp_tree_error(beliefs: BeliefTable) -> float:
    marg, _ = run_bp(beliefs, 200, 1e-12)
    return float(np.max(np.abs(marg - brute_force_marginals(beliefs))))


def run_all(seed: int = 0, n_posterior: int = 10, n_trees: int = 1000):
    """Yield ``(description, passed)`` for each oracle comparison."""
    rng = make_rng(seed, 17)
    worst, agree, t0 = 0.0, 0, time.perf_counter()
    for k in range(n_posterior):
        res = compare_posterior(toy_instance(rng), seed=seed + k)
        worst = max(worst, res.max_rel_error)
        agree += res.argmax_match
    dt = time.perf_counter() - t0
    yield (
        f"posterior vs enumeration: {n_posterior} toy instances, worst relative log-density "
        f"error {worst:.4f} (limit 0.07), argmax agrees {agree}/{n_posterior}, {dt:.1f} s",
        worst <= 0.07 and agree == n_posterior,
    )
    t0 = time.perf_counter()
    err = max(bp_tree_error(random_tree_beliefs(rng)) for _ in range(n_trees))
    dt = time.perf_counter() - t0
    yield (
        f"message passing on trees: {n_trees} instances, worst marginal error {err:.2e} (limit 1e-9), {dt:.1f} s",
        err <= 1e-9,
    )
