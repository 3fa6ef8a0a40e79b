"""
Pose inference: sampled association evidence, message passing, marginal
posterior assembly and MAP extraction.

The pipeline run by :func:`match_scans`:

1. draw pose samples from the (uniform) pose prior,
2. integrate each per-destination factor over the samples to get association
   evidence (:func:`compute_q_messages`),
3. run association message passing (:func:`bpscan.association.run_bp`),
4. turn the incoming association messages into per-destination mixtures over
   the pose (:func:`marginal_out_messages`) and multiply them into the
   approximate marginal posterior (:class:`Posterior`),
5. pick the best sample (:func:`initial_guess`) and refine it
   (:func:`refine_map`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import _kernels
from .association import BeliefTable, DegenerateEvidenceError, run_bp
from .geometry import Pose, from_chart, to_chart, wrap_angle
from .lidar import make_rng
from .measurement import LOG_SQRT_2PI, ScanModel, SupportViolation
from .pointcloud import SourceCloud, SurfaceCloud


@dataclass(frozen=True)
class PosePrior:
    """Uniform prior over a box in (x, y, theta)."""

    x_range: tuple[float, float] = (-10.0, 10.0)
    y_range: tuple[float, float] = (-10.0, 10.0)
    theta_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not lo <= hi:
                raise ValueError("empty prior support")

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [tuple(self.x_range), tuple(self.y_range), tuple(self.theta_range)]

    @property
    def log_density(self) -> float:
        vol = np.prod([hi - lo for lo, hi in self.bounds])
        return -math.log(vol) if vol > 0 else 0.0

    def contains(self, chart) -> np.ndarray:
        c = np.atleast_2d(np.asarray(chart, dtype=float))
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.all((c >= lo) & (c <= hi), axis=1)

    def log_pdf(self, chart) -> np.ndarray:
        return np.where(self.contains(chart), self.log_density, -np.inf)


# anneal stages at or above this noise-scale multiplier are "coarse"
COARSE_SCALE = 10.0


@dataclass(frozen=True)
class InferenceConfig:
    """Tuning knobs of the pipeline.

    ``prune`` drops individual terms whose residual exceeds
    ``prune_sigmas * sigma_e``. ``anneal`` is the sequence of noise-scale
    multipliers used while refining; it must end in 1. Up to ``n_starts``
    refinements are run, from the best sample and from the next best samples
    under ``start_ranking``: "coarse" scores the samples with sigma_e inflated
    by ``ranking_scale``, "fine" reuses the plain sample scores. Coarse
    scoring and anneal stages at scale >= 10 visit every ``coarse_stride``-th
    destination point only.
    """

    n_p: int = 2000
    n_da: int = 200
    bp_tol: float = 1e-8
    damping: float = 0.0
    n_it: int = 100
    prune: bool = True
    prune_sigmas: float = 9.0
    refine_method: str = "nelder-mead"
    anneal: tuple[float, ...] = (30.0, 10.0, 3.0, 1.0)
    n_starts: int = 4
    start_ranking: str = "coarse"
    ranking_scale: float = 10.0
    coarse_stride: int = 4

    def __post_init__(self):
        if self.n_p < 1:
            raise ValueError("n_p must be at least 1")
        if self.refine_method not in ("nelder-mead", "gradient"):
            raise ValueError(f"unknown refine_method {self.refine_method!r}")
        if self.start_ranking not in ("coarse", "fine"):
            raise ValueError(f"unknown start_ranking {self.start_ranking!r}")
        if self.coarse_stride < 1 or self.n_starts < 1:
            raise ValueError("coarse_stride and n_starts must be at least 1")
        if not self.anneal or self.anneal[-1] != 1.0:
            raise ValueError("anneal schedule must end with 1.0")


@dataclass(frozen=True)
class PoseSampleSet:
    """Pose samples as an (N_P, 3) chart array, with cached clutter products."""

    charts: np.ndarray
    log_v: np.ndarray | None = None

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.charts, dtype=float)).copy()
        c.setflags(write=False)
        object.__setattr__(self, "charts", c)

    def __len__(self):
        return len(self.charts)

    def pose(self, p: int) -> Pose:
        return from_chart(self.charts[p])


def draw_samples(prior: PosePrior, n_p: int, rng: np.random.Generator) -> PoseSampleSet:
    """I.i.d. uniform draws over the prior box (x, y and theta independent)."""
    if n_p < 1:
        raise ValueError("n_p must be at least 1")
    lo = np.array([b[0] for b in prior.bounds])
    hi = np.array([b[1] for b in prior.bounds])
    return PoseSampleSet(lo + (hi - lo) * rng.random((n_p, 3)))


class ScanPair:
    """Source and destination clouds with the pose-independent quantities cached."""

    def __init__(self, source, destination: SurfaceCloud, model: ScanModel):
        spts = np.asarray(getattr(source, "points", source), dtype=float).reshape(-1, 2)
        surf = destination.valid_only()
        self.source = spts
        self.dest = surf.points
        self.normals = surf.normals
        self.model = model
        self.log_fna = model.clutter.log_density(spts)
        bad = np.flatnonzero(~np.isfinite(self.log_fna))
        if len(bad):
            raise SupportViolation(f"source point {int(bad[0]) + 1} lies outside the clutter support")
        self.log_v = float(np.sum(self.log_fna))
        self.c, self.a, self.b = _kernels.pair_coefficients(self.dest, self.normals, self.source)

    @property
    def n_d(self) -> int:
        return len(self.dest)

    @property
    def n_s(self) -> int:
        return len(self.source)

    def log_pair_scale(self) -> np.ndarray:
        """``log(f_a / (lambda f_na(s_j)) / (sigma sqrt(2 pi)))`` per source point."""
        m = self.model
        f_a = m.assoc.f_a
        if f_a == 0.0:
            return np.full(self.n_s, -np.inf)
        return (
            math.log(f_a)
            - math.log(m.clutter.lambda_na)
            - self.log_fna
            - math.log(m.error.sigma_e)
            - LOG_SQRT_2PI
        )

    def residuals(self, pose: Pose) -> np.ndarray:
        """(N_D, N_S) matrix of point-to-plane residuals."""
        moved = pose.apply(self.source)
        return self.c[:, None] - self.normals @ moved.T

    def _offsets(self, charts):
        charts = np.atleast_2d(charts)
        return (
            _kernels.pose_offsets(self.c, self.normals, charts[:, 0], charts[:, 1]),
            np.cos(charts[:, 2]),
            np.sin(charts[:, 2]),
        )


def _cutoff(config: InferenceConfig, sigma: float) -> float:
    return config.prune_sigmas * sigma if config.prune else np.inf


@dataclass(frozen=True)
class SampleTerms:
    """Gaussian terms ``exp(-r_ijp^2 / (2 sigma^2))`` that survived pruning,
    grouped by destination ``i`` (``starts[i]:starts[i + 1]``)."""

    starts: np.ndarray
    js: np.ndarray
    ps: np.ndarray
    vals: np.ndarray


def sample_evidence(
    samples: PoseSampleSet,
    pair: ScanPair,
    config: InferenceConfig = InferenceConfig(),
) -> tuple[BeliefTable, SampleTerms | None]:
    """Association evidence at the samples, plus the surviving Gaussian terms
    when pruning is on (they are reused to score the samples afterwards).

    ``beta[i, a] = sum_p q_i(pose_p, a) v(pose_p)``, returned in log form.
    """
    m = pair.model
    n_p = len(samples)
    log_v = pair.log_v  # clutter product is the same at every sample
    out = np.empty((pair.n_d, pair.n_s + 1))
    out[:, 0] = math.log1p(-m.assoc.f_a) + math.log(n_p) + log_v
    terms = None
    if pair.n_d and pair.n_s:
        sigma = m.error.sigma_e
        u, cp, sp = pair._offsets(samples.charts)
        inv = 1.0 / (2.0 * sigma * sigma)
        if config.prune:
            sums, starts, js, ps, vals = _kernels.gaussian_terms(
                u, pair.a, pair.b, cp, sp, inv, _cutoff(config, sigma), pair.n_d * n_p
            )
            terms = SampleTerms(starts, js, ps, vals)
        else:
            sums = _kernels.gaussian_sums(u, pair.a, pair.b, cp, sp, inv, np.inf)
        with np.errstate(divide="ignore"):
            out[:, 1:] = np.log(sums) + pair.log_pair_scale()[None, :] + log_v
    rowmax = out.max(axis=1) if pair.n_d else np.zeros(0)
    bad = np.flatnonzero(~np.isfinite(rowmax))
    if len(bad):
        raise DegenerateEvidenceError(f"destination point {int(bad[0])} has no supporting evidence")
    return BeliefTable(out), terms


def compute_q_messages(
    samples: PoseSampleSet,
    pair: ScanPair,
    config: InferenceConfig = InferenceConfig(),
) -> BeliefTable:
    """Sample-average each per-destination factor over the pose samples."""
    return sample_evidence(samples, pair, config)[0]


class OutMessages:
    """Per-destination pose messages.

    Message ``i`` is the mixture
    ``(1 - f_a) w0[i] + sum_j w[i, j] f_a N(r_ij; 0, sigma^2) / (lambda f_na(s_j))``
    where ``w`` are the incoming association messages.
    """

    def __init__(self, pair: ScanPair, w0, w):
        self.pair = pair
        self.w0 = np.asarray(w0, dtype=float)
        self.w = np.ascontiguousarray(w, dtype=float)
        self._kernel_weights = {}

    def _log_weights(self, sigma: float):
        m = self.pair.model
        with np.errstate(divide="ignore"):
            lw0 = math.log1p(-m.assoc.f_a) + np.log(self.w0)
            lw = np.log(self.w) + self.pair.log_pair_scale()[None, :]
        # the pair scale carries the density normalizer for sigma_e
        return lw0, lw + math.log(m.error.sigma_e / sigma)

    def log_values(self, pose: Pose, sigma: float | None = None) -> np.ndarray:
        """Log of every message at ``pose``; exact log-sum-exp, no pruning."""
        sigma = self.pair.model.error.sigma_e if sigma is None else sigma
        lw0, lw = self._log_weights(sigma)
        r = self.pair.residuals(pose)
        terms = np.concatenate([lw0[:, None], lw - 0.5 * (r / sigma) ** 2], axis=1)
        return logsumexp(terms, axis=1)

    def message(self, i: int):
        """Message ``i`` as a callable of the pose."""
        return lambda pose: float(np.exp(self.log_values(pose)[i]))

    def kernel_weights(self, sigma: float):
        """Linear-space ``(w0, w)`` for the compiled mixture kernels, cached per sigma."""
        if sigma not in self._kernel_weights:
            lw0, lw = self._log_weights(sigma)
            self._kernel_weights[sigma] = (np.exp(lw0), np.ascontiguousarray(np.exp(lw)))
        return self._kernel_weights[sigma]

    def _rows(self, sigma: float, stride: int):
        """Kernel inputs restricted to every ``stride``-th destination."""
        key = (sigma, stride)
        if key not in self._kernel_weights:
            w0, w = self.kernel_weights(sigma)
            pair = self.pair
            sl = slice(None, None, stride)
            self._kernel_weights[key] = tuple(
                np.ascontiguousarray(x[sl]) for x in (w0, w, pair.a, pair.b, pair.c, pair.normals)
            )
        return self._kernel_weights[key]

    def log_values_batch(self, charts, sigma: float | None = None, cut: float = np.inf) -> np.ndarray:
        """(N_D, K) log message values at K chart points."""
        pair = self.pair
        sigma = pair.model.error.sigma_e if sigma is None else sigma
        w0, w = self.kernel_weights(sigma)
        u, cp, sp = pair._offsets(charts)
        return _kernels.log_mixtures(u, pair.a, pair.b, cp, sp, w0, w, 0.5 / sigma**2, cut)

    def log_total(self, charts, sigma: float | None = None, cut: float = np.inf, stride: int = 1) -> np.ndarray:
        """Sum over destinations of the log messages at K chart points.

        With ``stride > 1`` only every ``stride``-th destination is visited and
        the sum is rescaled to the full count, a cheap approximation.
        """
        pair = self.pair
        sigma = pair.model.error.sigma_e if sigma is None else sigma
        charts = np.atleast_2d(charts)
        if stride == 1:
            w0, w = self.kernel_weights(sigma)
            a, b, c, nrm = pair.a, pair.b, pair.c, pair.normals
        else:
            w0, w, a, b, c, nrm = self._rows(sigma, stride)
        u = _kernels.pose_offsets(c, nrm, charts[:, 0], charts[:, 1])
        cp, sp = np.cos(charts[:, 2]), np.sin(charts[:, 2])
        inv = 0.5 / sigma**2
        if len(cp) > 8:
            tot = _kernels.log_mixtures(u, a, b, cp, sp, w0, w, inv, cut).sum(axis=0)
        else:
            tot = _kernels.log_mixture_total(u, a, b, cp, sp, w0, w, inv, cut)
        return tot if stride == 1 else tot * (pair.n_d / len(w0))


def marginal_out_messages(pair: ScanPair, nu: np.ndarray) -> OutMessages:
    """Pose messages from the converged source-to-destination messages ``nu``.

    The incoming message for ``a_i = j`` relative to ``a_i = 0`` is
    ``nu[j, i]``; the weight of ``a_i = 0`` is 1.
    """
    w = np.ascontiguousarray(np.asarray(nu, dtype=float).T.reshape(pair.n_d, pair.n_s))
    return OutMessages(pair, np.ones(pair.n_d), w)


class Posterior:
    """Unnormalized approximate marginal posterior of the relative pose.

    ``log f(pose | z) = log prior(pose) + log v(pose) + sum_i log message_i(pose)``
    """

    def __init__(self, prior: PosePrior, messages: OutMessages, config: InferenceConfig = InferenceConfig()):
        self.prior = prior
        self.messages = messages
        self.config = config
        self.n_evals = 0

    @property
    def pair(self) -> ScanPair:
        return self.messages.pair

    def log_value(self, pose: Pose) -> float:
        """Exact evaluation (no pruning)."""
        lp = self.prior.log_pdf(to_chart(pose))[0]
        if not np.isfinite(lp):
            return -np.inf
        return float(lp + self.pair.log_v + np.sum(self.messages.log_values(pose)))

    __call__ = log_value

    def log_values(self, charts, scale: float = 1.0, stride: int = 1) -> np.ndarray:
        """Batch evaluation at chart points; ``scale`` inflates sigma_e and
        ``stride`` thins the destinations (see :meth:`OutMessages.log_total`)."""
        charts = np.atleast_2d(np.asarray(charts, dtype=float))
        self.n_evals += len(charts)
        lp = self.prior.log_pdf(charts)
        out = np.full(len(charts), -np.inf)
        inside = np.isfinite(lp)
        if not inside.any():
            return out
        sigma = self.pair.model.error.sigma_e * scale
        if self.pair.n_d:
            mix = self.messages.log_total(charts[inside], sigma, _cutoff(self.config, sigma), stride)
        else:
            mix = 0.0
        out[inside] = lp[inside] + self.pair.log_v + mix
        return out


def sample_log_posterior(samples: PoseSampleSet, posterior: Posterior, terms: SampleTerms | None = None) -> np.ndarray:
    """Log posterior at every sample; reuses stored terms when available."""
    if terms is None or posterior.pair.n_d == 0:
        return posterior.log_values(samples.charts)
    posterior.n_evals += len(samples)
    w0, w = posterior.messages.kernel_weights(posterior.pair.model.error.sigma_e)
    mix = _kernels.sparse_log_mixtures(len(samples), w0, w, terms.starts, terms.js, terms.ps, terms.vals)
    return posterior.prior.log_pdf(samples.charts) + posterior.pair.log_v + mix.sum(axis=0)


def evaluate_log_posterior(delta_p: Pose, posterior: Posterior) -> float:
    return posterior.log_value(delta_p)


def initial_guess(samples: PoseSampleSet, posterior: Posterior) -> tuple[int, float]:
    """Index and log posterior of the best sample; ties go to the lowest index."""
    vals = posterior.log_values(samples.charts)
    p = int(np.argmax(vals))
    return p, float(vals[p])


@dataclass
class MatchResult:
    map_pose: Pose
    log_posterior_at_map: float
    association_marginals: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _nelder_mead(fun, x0, bounds, max_iters, xatol, fatol, step):
    simplex = np.vstack([x0, x0 + np.diag(step)])
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    simplex = np.clip(simplex, lo, hi)
    res = minimize(
        fun,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={
            "maxiter": max_iters,
            "xatol": xatol,
            "fatol": fatol,
            "initial_simplex": simplex,
        },
    )
    return res.x, float(res.fun), int(res.nit), bool(res.success)


def _gradient_ascent(fun, x0, bounds, max_iters, step_tol, h=1e-6):
    """Finite-difference gradient ascent with backtracking (minimizes ``fun``)."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x = np.asarray(x0, dtype=float)
    fx = fun(x)
    lr = 1e-3
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        g = np.array([(fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(3)])
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) < 1e-9:
            converged = True
            break
        while True:
            cand = np.clip(x - lr * g, lo, hi)
            fc = fun(cand)
            if fc < fx:
                break
            lr *= 0.5
            if lr < 1e-16:
                return x, fx, it, True
        if np.linalg.norm(cand - x) < step_tol:
            x, fx = cand, fc
            converged = True
            break
        x, fx = cand, fc
        lr *= 2.0
    return x, fx, it, converged


def refine_map(
    start: Pose,
    posterior: Posterior,
    max_iters: int = 100,
    extra_starts=(),
) -> tuple[Pose, float, dict]:
    """Local maximization of the log posterior over the (x, y, theta) chart.

    The objective is first maximized with an inflated noise scale and the
    scale is then shrunk along ``config.anneal`` so the search can leave the
    narrow basin it starts in; each stage runs at most ``max_iters``
    iterations. The returned pose never scores below ``start``.
    ``extra_starts`` are further chart points refined the same way; the
    search stops early once two starts reach the same optimum.
    """
    cfg = posterior.config
    x_start = to_chart(start)
    f_start = posterior.log_value(start)
    if not np.isfinite(f_start):
        raise ValueError("log posterior is not finite at the refinement start")
    bounds = posterior.prior.bounds
    sigma = posterior.pair.model.error.sigma_e
    trace = [f_start]
    total_it = 0
    converged = True

    best_x, best_f = x_start, f_start
    finals = []
    ends = []
    for x0 in [x_start, *extra_starts]:
        x = np.asarray(x0, dtype=float)
        for scale in cfg.anneal:
            stride = cfg.coarse_stride if scale >= COARSE_SCALE else 1

            def neg(c, scale=scale, stride=stride):
                return -posterior.log_values(c, scale, stride)[0]

            s = sigma * scale
            if cfg.refine_method == "nelder-mead":
                step = np.array([s, s, s / 10.0])
                # inflated stages only need to land in the right basin
                xtol, ftol = (1e-7, 1e-9) if scale == 1.0 else (1e-2 * s, 1e-3)
                x, fneg, nit, ok = _nelder_mead(neg, x, bounds, max_iters, xtol, ftol, step)
            else:
                x, fneg, nit, ok = _gradient_ascent(neg, x, bounds, max_iters, 1e-9)
            total_it += nit
        converged = converged and ok
        f = posterior.log_value(from_chart(x))
        finals.append(f)
        if f > best_f:
            best_x, best_f = x, f
            trace.append(f)
        tol = 1e-6 * max(1.0, abs(best_f))
        agree = f >= best_f - tol and any(
            abs(fe - f) <= tol and _same_pose(xe, x, sigma) for xe, fe in ends
        )
        ends.append((x, f))
        if agree:
            break
    best_x = np.array([best_x[0], best_x[1], wrap_angle(best_x[2])])
    return from_chart(best_x), best_f, {
        "refinement_iterations": total_it,
        "refine_converged": converged,
        "objective_trace": trace,
        "start_values": finals,
    }


def _same_pose(a, b, sigma):
    d = np.asarray(a) - np.asarray(b)
    return np.hypot(d[0], d[1]) < sigma and abs(wrap_angle(d[2])) < sigma / 10.0


def effective_sample_size(log_w) -> float:
    lw = np.asarray(log_w, dtype=float)
    lw = lw[np.isfinite(lw)]
    if not len(lw):
        return 0.0
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / np.sum(w * w))


def match_scans(
    source,
    destination: SurfaceCloud,
    config: InferenceConfig = InferenceConfig(),
    model: ScanModel = ScanModel(),
    prior: PosePrior = PosePrior(),
    seed: int = 0,
) -> MatchResult:
    """Estimate the relative pose taking ``source`` into ``destination``'s frame."""
    if not isinstance(source, SourceCloud):
        source = SourceCloud(source)
    if int(np.sum(destination.valid)) == 0:
        raise ValueError("destination has no valid surface normals")
    pair = ScanPair(source, destination, model)
    samples = draw_samples(prior, config.n_p, make_rng(seed, 0))
    beliefs, terms = sample_evidence(samples, pair, config)
    marginals, state = run_bp(beliefs, config.n_da, config.bp_tol, config.damping)
    posterior = Posterior(prior, marginal_out_messages(pair, state.nu), config)
    sample_vals = sample_log_posterior(samples, posterior, terms)
    p0 = int(np.argmax(sample_vals))
    f0 = float(sample_vals[p0])
    extra = []
    if config.n_starts > 1:
        if config.start_ranking == "coarse":
            rank = posterior.log_values(samples.charts, config.ranking_scale, config.coarse_stride)
        else:
            rank = sample_vals
        order = np.argsort(-rank, kind="stable")
        extra = [samples.charts[k] for k in order if k != p0][: config.n_starts - 1]
    pose, f_map, diag = refine_map(samples.pose(p0), posterior, config.n_it, extra)
    diag.update(
        bp_iterations=state.iterations,
        bp_converged=state.converged,
        initial_index=p0,
        initial_log_posterior=f0,
        sample_ess=effective_sample_size(sample_vals),
        n_evals=posterior.n_evals,
    )
    return MatchResult(pose, f_map, marginals, diag)
