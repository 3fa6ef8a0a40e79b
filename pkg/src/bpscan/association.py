"""
Data-association layer: validity constraints and sum-product message passing.

Rows index destination surface points ``i``; column 0 of a belief table is the
"not associated" hypothesis and column ``j`` (1-based) is source point ``j``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class DegenerateEvidenceError(ValueError):
    """A belief row has no strictly positive entry."""


class NumericalError(FloatingPointError):
    pass


class InstanceTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class BeliefTable:
    """Per-destination association weights, stored as logs.

    Rows are only defined up to a positive factor, so each row is shifted to
    have maximum 0 before leaving log space.
    """

    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.array(self.log_weights, dtype=float, ndmin=2)
        if lw.size and np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise NumericalError("belief table contains NaN or +inf")
        if lw.shape[0]:
            rowmax = lw.max(axis=1)
            bad = np.flatnonzero(~np.isfinite(rowmax))
            if len(bad):
                raise DegenerateEvidenceError(f"belief row {int(bad[0])} has no positive entry")
        lw.setflags(write=False)
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def from_weights(cls, weights) -> "BeliefTable":
        w = np.array(weights, dtype=float, ndmin=2)
        if np.any(w < 0):
            raise ValueError("belief weights must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(w))

    @property
    def n_d(self) -> int:
        return self.log_weights.shape[0]

    @property
    def n_s(self) -> int:
        return self.log_weights.shape[1] - 1

    def weights(self) -> np.ndarray:
        """Row-rescaled linear weights (each row's maximum is 1)."""
        if self.n_d == 0:
            return np.zeros_like(self.log_weights)
        return np.exp(self.log_weights - self.log_weights.max(axis=1, keepdims=True))


@dataclass
class MessageState:
    """Messages after the last sweep.

    ``mu[i, j]`` is the destination-to-source message and ``nu[j, i]`` the
    source-to-destination message, both for the hypothesis "i and j are
    associated" relative to "they are not".
    """

    mu: np.ndarray
    nu: np.ndarray
    iterations: int
    converged: bool


def validity_psi(a) -> int:
    """1 if no nonzero association value repeats, else 0."""
    a = np.asarray(a, dtype=int).reshape(-1)
    nz = a[a != 0]
    return int(len(np.unique(nz)) == len(nz))


def pair_indicator(a_i: int, b_j: int, i: int, j: int) -> int:
    """Consistency check between ``a_i`` and ``b_j`` (indices are 1-based)."""
    if a_i == j and b_j != i:
        return 0
    if b_j == i and a_i != j:
        return 0
    return 1


def induced_b(a, n_s: int) -> np.ndarray:
    """Source-oriented vector implied by ``a`` (last writer wins on conflicts)."""
    b = np.zeros(n_s, dtype=int)
    for i, ai in enumerate(np.asarray(a, dtype=int), start=1):
        if ai:
            b[ai - 1] = i
    return b


def _within_tol(new, old, tol):
    """True when every element changed by less than ``tol`` relative to its size."""
    return bool(np.all(np.abs(new - old) <= tol * np.maximum(np.abs(new), np.abs(old))))


def run_bp(
    beliefs: BeliefTable,
    max_iters: int = 200,
    tol: float = 1e-8,
    damping: float = 0.0,
) -> tuple[np.ndarray, MessageState]:
    """Loopy sum-product over the bipartite association graph.

    Update rules, with ``w = beliefs.weights()``::

        mu[i, j] = w[i, j] / (w[i, 0] + sum_{j' != j} w[i, j'] nu[j', i])
        nu[j, i] = 1 / (1 + sum_{i' != i} mu[i', j])

    starting from ``nu = 1``. Stops when no element of ``nu`` changes by more
    than ``tol`` relative to its size, or after ``max_iters`` sweeps. ``mu``
    is a function of the previous ``nu``, so it has settled as well.

    Returns the association marginals, shape (N_D, N_S + 1), each row summing
    to one, and the final message state.
    """
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    w = beliefs.weights()
    n_d, n_s = beliefs.n_d, beliefs.n_s
    if n_d == 0 or n_s == 0:
        marg = np.zeros((n_d, n_s + 1))
        marg[:, 0] = 1.0
        return marg, MessageState(np.zeros((n_d, n_s)), np.ones((n_s, n_d)), 0, True)

    w0 = w[:, 0]
    wj = w[:, 1:]
    nu = np.ones((n_s, n_d))
    mu = np.zeros((n_d, n_s))
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        prd = wj * nu.T
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_new = wj / (w0[:, None] + prd.sum(axis=1, keepdims=True) - prd)
        if damping and it > 1:
            mu_new = damping * mu + (1.0 - damping) * mu_new
        col = mu_new.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            nu_new = 1.0 / (1.0 + col[:, None] - mu_new.T)
        if damping and it > 1:
            nu_new = damping * nu + (1.0 - damping) * nu_new
        if np.any(np.isnan(mu_new)) or np.any(np.isnan(nu_new)) or np.any(np.isinf(nu_new)):
            raise NumericalError(f"non-finite message at iteration {it}")
        done = it > 1 and _within_tol(nu_new, nu, tol)
        mu, nu = mu_new, nu_new
        if done:
            converged = True
            break

    return association_marginals(w, nu), MessageState(mu, nu, it, converged)


def association_marginals(w: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Row-normalized ``w[i, 0]`` and ``w[i, j] * nu[j, i]``."""
    marg = np.empty_like(w)
    marg[:, 0] = w[:, 0]
    marg[:, 1:] = w[:, 1:] * nu.T
    return marg / marg.sum(axis=1, keepdims=True)


def brute_force_marginals(beliefs: BeliefTable, max_hypotheses: int = 10**6) -> np.ndarray:
    """Exact association marginals by enumerating every vector ``a``."""
    n_d, n_s = beliefs.n_d, beliefs.n_s
    if (n_s + 1) ** n_d > max_hypotheses:
        raise InstanceTooLargeError(
            f"(N_S + 1)^N_D = {n_s + 1}^{n_d} exceeds {max_hypotheses} hypotheses"
        )
    w = beliefs.weights()
    marg = np.zeros_like(w)
    if n_d == 0:
        return marg
    rows = np.arange(n_d)
    for a in itertools.product(range(n_s + 1), repeat=n_d):
        if not validity_psi(a):
            continue
        weight = np.prod(w[rows, a])
        marg[rows, a] += weight
    total = marg.sum(axis=1, keepdims=True)
    if np.any(total == 0):
        raise DegenerateEvidenceError("no valid association vector has positive weight")
    return marg / total
