"""Compiled inner loops for the O(N_D * N_S * N_P) passes.

Residual of pair (i, j) at pose (cos, sin, tx, ty)::

    r = u[i, p] - cos * A[i, j] - sin * B[i, j]
    u[i, p] = n_i . d_i - n_i . t_p,  A = n_i . s_j,  B = n_i x s_j

Loops run over destination points in parallel; every reduction over j or p
happens inside one thread in a fixed order, so results do not depend on the
thread count.
"""

from __future__ import annotations

import math

import os

import numba
import numpy as np

# the bundled TBB is often too old and numba warns about it on first launch
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def pair_coefficients(dpts, nrm, spts):
    """Pose-independent pieces of the residual: ``c_i``, ``A_ij``, ``B_ij``."""
    c = np.einsum("ij,ij->i", nrm, dpts)
    a = nrm @ spts.T
    b = np.outer(nrm[:, 1], spts[:, 0]) - np.outer(nrm[:, 0], spts[:, 1])
    return c, np.ascontiguousarray(a), np.ascontiguousarray(b)


def pose_offsets(c, nrm, tx, ty):
    """``u[i, p] = c_i - n_i . t_p``."""
    return np.ascontiguousarray(c[:, None] - np.outer(nrm[:, 0], tx) - np.outer(nrm[:, 1], ty))


@numba.njit(parallel=True, cache=True, fastmath=False)
def gaussian_sums(u, a, b, cos_p, sin_p, inv_two_var, cut):
    """``S[i, j] = sum_p exp(-r_ijp^2 / (2 var))`` over samples with ``|r| < cut``."""
    n_d, n_s = a.shape
    n_p = cos_p.shape[0]
    out = np.zeros((n_d, n_s))
    for i in numba.prange(n_d):
        for j in range(n_s):
            aij = a[i, j]
            bij = b[i, j]
            acc = 0.0
            for p in range(n_p):
                r = u[i, p] - cos_p[p] * aij - sin_p[p] * bij
                if abs(r) < cut:
                    acc += math.exp(-r * r * inv_two_var)
            out[i, j] = acc
    return out


@numba.njit(parallel=True, cache=True, fastmath=False)
def log_mixtures(u, a, b, cos_p, sin_p, w0, w, inv_two_var, cut):
    """``L[i, p] = log(w0[i] + sum_j w[i, j] exp(-r_ijp^2 / (2 var)))``."""
    n_d, n_s = a.shape
    n_p = cos_p.shape[0]
    out = np.empty((n_d, n_p))
    for i in numba.prange(n_d):
        for p in range(n_p):
            up = u[i, p]
            cp = cos_p[p]
            sp = sin_p[p]
            acc = w0[i]
            for j in range(n_s):
                wij = w[i, j]
                if wij == 0.0:
                    continue
                r = up - cp * a[i, j] - sp * b[i, j]
                if abs(r) < cut:
                    acc += wij * math.exp(-r * r * inv_two_var)
            out[i, p] = math.log(acc)
    return out


@numba.njit(cache=True, fastmath=False)
def log_mixture_total(u, a, b, cos_p, sin_p, w0, w, inv_two_var, cut):
    """``sum_i L[i, p]`` for each pose, sequential (used for a handful of poses)."""
    n_d, n_s = a.shape
    n_p = cos_p.shape[0]
    out = np.zeros(n_p)
    for p in range(n_p):
        cp = cos_p[p]
        sp = sin_p[p]
        tot = 0.0
        for i in range(n_d):
            up = u[i, p]
            acc = w0[i]
            for j in range(n_s):
                wij = w[i, j]
                if wij == 0.0:
                    continue
                r = up - cp * a[i, j] - sp * b[i, j]
                if abs(r) < cut:
                    acc += wij * math.exp(-r * r * inv_two_var)
            tot += math.log(acc)
        out[p] = tot
    return out


@numba.njit(cache=True, fastmath=False)
def _pair_terms(ui, aij, bij, cos_p, sin_p, inv_two_var, cut, j, js, ps, vals, k):
    acc = 0.0
    for p in range(cos_p.shape[0]):
        r = ui[p] - cos_p[p] * aij - sin_p[p] * bij
        if abs(r) < cut:
            e = math.exp(-r * r * inv_two_var)
            js[k] = j
            ps[k] = p
            vals[k] = e
            acc += e
            k += 1
    return k, acc


@numba.njit(cache=True, fastmath=False)
def _grow(arr, size):
    out = np.empty(size, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


@numba.njit(cache=True, fastmath=False)
def gaussian_terms(u, a, b, cos_p, sin_p, inv_two_var, cut, capacity):
    """Same sums as :func:`gaussian_sums`, plus the surviving terms in sparse form.

    Returns ``(S, starts, js, ps, vals)``: the terms of destination ``i`` are
    ``starts[i]:starts[i + 1]``, ordered by source then sample. ``S`` is
    bit-identical to :func:`gaussian_sums`. Sequential; the term buffers
    start at ``capacity`` entries and double when they could overflow.
    """
    n_d, n_s = a.shape
    n_p = cos_p.shape[0]
    sums = np.zeros((n_d, n_s))
    starts = np.zeros(n_d + 1, dtype=np.int64)
    cap = max(capacity, n_p)
    js = np.empty(cap, dtype=np.int32)
    ps = np.empty(cap, dtype=np.int32)
    vals = np.empty(cap)
    k = 0
    for i in range(n_d):
        starts[i] = k
        ui = u[i]
        for j in range(n_s):
            if k + n_p > cap:
                cap = 2 * cap
                js = _grow(js, cap)
                ps = _grow(ps, cap)
                vals = _grow(vals, cap)
            k, sums[i, j] = _pair_terms(ui, a[i, j], b[i, j], cos_p, sin_p, inv_two_var, cut, j, js, ps, vals, k)
    starts[n_d] = k
    return sums, starts, js[:k], ps[:k], vals[:k]


@numba.njit(parallel=True, cache=True, fastmath=False)
def sparse_log_mixtures(n_p, w0, w, starts, js, ps, vals):
    """``L[i, p] = log(w0[i] + sum_j w[i, j] e_ijp)`` from stored terms."""
    n_d = w0.shape[0]
    out = np.empty((n_d, n_p))
    for i in numba.prange(n_d):
        for p in range(n_p):
            out[i, p] = w0[i]
        for k in range(starts[i], starts[i + 1]):
            out[i, ps[k]] += w[i, js[k]] * vals[k]
        for p in range(n_p):
            out[i, p] = math.log(out[i, p])
    return out
