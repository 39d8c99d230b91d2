"""Iterative statistical solvers built on the distributed array primitives.

Three solvers operate on column-split data without ever materializing a
dense copy:

* nonnegative matrix factorization (multiplicative updates and alternating
  projected gradient),
* multidimensional scaling by majorization-minimization,
* L1-regularized Cox proportional-hazards regression by proximal gradient,
  with the m x m weight matrix replaced by a fused accumulation.

All solver state lives in per-rank dataclasses holding the distributed
operands plus preallocated workspaces; every inter-rank interaction happens
inside the distarray/distlinalg calls, so traces are reproducible and, with
``common_init`` data, independent of the rank count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import warnings

import numpy as np

from .comm import ReduceOp
from .distarray import (
    DistArray,
    empty,
    map_broadcast,
    partition_of,
    rand_fill,
    reduce_all,
    reduce_into,
    transpose,
    zeros,
)
from .distlinalg import diag_fill, diag_get, matmul, opnorm


class DegenerateConfigError(RuntimeError):
    """An embedding update hit coincident points (zero pairwise distance)."""


class NumericError(RuntimeError):
    """A solver produced nonfinite intermediate values."""


def soft_threshold(x, lam):
    """Shrink toward zero by ``lam``, zeroing the interval [-lam, lam]."""
    x = np.asarray(x)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0)


@dataclass
class ConvergenceMonitor:
    """Windowed relative-change stopping rule over an objective trace."""

    window: int = 10
    rel_tol: float = 1e-5
    history: list = field(default_factory=list)


def converged(monitor, f_new):
    """Record ``f_new``; report convergence once the window-lagged relative
    change of the objective drops below ``rel_tol``."""
    h = monitor.history
    h.append(float(f_new))
    if len(h) <= monitor.window:
        return False
    return abs(h[-1] - h[-1 - monitor.window]) / (abs(h[-1]) + 1.0) < monitor.rel_tol


# ---------------------------------------------------------------------------
# Nonnegative matrix factorization
# ---------------------------------------------------------------------------


@dataclass
class NmfState:
    """Factors (stored as Vt, W) plus the preallocated update workspaces."""

    X: DistArray
    Vt: DistArray          # r x m, transpose of the left factor
    W: DistArray           # r x n
    WXt: DistArray         # r x m
    WWt: np.ndarray        # r x r replicated
    WWtVt: DistArray       # r x m
    VtX: DistArray         # r x n
    VtV: np.ndarray        # r x r replicated
    VtVW: DistArray        # r x n
    resid: DistArray       # m x n, objective evaluation buffer
    tmp: np.ndarray        # r x m replicated matmul staging
    eps: float
    trace: list = field(default_factory=list)


def nmf_init(x, rank, seed=None, eps=1e-10):
    """Allocate NMF state with uniform(0, 1) factors generated at rank 0."""
    if x.ndim != 2:
        raise ValueError("NMF expects a 2-D data matrix")
    if reduce_all(x, ReduceOp.MIN) < 0:
        raise ValueError("NMF requires nonnegative data")
    m, n = x.shape
    comm = x.comm
    dt = x.dtype
    vt = empty((rank, m), comm, dt)
    w = empty((rank, n), comm, dt)
    rand_fill(vt, seed=seed, common_init=True)
    rand_fill(w, seed=None if seed is None else seed + 1, common_init=True)
    return NmfState(
        X=x, Vt=vt, W=w,
        WXt=empty((rank, m), comm, dt),
        WWt=np.empty((rank, rank), dtype=dt, order="F"),
        WWtVt=empty((rank, m), comm, dt),
        VtX=empty((rank, n), comm, dt),
        VtV=np.empty((rank, rank), dtype=dt, order="F"),
        VtVW=empty((rank, n), comm, dt),
        resid=empty((m, n), comm, dt),
        tmp=np.empty((rank, m), dtype=dt, order="F"),
        eps=eps,
    )


def nmf_objective(x, vt, w, state=None):
    """Squared Frobenius norm of ``X - V W`` (V given transposed)."""
    if state is None:
        resid = empty(x.shape, x.comm, x.dtype)
        tmp = None
    else:
        resid, tmp = state.resid, state.tmp
    matmul(resid, transpose(vt), w, tmp=tmp)
    d = x.local - resid.local
    part = float(np.dot(np.ravel(d, order="F"), np.ravel(d, order="F")))
    buf = np.array([part])
    x.comm.allreduce(buf, ReduceOp.SUM)
    return buf[0].item()


def _nmf_check(state):
    if reduce_all(state.X, ReduceOp.MIN) < 0:
        raise ValueError("NMF requires nonnegative data")


def nmf_multiplicative(state, iters, trace_every=1):
    """Multiplicative updates; the objective is nonincreasing."""
    s = state
    _nmf_check(s)
    eps = s.eps
    for it in range(iters):
        matmul(s.WXt, s.W, transpose(s.X), tmp=s.tmp)
        matmul(s.WWt, s.W, transpose(s.W))
        matmul(s.WWtVt, s.WWt, s.Vt)
        map_broadcast(s.Vt, lambda v, num, den: v * num / (den + eps),
                      s.Vt, s.WXt, s.WWtVt)
        matmul(s.VtX, s.Vt, s.X, tmp=s.tmp)
        matmul(s.VtV, s.Vt, transpose(s.Vt))
        matmul(s.VtVW, s.VtV, s.W)
        map_broadcast(s.W, lambda w, num, den: w * num / (den + eps),
                      s.W, s.VtX, s.VtVW)
        if trace_every and it % trace_every == 0:
            s.trace.append(nmf_objective(s.X, s.Vt, s.W, state=s))
    return s


def nmf_apg(state, iters, trace_every=1):
    """Alternating projected gradient with Frobenius-norm step sizes."""
    s = state
    _nmf_check(s)
    eps = s.eps
    for it in range(iters):
        matmul(s.WXt, s.W, transpose(s.X), tmp=s.tmp)
        matmul(s.WWt, s.W, transpose(s.W))
        matmul(s.WWtVt, s.WWt, s.Vt)
        sigma = 1.0 / (2.0 * float(np.sum(s.WWt ** 2)) + eps)
        map_broadcast(s.Vt, lambda v, vww, xw: np.maximum(0.0, v - sigma * (vww - xw)),
                      s.Vt, s.WWtVt, s.WXt)
        matmul(s.VtX, s.Vt, s.X, tmp=s.tmp)
        matmul(s.VtV, s.Vt, transpose(s.Vt))
        matmul(s.VtVW, s.VtV, s.W)
        tau = 1.0 / (2.0 * float(np.sum(s.VtV ** 2)) + eps)
        map_broadcast(s.W, lambda w, vvw, vx: np.maximum(0.0, w - tau * (vvw - vx)),
                      s.W, s.VtVW, s.VtX)
        if trace_every and it % trace_every == 0:
            s.trace.append(nmf_objective(s.X, s.Vt, s.W, state=s))
    return s


# ---------------------------------------------------------------------------
# Multidimensional scaling
# ---------------------------------------------------------------------------


@dataclass
class MdsState:
    """Embedding (one point per column) plus the MM-update workspaces."""

    Y: DistArray               # n x n target distances
    theta: DistArray           # q x n embedding
    theta_distances: DistArray  # n x n, reused for dist -> Z -> (W - Z)
    theta_WmZ: DistArray       # q x n
    d_dist: DistArray          # 1 x n distributed diagonal / Z sums
    d_local: np.ndarray        # (n, 1) replicated diagonal
    W_sums: float              # sum of unit weights per point: n - 1
    tmp: np.ndarray            # q x n replicated matmul staging
    perturb: bool = False
    trace: list = field(default_factory=list)


def mds_init(y, ndim, seed=None, perturb=False):
    """Allocate MDS state with a uniform embedding rescaled into (-1, 1)."""
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise ValueError("MDS expects a square distance matrix")
    n = y.shape[0]
    if n < 2:
        raise ValueError("MDS needs at least two points")
    comm = y.comm
    dt = y.dtype
    d_local = np.empty((n, 1), dtype=dt, order="F")
    diag_get(d_local, y)
    if np.any(d_local != 0):
        raise ValueError("target distance matrix must have a zero diagonal")
    theta = empty((ndim, n), comm, dt)
    rand_fill(theta, seed=seed, common_init=True)
    map_broadcast(theta, lambda t: 2.0 * t - 1.0, theta)
    return MdsState(
        Y=y, theta=theta,
        theta_distances=empty((n, n), comm, dt),
        theta_WmZ=empty((ndim, n), comm, dt),
        d_dist=empty((1, n), comm, dt),
        d_local=d_local,
        W_sums=float(n - 1),
        tmp=np.empty((ndim, n), dtype=dt, order="F"),
        perturb=perturb,
    )


def _embedding_distances(dist, theta, d_dist, d_local, tmp):
    """Pairwise embedding distances from the Gram matrix.

    The diagonal comes out exactly zero: the clamped quadratic form
    ``d_i + d_i - 2 g_ii`` cancels bitwise.
    """
    matmul(dist, transpose(theta), theta, tmp=tmp)
    diag_get(d_dist, dist)
    diag_get(d_local, dist)
    map_broadcast(dist, lambda g, dr, dc: np.sqrt(np.maximum(dr + dc - 2.0 * g, 0.0)),
                  dist, d_dist, d_local)


def mds_stress(theta, y, state=None):
    """Weighted squared misfit between target and embedding distances."""
    if state is None:
        n = y.shape[0]
        dist = empty((n, n), y.comm, y.dtype)
        d_dist = empty((1, n), y.comm, y.dtype)
        d_local = np.empty((n, 1), dtype=y.dtype, order="F")
        tmp = None
    else:
        dist, d_dist, d_local, tmp = (state.theta_distances, state.d_dist,
                                      state.d_local, state.tmp)
    _embedding_distances(dist, theta, d_dist, d_local, tmp)
    d = y.local - dist.local  # zero diagonals on both sides: weights drop out
    part = float(np.dot(np.ravel(d, order="F"), np.ravel(d, order="F")))
    buf = np.array([part])
    y.comm.allreduce(buf, ReduceOp.SUM)
    return buf[0].item()


def mds_fit(state, iters, trace_every=1):
    """Majorization-minimization updates; stress is nonincreasing.

    The trace records the stress of the iterate entering each update (the
    distance matrix is already in hand there), fused with the coincident-
    point check into a single reduction.
    """
    s = state
    dist = s.theta_distances
    for it in range(iters):
        _embedding_distances(dist, s.theta, s.d_dist, s.d_local, s.tmp)
        d = s.Y.local - dist.local
        owned_diag = dist.hi - dist.lo
        fused = np.array([
            float(np.dot(np.ravel(d, order="F"), np.ravel(d, order="F"))),
            float((dist.local == 0.0).sum() - owned_diag),
        ])
        s.Y.comm.allreduce(fused, ReduceOp.SUM)
        stress, zero_pairs = fused
        if trace_every and it % trace_every == 0:
            s.trace.append(float(stress))
        diag_fill(dist, np.inf)
        if zero_pairs > 0:
            if not s.perturb:
                raise DegenerateConfigError(
                    "coincident embedding points; rerun with perturb=True"
                )
            map_broadcast(dist, lambda d_: np.where(d_ == 0.0, 1e-10, d_), dist)
        map_broadcast(dist, lambda d_, y: y / d_, dist, s.Y)     # Z
        reduce_into(s.d_dist, dist)                              # Z column sums
        map_broadcast(dist, lambda z: 1.0 - z, dist)             # W - Z
        diag_fill(dist, 0.0)
        matmul(s.theta_WmZ, s.theta, dist, tmp=s.tmp)
        w2 = 2.0 * s.W_sums
        map_broadcast(s.theta, lambda t, zs, twz: (t * (zs + s.W_sums) + twz) / w2,
                      s.theta, s.d_dist, s.theta_WmZ)
    return s


# ---------------------------------------------------------------------------
# L1-regularized Cox proportional hazards
# ---------------------------------------------------------------------------


@dataclass
class CoxState:
    """Covariates, survival outcome and proximal-gradient workspaces."""

    X: DistArray           # m x n covariates, samples ordered by nonincreasing y
    y: np.ndarray          # (m,) observed times, nonincreasing
    delta: np.ndarray      # (m,) event indicators in {0, 1}
    beta: DistArray        # length-n distributed coefficients
    lam: float
    sigma: float
    Xbeta: np.ndarray      # (m,) replicated
    w: np.ndarray          # (m,) replicated risk weights exp(X beta)
    W: np.ndarray          # (m,) replicated cumulative risk sums
    pd: np.ndarray         # (m,) replicated P delta
    grad: DistArray        # length-n distributed gradient
    cuts: np.ndarray       # (m,) last index of each tied block (arange if no ties)
    trace: list = field(default_factory=list)


def _tie_cuts(y):
    neg = -np.asarray(y, dtype=np.float64)
    return np.searchsorted(neg, neg, side="right").astype(np.int64) - 1


def cox_init(x, y, delta, lam, sigma=None, ties="none"):
    """Allocate Cox state; the step size defaults to 1 / (2 ||X||_2^2)."""
    if x.ndim != 2:
        raise ValueError("Cox expects a 2-D covariate matrix")
    m, n = x.shape
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta, dtype=x.dtype)
    if y.shape != (m,) or delta.shape != (m,):
        raise ValueError("y and delta must have one entry per sample")
    if np.any(np.diff(y) > 0):
        raise ValueError("samples must be ordered by nonincreasing observed time")
    if not np.all((delta == 0) | (delta == 1)):
        raise ValueError("event indicators must be 0 or 1")
    if ties == "none":
        if np.any(np.diff(y) == 0):
            raise ValueError("tied observed times need ties='breslow'")
        cuts = np.arange(m, dtype=np.int64)
    elif ties == "breslow":
        cuts = _tie_cuts(y)
    else:
        raise ValueError(f"unknown tie mode {ties!r}")
    if sigma is None:
        norm2 = opnorm(x, "l2_power")
        sigma = 1.0 / (2.0 * norm2 * norm2)
    if sigma <= 0:
        raise ValueError("step size must be positive")
    return CoxState(
        X=x, y=y, delta=delta,
        beta=zeros((n,), x.comm, x.dtype),
        lam=float(lam), sigma=float(sigma),
        Xbeta=np.empty(m, dtype=x.dtype),
        w=np.empty(m, dtype=x.dtype),
        W=np.empty(m, dtype=x.dtype),
        pd=np.empty(m, dtype=x.dtype),
        grad=empty((n,), x.comm, x.dtype),
        cuts=cuts,
    )


_EXP_CLAMP = {np.dtype(np.float64): 700.0, np.dtype(np.float32): 85.0}


def _risk_weights(state):
    """w = exp(X beta) (overflow-clamped) and its cumulative sums W."""
    s = state
    clamp = _EXP_CLAMP[np.dtype(s.Xbeta.dtype)]
    if np.any(s.Xbeta > clamp):
        warnings.warn("linear predictor clamped before exponentiation", RuntimeWarning)
        np.exp(np.minimum(s.Xbeta, clamp), out=s.w)
    else:
        np.exp(s.Xbeta, out=s.w)
    if not np.all(np.isfinite(s.w)):
        raise NumericError("nonfinite risk weights; rescale X or lower sigma")
    np.cumsum(s.w, out=s.W)


def cox_partial_loglik(state, beta=None):
    """Log partial likelihood at ``beta`` (defaults to the state's)."""
    s = state
    matmul(s.Xbeta, s.X, beta if beta is not None else s.beta)
    _risk_weights(s)
    return float(np.sum(s.delta * (s.Xbeta - np.log(s.W[s.cuts]))))


def pi_delta(out, w, W, delta, lo, hi, comm, cuts=None):
    """Fused ``P @ delta`` where pi[i, j] = [y_i >= y_j] w_i / W_j.

    Each rank accumulates over its owned index range [lo, hi) of the risk
    sums, then the partial results are allreduce-summed; the m x m matrix is
    never materialized.  ``cuts`` extends risk sets over tied blocks.
    """
    m = len(delta)
    out[...] = 0
    if hi > lo:
        seg = np.arange(lo, hi) if cuts is None else cuts[lo:hi]
        contrib = delta[lo:hi] / W[seg]
        suffix = np.cumsum(contrib[::-1])[::-1]
        first = np.searchsorted(seg, np.arange(m), side="left")
        valid = first < (hi - lo)
        out[valid] = suffix[first[valid]]
        out *= w
    comm.allreduce(out, ReduceOp.SUM)
    return out


def cox_fit(state, iters, monitor=None, trace_every=1):
    """Proximal-gradient iterations for the L1-penalized partial likelihood.

    Each iteration records the penalized objective at the current iterate
    (so the first trace entry belongs to the initial coefficients), checks
    the optional convergence monitor, then takes one soft-thresholded step.
    """
    s = state
    m = len(s.y)
    comm = s.X.comm
    part = partition_of(m, comm.size)
    lo, hi = part.lo(comm.rank), part.hi(comm.rank)
    sigma, lam = s.sigma, s.lam
    for it in range(iters):
        matmul(s.Xbeta, s.X, s.beta)
        _risk_weights(s)
        if trace_every and it % trace_every == 0:
            loglik = float(np.sum(s.delta * (s.Xbeta - np.log(s.W[s.cuts]))))
            penalty = lam * reduce_all(s.beta, transform=np.abs)
            obj = -loglik + penalty
            s.trace.append(obj)
            if monitor is not None and converged(monitor, obj):
                break
        pi_delta(s.pd, s.w, s.W, s.delta, lo, hi, comm, cuts=s.cuts)
        dmpd = s.delta - s.pd
        matmul(s.grad, transpose(s.X), dmpd)
        map_broadcast(s.beta, lambda b, g: soft_threshold(b + sigma * g, lam),
                      s.beta, s.grad)
    return s
