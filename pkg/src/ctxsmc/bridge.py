"""Exact endpoint-conditioned sampling under the independent-site model.

Each site is an independent CTMC with generator ``Q_i``; a bridge from
``x_i`` to ``y_i`` is drawn by uniformization (number of virtual jumps, then
sorted uniform times, then states from the conditioned discrete chain) and
self-transitions are dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _kernels
from .model import ContextModel, ModelError, Sequence, as_sequence
from .oracle import _check_generator, _jump_law, small_expm
from .path import Path, SitePath

BRIDGE_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class BridgeTables:
    """Per-site uniformization tables for fixed endpoints ``x``, ``y`` and ``T``.

    ``mcdf[i]`` is the CDF of the virtual jump count at site ``i`` (padded with
    ones), ``rcol[i, m, c] = (R_i^m)[c, y_i]`` and ``mcap[i]`` the largest
    count with positive probability after truncation.
    """

    x: np.ndarray
    y: np.ndarray
    T: float
    R: np.ndarray
    mcdf: np.ndarray
    rcol: np.ndarray
    mcap: np.ndarray
    Lam: np.ndarray

    @classmethod
    def build(cls, model: ContextModel, x, y, T: float, tol: float = BRIDGE_TOL) -> "BridgeTables":
        xs = as_sequence(x, model.alphabet)
        ys = as_sequence(y, model.alphabet)
        if xs.n != ys.n:
            raise ModelError("x and y differ in length")
        n, a = xs.n, model.a
        cache: dict = {}
        per_site = []
        for i in range(n):
            Q = model.site_matrix(i)
            key = (Q.tobytes(), xs[i], ys[i])
            if key not in cache:
                cache[key] = _site_tables(Q, T, xs[i], ys[i], tol)
            per_site.append(cache[key])
        mmax = max(len(p[1]) for p in per_site)
        R = np.stack([p[0] for p in per_site])
        mcdf = np.ones((n, mmax))
        rcol = np.zeros((n, mmax, a))
        mcap = np.empty(n, np.int64)
        for i, (_, cdf, cols, _) in enumerate(per_site):
            mcdf[i, : len(cdf)] = cdf
            rcol[i, : len(cdf)] = cols
            mcap[i] = len(cdf) - 1
        Lam = np.array([p[3] for p in per_site])
        arrays = [np.asarray(xs.codes, np.int64), np.asarray(ys.codes, np.int64), R, mcdf, rcol, mcap, Lam]
        for arr in arrays:
            arr.setflags(write=False)
        return cls(arrays[0], arrays[1], float(T), *arrays[2:])


def _site_tables(Q: np.ndarray, T: float, xi: int, yi: int, tol: float):
    Lam = float(np.max(-np.diag(Q)))
    probs, cols = _jump_law(Q, T, xi, yi, tol, Lam)
    # trim the negligible upper tail so the CDF reaches 1 at the last index
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    R = np.eye(Q.shape[0]) + Q / Lam if Lam > 0 else np.eye(Q.shape[0])
    return R, cdf, cols, Lam


def sample_site_bridge(Q, T: float, xi: int, yi: int, rng: np.random.Generator, site: int = 0) -> SitePath:
    """One exact bridge of the chain ``Q`` from ``xi`` to ``yi`` over ``(0, T)``."""
    Q = _check_generator(Q)
    R, cdf, cols, _ = _site_tables(Q, T, xi, yi, BRIDGE_TOL)
    out_t = np.empty(len(cdf))
    out_b = np.empty(len(cdf), np.int64)
    k = _kernels.sample_site_events(R, cdf, cols, int(xi), int(yi), float(T), rng, out_t, out_b, 0)
    return SitePath(site, int(xi), float(T), out_t[:k], out_b[:k])


def sample_block_events(tables: BridgeTables, block, rng: np.random.Generator):
    """Merged independent bridges on the sites of ``block`` as ``(times, sites, bases)``."""
    blk = np.asarray(block, dtype=np.int64)
    return _kernels.sample_block(tables.R, tables.mcdf, tables.rcol, tables.mcap,
                                 tables.x, tables.y, tables.T, blk, rng)


def sample_ism_bridge(model: ContextModel, x, y, T: float, rng: np.random.Generator,
                      tables: BridgeTables | None = None, max_retries: int = 8) -> Path:
    """Draw a full path from the independent-site bridge law.

    The (probability zero) event of two sites jumping at the same instant
    triggers a redraw.
    """
    xs = as_sequence(x, model.alphabet)
    if tables is None:
        tables = BridgeTables.build(model, xs, y, T)
    block = np.arange(xs.n, dtype=np.int64)
    for _ in range(max_retries + 1):
        t, s, b = sample_block_events(tables, block, rng)
        if t.size < 2 or np.all(np.diff(t) > 0):
            return Path(xs, T, t, s, b)
    raise RuntimeError("repeated event-time collisions while sampling a bridge")


def log_ism_marginal(model: ContextModel, x, y, T: float) -> float:
    """``log z0 = sum_i log exp(T Q_i)[x_i, y_i]`` (``-inf`` if any factor is zero)."""
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    if xs.n != ys.n:
        raise ModelError("x and y differ in length")
    total = 0.0
    for i in range(xs.n):
        p = small_expm(model.site_matrix(i), T)[xs[i], ys[i]]
        if p <= 0:
            return -math.inf
        total += math.log(p)
    return total


ism_marginal = log_ism_marginal


def jump_count_law(Q, T: float, xi: int, yi: int, kmax: int = 60) -> np.ndarray:
    """Exact law of the number of real jumps of the ``xi -> yi`` bridge.

    Uses a counting chain on pairs ``(k, state)`` where every jump of ``Q``
    increments ``k``; ``exp(T G)[(0, xi), (k, yi)] / exp(TQ)[xi, yi]`` is the
    probability of ``k`` jumps.  This does not use uniformization and serves as
    an independent reference for the sampler.  Counts above ``kmax`` are
    lumped into the last entry.
    """
    Q = _check_generator(Q)
    a = Q.shape[0]
    off = Q - np.diag(np.diag(Q))
    G = np.zeros(((kmax + 1) * a, (kmax + 1) * a))
    for k in range(kmax + 1):
        blk = slice(k * a, (k + 1) * a)
        G[blk, blk] = np.diag(np.diag(Q))
        nxt = slice(min(k + 1, kmax) * a, (min(k + 1, kmax) + 1) * a)
        G[blk, nxt] += off
    P = scipy.linalg.expm(T * G)
    law = P[xi, yi::a]
    return law / small_expm(Q, T)[xi, yi]
