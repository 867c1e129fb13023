"""Exact reference values on the full sequence state space.

Sequences are indexed in mixed radix with site 0 the most significant digit,
so for DNA ``"AC"`` is state ``0*4 + 1 = 1``.  Transition probabilities are
evaluated by uniformization: with ``R = I + Q/Lam``,

    (exp(T Q))[x, y] = sum_m Pois(m; Lam T) (R^m)[x, y],

truncated once the neglected Poisson mass is below ``tol``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy import special, stats

from .model import ContextModel, ModelError, as_sequence

DEFAULT_STATE_CAP = 4 ** 10
UNIFORMIZATION_SLACK = 1.01


class StateSpaceTooLarge(RuntimeError):
    """The full state space exceeds the configured cap."""


class OracleError(RuntimeError):
    """A series failed to converge (internal guard)."""


def _check_generator(Q: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("rate matrix must be square")
    off = Q[~np.eye(Q.shape[0], dtype=bool)]
    if not np.all(np.isfinite(Q)) or np.any(off < 0):
        raise ValueError("rate matrix has negative or non-finite off-diagonal entries")
    scale = max(1.0, float(np.abs(Q).max()))
    if np.any(np.abs(Q.sum(axis=1)) > atol * scale):
        raise ValueError("rate matrix rows must sum to zero")
    return Q


def small_expm(Q, T: float) -> np.ndarray:
    """Transition matrix ``exp(T Q)`` of a small generator."""
    Q = _check_generator(Q)
    if T < 0:
        raise ValueError("T must be nonnegative")
    P = scipy.linalg.expm(T * Q)
    return P


def poisson_truncation(mean: float, tol: float) -> int:
    """Smallest ``M`` with ``P(Pois(mean) > M) <= tol``."""
    if mean == 0:
        return 0
    lo, hi = 0, max(1, int(mean))
    while special.pdtrc(hi, mean) > tol:
        lo, hi = hi, 2 * hi
    while lo < hi:
        mid = (lo + hi) // 2
        if special.pdtrc(mid, mean) > tol:
            lo = mid + 1
        else:
            hi = mid
    return lo


def conditional_jump_dist(Q, T: float, xi: int, yi: int, tol: float = 1e-12, Lam: float | None = None) -> np.ndarray:
    """Law of the number of uniformized (virtual) jumps of a bridge ``xi -> yi``.

    ``Lam`` defaults to the largest exit rate of ``Q``.  Entry ``m`` of the
    returned vector is ``Pois(m; Lam T) (R^m)[xi, yi] / exp(TQ)[xi, yi]``;
    the vector is truncated once the neglected mass is at most ``tol``.
    """
    Q = _check_generator(Q)
    probs, _ = _jump_law(Q, T, xi, yi, tol, Lam)
    return probs


def _jump_law(Q: np.ndarray, T: float, xi: int, yi: int, tol: float, Lam: float | None):
    """(probabilities over M, R-power columns ``(R^m)[:, yi]``) for one site."""
    a = Q.shape[0]
    if Lam is None:
        Lam = float(np.max(-np.diag(Q)))
    if Lam <= 0 or T == 0:
        if xi != yi:
            raise ValueError("endpoints have zero transition probability")
        col = np.zeros((1, a))
        col[0, yi] = 1.0
        return np.array([1.0]), col
    p = small_expm(Q, T)[xi, yi]
    if not p > 0:
        raise ValueError("endpoints have zero transition probability")
    R = np.eye(a) + Q / Lam
    mean = Lam * T
    # neglected mass of the conditional law is at most the Poisson tail / p
    M = poisson_truncation(mean, tol * p)
    cols = np.empty((M + 1, a))
    v = np.zeros(a)
    v[yi] = 1.0
    for m in range(M + 1):
        cols[m] = v
        v = R @ v
    w = stats.poisson.pmf(np.arange(M + 1), mean)
    probs = w * cols[:, xi] / p
    return probs, cols


# --------------------------------------------------------------------------
# full state space


def _states(n: int, a: int, cap: int) -> np.ndarray:
    N = a ** n
    if N > cap:
        raise StateSpaceTooLarge(f"state space {a}^{n} = {N} exceeds cap {cap}")
    idx = np.arange(N, dtype=np.int64)
    powers = a ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[None, :] // powers[:, None]) % a  # (n, N)


def state_index(codes, a: int) -> int:
    k = 0
    for c in codes:
        k = k * a + int(c)
    return k


class _StateSpace:
    """Sparsity pattern of all single-site jumps on ``a**n`` sequences.

    Every state has exactly ``n q`` neighbours, so the operator is stored in
    CSR form with a fixed row length; only the data vector changes with the
    tempering exponent: ``rate = exp(log gamma + e * log phi)``.
    """

    def __init__(self, model: ContextModel, n: int, cap: int):
        a = model.a
        states = _states(n, a, cap)
        N = states.shape[1]
        cm = model.compiled(n)
        codes = cm.codes(states)  # (n, N)
        powers = a ** np.arange(n - 1, -1, -1, dtype=np.int64)
        base = np.arange(N, dtype=np.int64)
        nq = n * (a - 1)
        cols = np.empty((N, nq), dtype=np.int32)
        log_g = np.empty((N, nq))
        log_p = np.empty((N, nq))
        with np.errstate(divide="ignore"):
            lg_all = np.log(cm.gamma)
        col = 0
        for i in range(n):
            xi = states[i]
            for shift in range(1, a):
                b = (xi + shift) % a
                cols[:, col] = base + (b - xi) * powers[i]
                log_g[:, col] = lg_all[i, xi, b]
                log_p[:, col] = cm.log_phi[codes[i], b]
                col += 1
        self.N = N
        self.nq = nq
        self.indices = cols.ravel()
        self.indptr = np.arange(0, N * nq + 1, nq, dtype=np.int64)
        self.log_g = log_g.ravel()
        self.log_p = log_p.ravel()

    def rates(self, exponent: float) -> np.ndarray:
        if exponent == 0.0:
            return np.exp(self.log_g)
        return np.exp(self.log_g + exponent * self.log_p)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.N, self.N))

    def exits(self, data: np.ndarray) -> np.ndarray:
        return data.reshape(self.N, self.nq).sum(axis=1)


def _state_space(model: ContextModel, n: int, cap: int) -> _StateSpace:
    if model.a ** n > cap:
        raise StateSpaceTooLarge(f"state space {model.a}^{n} = {model.a ** n} exceeds cap {cap}")
    cache = model.__dict__.setdefault("_state_space_cache", {})
    if n not in cache:
        cache.clear()  # keep at most one (possibly large) space alive
        cache[n] = _StateSpace(model, n, cap)
    return cache[n]


def full_generator(model: ContextModel, n: int, beta: float = 1.0, cap: int = DEFAULT_STATE_CAP) -> sp.csr_matrix:
    """Sparse tempered generator on all ``a**n`` sequences."""
    ss = _state_space(model, n, cap)
    data = ss.rates(beta)
    return (ss.matrix(data) - sp.diags(ss.exits(data))).tocsr()


@dataclass(frozen=True)
class SeriesResult:
    value: float
    truncation_order: int
    Lambda: float

    def to_dict(self) -> dict:
        return {"p": self.value, "truncation_order": self.truncation_order, "Lambda": self.Lambda}


def _uniformized_entry(off: sp.csr_matrix, diag: np.ndarray, x: int, y: int, T: float, tol: float,
                       Lam: float | None = None) -> SeriesResult:
    """``exp(T (off + diag(diag)))[x, y]`` for a nonnegative ``off`` and any diagonal."""
    if Lam is None:
        Lam = UNIFORMIZATION_SLACK * max(float(np.max(-diag)), 0.0)
    if T == 0 or Lam == 0:
        # diagonal-only operator or zero time
        val = math.exp(T * diag[x]) if x == y else 0.0
        return SeriesResult(val, 0, float(Lam))
    N = diag.size
    R = (off / Lam + sp.diags(1.0 + diag / Lam)).tocsr()
    if R.nnz and R.data.min() < -1e-12:
        raise OracleError("uniformization constant too small")
    rho = float(np.asarray(R.sum(axis=1)).max())
    mean = Lam * T
    if rho <= 1.0 + 1e-15:
        M = poisson_truncation(mean, tol)
    else:
        # (R^m)[x,y] <= rho^m, so the tail is exp(mean (rho-1)) P(Pois(mean rho) > M)
        log_pref = mean * (rho - 1.0)
        target = tol * math.exp(-log_pref) if log_pref < 600 else 0.0
        if target < 1e-290:
            raise OracleError("uniformization series does not converge at this tolerance")
        M = poisson_truncation(mean * rho, target)
    if M > 200_000:
        raise OracleError(f"uniformization needs {M} terms")
    w = stats.poisson.pmf(np.arange(M + 1), mean)
    u = np.zeros(N)
    u[y] = 1.0
    acc = 0.0
    for m in range(M + 1):
        acc += w[m] * u[x]
        if m < M:
            u = R @ u
    return SeriesResult(float(acc), int(M), float(Lam))


def exact_marginal(model: ContextModel, x, y, T: float, beta: float = 1.0, tol: float = 1e-12,
                   cap: int = DEFAULT_STATE_CAP) -> SeriesResult:
    """Transition probability ``p(y | x)`` over time ``T`` under the tempered model."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if T < 0:
        raise ValueError("T must be nonnegative")
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    if xs.n != ys.n:
        raise ModelError("x and y differ in length")
    n, a = xs.n, model.a
    ss = _state_space(model, n, cap)
    if T == 0:
        return SeriesResult(1.0 if xs == ys else 0.0, 0, 0.0)
    data = ss.rates(beta)
    return _uniformized_entry(ss.matrix(data), -ss.exits(data), state_index(xs.codes, a),
                              state_index(ys.codes, a), T, tol)


def tilted_operator(model: ContextModel, n: int, beta_prev: float, beta_next: float,
                    cap: int = DEFAULT_STATE_CAP) -> tuple[sp.csr_matrix, np.ndarray]:
    """Off-diagonal part and diagonal of the second-moment operator.

    Jump rates are ``gamma * phi**(2 beta_next - beta_prev)``; the diagonal is
    ``-(2 exit_next(x) - exit_prev(x))``.  The operator is not conservative.
    """
    ss = _state_space(model, n, cap)
    off = ss.matrix(ss.rates(2.0 * beta_next - beta_prev))
    diag = -(2.0 * ss.exits(ss.rates(beta_next)) - ss.exits(ss.rates(beta_prev)))
    return off, diag


def exact_chi_square(model: ContextModel, x, y, T: float, beta_prev: float, beta_next: float,
                     tol: float = 1e-12, cap: int = DEFAULT_STATE_CAP,
                     z_prev: float | None = None, z_next: float | None = None) -> float:
    """``E[w^2] / E[w]^2`` for the incremental weight between two temperatures.

    ``z_prev``/``z_next`` may pass already computed transition probabilities.
    """
    if beta_prev == beta_next:
        return 1.0
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    n, a = xs.n, model.a
    _state_space(model, n, cap)
    if z_prev is None:
        z_prev = exact_marginal(model, xs, ys, T, beta_prev, tol, cap).value
    if z_next is None:
        z_next = exact_marginal(model, xs, ys, T, beta_next, tol, cap).value
    off, diag = tilted_operator(model, n, beta_prev, beta_next, cap)
    row_off = np.asarray(off.sum(axis=1)).ravel()
    Lam = UNIFORMIZATION_SLACK * max(float(np.max(-diag)), float(np.max(row_off)), 1e-300)
    second = _uniformized_entry(off, diag, state_index(xs.codes, a), state_index(ys.codes, a), T, tol, Lam).value
    return float(second * z_prev / z_next ** 2)
