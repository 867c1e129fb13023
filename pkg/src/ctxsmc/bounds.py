"""Closed-form complexity constants: jump-count scales, MGF constants, the
tempering step cap and the blocked-chain mixing-time bound.

The constants involve nested exponentials and overflow double precision for
quite ordinary models, so every quantity is also available in log form;
``inf`` in a plain value means "too large to represent", never an error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ContextModel, as_sequence


def zeta(n: int, r: int, T: float) -> float:
    """``zeta = r + r T + (n - r) T^2``."""
    if r < 0 or n < 0 or T < 0:
        raise ValueError("n, r and T must be nonnegative")
    if r > n:
        raise ValueError(f"r = {r} exceeds n = {n}")
    return r + r * T + (n - r) * T * T


def zeta_of(x, y, sites, T: float) -> float:
    sites = list(sites)
    r = sum(1 for i in sites if x[i] != y[i])
    return zeta(len(sites), r, T)


def _logaddexp(*terms: float) -> float:
    return float(np.logaddexp.reduce(np.array(terms, dtype=np.float64)))


def _exp(v: float) -> float:
    return math.exp(v) if v < 709.0 else math.inf


@dataclass(frozen=True)
class LambdaTheta:
    theta: float
    log_lambda1: float
    lambda2: float
    log_lambda3: float
    delta_tilde: float

    @property
    def lambda1(self) -> float:
        return _exp(self.log_lambda1)

    @property
    def lambda3(self) -> float:
        return _exp(self.log_lambda3)

    @property
    def log_value(self) -> float:
        """``log(lambda)`` where ``lambda = max(lambda1, lambda2, lambda3)``."""
        l2 = math.log(self.lambda2) if self.lambda2 > 0 else -math.inf
        return max(self.log_lambda1, l2, self.log_lambda3)

    @property
    def value(self) -> float:
        return _exp(self.log_value)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.lambda1, self.lambda2, self.lambda3, self.value


def lambda_theta_raw(q: int, T: float, theta: float, g_max: float, g_min: float, k: int) -> LambdaTheta:
    """MGF constant for rate extrema ``g_min <= rate <= g_max`` and context size ``k``."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    dt = q * (k + 1) * (g_max - g_min)
    log_base = 2 * math.log(q) + T * q
    # log of theta * g_max * e^{T dt}
    log_c = math.log(theta) + math.log(g_max) + T * dt
    inner = T * q * _exp(log_c)  # exponent of the trailing exponential
    log_l1 = _logaddexp(log_base, log_c + 2 * math.log(q) + inner)
    log_l3 = _logaddexp(log_base, 2 * log_c + 2 * math.log(q) + inner)
    lam2 = math.log(theta) + 2 * T * dt + math.log(g_max / g_min)
    return LambdaTheta(float(theta), log_l1, lam2, log_l3, dt)


def lambda_theta(model: ContextModel, theta: float, T: float, beta: float = 1.0) -> LambdaTheta:
    """MGF constant of the tempered model at ``beta`` (default: the full model)."""
    g_min, g_max = model.tempered_extrema(beta)
    return lambda_theta_raw(model.q, T, theta, g_max, g_min, model.k)


def delta(model: ContextModel) -> float:
    """``q (gamma_max - gamma_min)``."""
    return model.q * (model.gamma_max - model.gamma_min)


def delta_tilde(model: ContextModel, beta: float = 1.0) -> float:
    g_min, g_max = model.tempered_extrema(beta)
    return model.q * (model.k + 1) * (g_max - g_min)


# --------------------------------------------------------------------------
# tempering step


@dataclass(frozen=True)
class StepCap:
    log_cap: float
    log_lambda_e: float
    zeta: float
    phi_cap: float

    @property
    def cap(self) -> float:
        return min(math.exp(self.log_cap) if self.log_cap > -745 else 0.0, self.phi_cap)

    @property
    def log_delta_beta(self) -> float:
        return min(self.log_cap, math.log(self.phi_cap))


def delta_beta_cap(model: ContextModel, x, y, T: float) -> StepCap:
    """Largest uniform tempering step allowed by the chi-square argument.

    ``1 / (zeta * 8 lambda(e) log(max(1, phi_max^2) / min(1, phi_min))
    * (1 + T gamma_max max(1, phi_max) q (k + 1)))``, with ``lambda(e)`` at the
    full model's rate extrema, further capped by ``1 / log(1 + phi_max)``.
    The first factor is infinite when ``phi`` is identically one.
    """
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    z = zeta(xs.n, xs.hamming(ys), T)
    lam = lambda_theta(model, math.e, T, 1.0)
    pmax, pmin = model.phi_max, model.phi_min
    phibar = math.log(max(1.0, pmax ** 2) / min(1.0, pmin))
    phi_cap = 1.0 / math.log1p(pmax)
    if phibar == 0 or z == 0:
        return StepCap(math.inf, lam.log_value, z, phi_cap)
    extra = 1.0 + T * model.gamma_max * max(1.0, pmax) * model.q * (model.k + 1)
    log_cap = -(math.log(z) + math.log(8.0) + lam.log_value + math.log(phibar) + math.log(extra))
    return StepCap(log_cap, lam.log_value, z, phi_cap)


# --------------------------------------------------------------------------
# mixing time


@dataclass(frozen=True)
class MixingBound:
    log_value: float
    c1: float
    c2: float
    c3: float

    @property
    def value(self) -> float:
        return _exp(self.log_value)


def mixing_time_from_zetas(B: int, lambda_e: float, log_phi_star: float, dtilde_plus_delta: float, T: float,
                           epsilon: float, omega: float, z_I_max: float, z_Dj_max: float, z_D: float,
                           z_dD: float, z_dDj_max: float) -> MixingBound:
    """Mixing-time bound of the lazy blocked chain from precomputed ``zeta`` terms."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if omega < 1:
        raise ValueError("omega must be at least 1")
    c1 = 2 * lambda_e * log_phi_star
    c2 = 4 * lambda_e * dtilde_plus_delta
    # c3 = 3 (c1 + 2 T c2) / lambda_e, simplified so it stays finite when lambda_e overflows
    c3 = 3 * (2 * log_phi_star + 8 * T * dtilde_plus_delta)
    with np.errstate(over="ignore", invalid="ignore"):
        log_tau = (
            math.log(B)
            + math.log(math.log(80 * omega ** 4 / epsilon ** 2))
            + c3 * math.log(60 * B * omega ** 2 / epsilon ** 2)
            + c1 * (2 * z_I_max + z_Dj_max + z_D)
            + c2 * T * (z_D + z_dD + z_Dj_max + z_dDj_max + 2 * z_I_max)
        )
    if math.isnan(log_tau):
        log_tau = math.inf
    return MixingBound(float(log_tau), c1, c2, c3)


def mixing_time_bound(model: ContextModel, partition, x, y, T: float, epsilon: float, omega: float) -> MixingBound:
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    xc, yc = xs.codes, ys.codes
    lam = lambda_theta(model, math.e, T, 1.0)
    zI = max(zeta_of(xc, yc, b, T) for b in partition.blocks)
    zDj = max(zeta_of(xc, yc, d, T) for d in partition.division_sites)
    zdDj = max(zeta_of(xc, yc, d, T) for d in partition.boundaries)
    zD = zeta_of(xc, yc, partition.D, T)
    zdD = zeta_of(xc, yc, partition.dD, T)
    return mixing_time_from_zetas(partition.B, lam.value, math.log(model.phi_star), delta_tilde(model) + delta(model),
                                  T, epsilon, omega, zI, zDj, zD, zdD, zdDj)


def epsilon_threshold(zeta_A: float, lambda_e: float, B: int, epsilon: float) -> float:
    """``M_eps(A) = zeta_A lambda(e) + log(3 B / epsilon)``."""
    base = math.log(3 * B / epsilon)
    return base if zeta_A == 0 else zeta_A * lambda_e + base


# --------------------------------------------------------------------------
# MGF


def edge_sites(model: ContextModel, n: int, A) -> list[int]:
    """Sites of ``A`` whose context reaches outside ``A``."""
    A = set(int(i) for i in A)
    return sorted(i for i in A if model.context_set(n, i) - A)


def log_mgf_bound(model: ContextModel, x, y, T: float, A, theta: float) -> float:
    """``log`` of ``exp(T q |A_e| (g_max - g_min)) exp(lambda(theta) zeta_A)`` (may be ``inf``)."""
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    A = sorted(set(int(i) for i in A))
    g_min, g_max = model.tempered_extrema(1.0)
    pref = T * model.q * len(edge_sites(model, xs.n, A)) * (g_max - g_min)
    za = zeta_of(xs.codes, ys.codes, A, T)
    lam = lambda_theta(model, theta, T, 1.0)
    if za == 0:
        return pref
    return pref + _exp(lam.log_value + math.log(za))
