"""Bound reports, sampled inequality checks and the island benchmark."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import bounds
from .bounds import lambda_theta, log_mgf_bound, mixing_time_bound, zeta_of
from .mcmc import IslandPartition, Target, auto_partition
from .model import ContextModel, Sequence, as_sequence, cpg_model
from .oracle import DEFAULT_STATE_CAP, exact_chi_square, exact_marginal
from .path import jump_counts
from .smc import EstimateReport, TemperatureLadder, run_is, run_smc, uniform_ladder

L2_STAGE_LIMIT = 2 * math.e ** 3
EMPIRICAL_DRAWS = 10 ** 6


def jackknife_second_moment_se(log_w, blocks: int = 20) -> float:
    """Delete-a-block jackknife standard error of ``mean(w^2) / mean(w)^2``."""
    lw = np.asarray(log_w, dtype=np.float64)
    w = np.exp(lw - lw.max())
    parts = np.array_split(np.arange(w.size), blocks)
    s1 = np.array([w[p].sum() for p in parts])
    s2 = np.array([(w[p] ** 2).sum() for p in parts])
    cnt = np.array([p.size for p in parts], dtype=np.float64)
    S1, S2, C = s1.sum(), s2.sum(), cnt.sum()
    loo = ((S2 - s2) / (C - cnt)) / ((S1 - s1) / (C - cnt)) ** 2
    g = len(parts)
    return float(math.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2)))


# --------------------------------------------------------------------------
# MGF check


@dataclass(frozen=True)
class MGFCheck:
    sites: tuple[int, ...]
    theta: float
    log_empirical: float
    log_bound: float

    @property
    def passed(self) -> bool:
        return self.log_empirical <= self.log_bound

    @property
    def log_ratio(self) -> float:
        """``log(bound / empirical)`` (``inf`` when the bound overflows)."""
        return self.log_bound - self.log_empirical

    def to_dict(self) -> dict:
        return {
            "sites": list(self.sites),
            "theta": self.theta,
            "log_empirical": self.log_empirical,
            "log_bound": self.log_bound,
            "log_ratio": self.log_ratio,
            "passed": self.passed,
        }


def check_mgf_bound(samples, model: ContextModel, x, y, siteset, theta: float, T: float,
                    log_weights=None) -> MGFCheck:
    """Compare the (self-normalized) sample mean of ``theta^m(P_A)`` with its bound.

    ``samples`` is a sequence of paths or of per-path jump counts on ``A``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    A = tuple(sorted(set(int(s) for s in siteset)))
    if isinstance(samples[0], (int, np.integer)):
        counts = np.asarray(samples, dtype=np.float64)
    else:
        counts = np.array([jump_counts(p, A) for p in samples], dtype=np.float64)
    lw = np.zeros(counts.size) if log_weights is None else np.asarray(log_weights, dtype=np.float64)
    log_emp = float(logsumexp(lw + counts * math.log(theta)) - logsumexp(lw))
    return MGFCheck(A, float(theta), log_emp, log_mgf_bound(model, x, y, T, A, theta))


# --------------------------------------------------------------------------
# ladder chi-square


@dataclass(frozen=True)
class StageL2:
    v: int
    beta_prev: float
    beta_next: float
    l2: float
    method: str

    @property
    def passed(self) -> bool:
        return self.l2 <= L2_STAGE_LIMIT

    def to_dict(self) -> dict:
        return {"v": self.v, "beta_prev": self.beta_prev, "beta_next": self.beta_next, "l2": self.l2,
                "method": self.method, "passed": self.passed}


def check_l2_ladder(model: ContextModel, x, y, T: float, ladder: TemperatureLadder,
                    report: EstimateReport | None = None, cap: int = DEFAULT_STATE_CAP,
                    tol: float = 1e-12) -> list[StageL2]:
    """Per-stage ``L^2`` between consecutive tempered path laws.

    Exact when the state space is within ``cap``; otherwise the empirical
    weight second moment from ``report`` (which must then be given).
    """
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    exact = model.a ** xs.n <= cap
    out = []
    z: dict[float, float] = {}

    def z_at(beta):
        if beta not in z:
            z[beta] = exact_marginal(model, xs, ys, T, beta, tol, cap).value
        return z[beta]

    for v in range(1, len(ladder.betas)):
        b0, b1 = ladder.betas[v - 1], ladder.betas[v]
        if exact:
            val = exact_chi_square(model, xs, ys, T, b0, b1, tol, cap, z_at(b0), z_at(b1))
            out.append(StageL2(v, b0, b1, val, "exact"))
        else:
            if report is None:
                raise ValueError("state space too large for the exact check and no sampled report given")
            out.append(StageL2(v, b0, b1, report.stages[v - 1].chi2_hat, "empirical"))
    return out


# --------------------------------------------------------------------------
# bound report


def bound_report(model: ContextModel, x, y, T: float, partition: IslandPartition | None = None,
                 epsilon: float = 0.25, omega: float = 2.0, samples=None, log_weights=None) -> dict:
    """All closed-form constants for one ``(model, x, y, T)`` (JSON-ready)."""
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    if partition is None:
        partition = auto_partition(model, xs, ys)
    xc, yc = xs.codes, ys.codes
    lam = lambda_theta(model, math.e, T)
    sets = {"all": tuple(range(xs.n)), "D": partition.D, "dD": partition.dD}
    for j, b in enumerate(partition.blocks):
        sets[f"I{j + 1}"] = b
        sets[f"D{j + 1}"] = partition.division_sites[j]
        sets[f"dD{j + 1}"] = partition.boundaries[j]
    zetas = {name: zeta_of(xc, yc, s, T) for name, s in sets.items()}
    lam_e = lam.value
    m_eps = {name: bounds.epsilon_threshold(z, lam_e, partition.B, epsilon) for name, z in zetas.items()}
    mix = mixing_time_bound(model, partition, xs, ys, T, epsilon, omega)
    cap = bounds.delta_beta_cap(model, xs, ys, T)
    rep = {
        "lambda": {"theta": lam.theta, "lambda1": lam.lambda1, "lambda2": lam.lambda2, "lambda3": lam.lambda3,
                   "lambda": lam.value, "log_lambda": lam.log_value, "delta_tilde": bounds.delta_tilde(model),
                   "delta": bounds.delta(model)},
        "zeta": zetas,
        "M_eps": m_eps,
        "mixing_time": {"epsilon": epsilon, "omega": omega, "log_value": mix.log_value, "value": mix.value,
                        "c1": mix.c1, "c2": mix.c2, "c3": mix.c3, "chain": "lazy"},
        "delta_beta_cap": {"log_cap": cap.log_cap, "cap": cap.cap, "phi_cap": cap.phi_cap,
                           "zeta": cap.zeta},
        "partition": partition.to_dict(),
    }
    if samples is not None:
        checks = {name: check_mgf_bound(samples, model, xs, ys, s, math.e, T, log_weights).to_dict()
                  for name, s in sets.items() if name == "all" or name.startswith(("D", "dD"))}
        rep["mgf_checks"] = checks
    return rep


# --------------------------------------------------------------------------
# island benchmark


def island_pair(r_I: int) -> tuple[str, str]:
    """Endpoints ``T (TCAT)^r T -> T (TTGT)^r T`` of the island problem."""
    if r_I < 1:
        raise ValueError("r_I must be at least 1")
    return "T" + "TCAT" * r_I + "T", "T" + "TTGT" * r_I + "T"


@dataclass
class IslandRow:
    r_I: int
    n: int
    r: int
    T: float
    r_star: int
    B: int
    is_chi2: float
    is_chi2_method: str
    is_chi2_hat: float
    is_chi2_se: float | None
    p_exact: float | None
    smc_rel_err_max: float | None
    smc_rel_errs: list = field(default_factory=list)
    smc_stage_l2_hat_max: float = float("nan")
    smc_stage_l2_exact_max: float | None = None
    V: int = 0
    wall_time: float = 0.0

    CSV_COLUMNS = ("r_I", "n", "r", "T", "r_star", "B", "V", "is_chi2", "is_chi2_method", "is_chi2_hat",
                   "is_chi2_se", "p_exact", "smc_rel_err_max", "smc_stage_l2_hat_max", "smc_stage_l2_exact_max")

    def to_dict(self, timing: bool = False) -> dict:
        d = {c: getattr(self, c) for c in self.CSV_COLUMNS}
        d["smc_rel_errs"] = list(self.smc_rel_errs)
        if timing:
            d["wall_time"] = self.wall_time
        return d


def bench_island(r_max: int = 3, lam: float = 2.0, N: int = 4096, seeds=(0,), V: int = 8, s: int | None = None,
                 is_N: int | None = None, cap: int = DEFAULT_STATE_CAP, threads: int = 1) -> list[IslandRow]:
    """IS-versus-SMC contrast on the island family ``r_I = 1..r_max`` with ``T = r/n``.

    The IS column is the exact ``L^2`` between the full and independent-site
    path laws where the state space fits under ``cap``, otherwise the empirical
    weight second moment from ``is_N`` draws (default ``10**6``).  SMC uses a uniform ladder with
    ``V`` stages and one block per island.
    """
    model = cpg_model(lam)
    rows = []
    seeds = list(seeds)
    for r_I in range(1, r_max + 1):
        t0 = time.perf_counter()
        x, y = island_pair(r_I)
        xs, ys = Sequence.from_string(x), Sequence.from_string(y)
        n, r = xs.n, xs.hamming(ys)
        T = r / n
        target = Target.build(model, xs, ys, T)
        within = model.a ** n <= cap
        draws = is_N if is_N is not None else (N if within else EMPIRICAL_DRAWS)
        is_rep = run_is(model, xs, ys, T, N=draws, seed=seeds[0], threads=threads)
        chi2_se = jackknife_second_moment_se(is_rep.final_log_w)
        if within:
            chi2 = exact_chi_square(model, xs, ys, T, 0.0, 1.0, cap=cap)
            method = "exact"
            p = exact_marginal(model, xs, ys, T, cap=cap).value
        else:
            chi2 = is_rep.stages[0].chi2_hat
            method = "empirical"
            p = None
        ladder = uniform_ladder(V)
        errs, l2max = [], 0.0
        for seed in seeds:
            rep = run_smc(model, xs, ys, T, ladder, N, s, seed, target=target, threads=threads)
            l2max = max(l2max, max(st.chi2_hat for st in rep.stages))
            if p is not None:
                errs.append(abs(rep.z / p - 1))
        l2_exact = None
        if within:
            l2_exact = max(st.l2 for st in check_l2_ladder(model, xs, ys, T, ladder, cap=cap))
        rows.append(IslandRow(
            r_I, n, r, T, target.partition.r_star, target.partition.B, chi2, method, is_rep.stages[0].chi2_hat,
            chi2_se, p, max(errs) if errs else None, errs, l2max, l2_exact, V, time.perf_counter() - t0,
        ))
    return rows
