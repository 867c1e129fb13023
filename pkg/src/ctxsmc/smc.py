"""Tempered sequential Monte Carlo for the transition probability ``p(y | x)``.

Particles start as exact independent-site bridges (``beta = 0``).  At stage
``v`` each particle is reweighted by ``q_v / q_{v-1}``, the ensemble is
resampled and then moved with ``s`` blocked MH steps targeting the stage-``v``
path law.  The estimate is

    log z_V = log z_0 + sum_v log mean_i w_v(P_i).
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .bounds import delta_beta_cap
from .bridge import log_ism_marginal
from .mcmc import IslandPartition, Target
from .model import ContextModel, TemperedModelView, as_sequence
from .path import Path, log_density_dsm

DEFAULT_N = 4096


class LadderError(RuntimeError):
    """The tempering ladder would need more stages than allowed."""


class WeightDegeneracy(RuntimeError):
    """Every particle weight vanished."""


# --------------------------------------------------------------------------
# ladder


@dataclass(frozen=True)
class TemperatureLadder:
    betas: tuple[float, ...]
    zeta: float | None = None
    delta_beta_cap: float | None = None
    safety: float = 1.0
    source: str = "uniform"

    def __post_init__(self):
        b = tuple(float(v) for v in self.betas)
        object.__setattr__(self, "betas", b)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("a ladder must start at 0 and end exactly at 1")
        if any(u >= v for u, v in zip(b, b[1:])):
            raise ValueError("ladder temperatures must be strictly increasing")

    @property
    def V(self) -> int:
        return len(self.betas) - 1

    def to_dict(self) -> dict:
        return {
            "V": self.V,
            "betas": list(self.betas),
            "zeta": self.zeta,
            "delta_beta_cap": self.delta_beta_cap,
            "safety": self.safety,
            "source": self.source,
        }


def uniform_ladder(V: int) -> TemperatureLadder:
    if V < 1:
        raise ValueError("V must be at least 1")
    betas = [v / V for v in range(V)] + [1.0]
    return TemperatureLadder(tuple(betas), source="uniform")


def build_ladder(model: ContextModel, x, y, T: float, safety: float = 1.0,
                 max_stages: int = 100_000) -> TemperatureLadder:
    """Uniform ladder whose step obeys the theoretical chi-square cap.

    Raises :class:`LadderError` if the cap implies more than ``max_stages``
    stages.
    """
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    if model.is_independent:
        return TemperatureLadder((0.0, 1.0), None, math.inf, safety, "theory")
    cap = delta_beta_cap(model, x, y, T)
    log_step = math.log(safety) + cap.log_delta_beta
    if -log_step > math.log(max_stages):
        raise LadderError(
            f"the step cap is exp({log_step:.6g}); a uniform ladder would need about "
            f"10^{-log_step / math.log(10):.4g} stages (limit {max_stages})"
        )
    step = math.exp(log_step)
    V = max(1, math.ceil(1.0 / step - 1e-12))
    betas = [v / V for v in range(V)] + [1.0]
    return TemperatureLadder(tuple(betas), cap.zeta, cap.cap, safety, "theory")


# --------------------------------------------------------------------------
# weights


def log_weight(view_prev: TemperedModelView, view_next: TemperedModelView, x, y, path: Path) -> float:
    """``log q_next(P) - log q_prev(P)``."""
    return log_density_dsm(view_next, x, y, path) - log_density_dsm(view_prev, x, y, path)


def ess(log_w) -> float:
    lw = np.asarray(log_w, dtype=np.float64)
    m = lw.max()
    if not np.isfinite(m):
        raise WeightDegeneracy("no finite weight")
    w = np.exp(lw - m)
    return float(w.sum() ** 2 / (w * w).sum())


def normalized_weights(log_w) -> np.ndarray:
    lw = np.asarray(log_w, dtype=np.float64)
    if not np.isfinite(lw.max()):
        raise WeightDegeneracy("every weight is zero")
    w = np.exp(lw - logsumexp(lw))
    return w / w.sum()


def resample(log_w, rng: np.random.Generator, scheme: str = "multinomial") -> np.ndarray:
    """Ancestor indices drawn with probability proportional to the weights."""
    w = normalized_weights(log_w)
    N = w.size
    cum = np.cumsum(w)
    cum[-1] = 1.0
    if scheme == "multinomial":
        u = rng.random(N)
    elif scheme == "systematic":
        u = (rng.random() + np.arange(N)) / N
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cum, u, side="left"), N - 1).astype(np.int64)


def second_moment_ratio(log_w) -> float:
    """Empirical ``mean(w^2) / mean(w)^2`` of the given log-weights."""
    lw = np.asarray(log_w, dtype=np.float64)
    return float(math.exp(logsumexp(2 * lw) - math.log(lw.size) - 2 * (logsumexp(lw) - math.log(lw.size))))


def _logmeanexp(lw: np.ndarray) -> float:
    return float(logsumexp(lw) - math.log(lw.size))


# --------------------------------------------------------------------------
# reports


@dataclass
class StageRecord:
    beta: float
    log_zhat: float
    ess: float
    chi2_hat: float
    acceptance: float | None
    collisions: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "log_zhat": self.log_zhat,
            "ess": self.ess,
            "chi2_hat": self.chi2_hat,
            "acceptance": self.acceptance,
            "collisions": self.collisions,
        }


@dataclass
class EstimateReport:
    method: str
    log_z: float
    log_z0: float
    N: int
    s: int
    seed: int
    ladder: TemperatureLadder
    stages: list[StageRecord]
    partition: dict
    mean_m: float
    se_mean_m: float | None = None
    se_z: float | None = None
    wall_time: float | None = None
    # final (weighted) particles; not serialized
    final_m: np.ndarray | None = field(default=None, repr=False)
    final_log_w: np.ndarray | None = field(default=None, repr=False)
    final_paths: list | None = field(default=None, repr=False)

    @property
    def z(self) -> float:
        return math.exp(self.log_z)

    @property
    def theory_N(self) -> str:
        return "ceil(20 V^3 / (eps^2 delta))"

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "method": self.method,
            "log_z": self.log_z,
            "z": self.z,
            "log_z0": self.log_z0,
            "se_z": self.se_z,
            "N": self.N,
            "s": self.s,
            "seed": self.seed,
            "V": self.ladder.V,
            "ladder": self.ladder.to_dict(),
            "stages": [st.to_dict() for st in self.stages],
            "partition": self.partition,
            "mean_m": self.mean_m,
            "se_mean_m": self.se_mean_m,
            "theory_N_formula": self.theory_N,
            "assumptions": [
                "mutation kernels are assumed to mix within s steps per stage (not verifiable at runtime)",
                "warm start from the independent-site bridge law is assumed",
            ],
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


# --------------------------------------------------------------------------
# engine


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _init_particle(target: Target, seed: int, i: int):
    g = rngmod.stream(seed, rngmod.INIT, i)
    return target.sample_mu_arrays(g)


def _weighted_mean_se(values: np.ndarray, log_w: np.ndarray) -> tuple[float, float]:
    """Self-normalized mean and delta-method standard error."""
    w = normalized_weights(log_w)
    mean = float(np.sum(w * values))
    se = float(math.sqrt(np.sum(w * w * (values - mean) ** 2)))
    return mean, se


def run_smc(model: ContextModel, x, y, T: float, ladder: TemperatureLadder, N: int = DEFAULT_N,
            s: int | None = None, seed: int = 0, partition: IslandPartition | None = None,
            threads: int = 1, lazy: bool = False, resampling: str = "multinomial",
            keep_paths: bool = False, target: Target | None = None, _final_move: bool = True) -> EstimateReport:
    """Tempered SMC estimate of ``p(y | x)`` (see module docstring)."""
    if N < 2:
        raise ValueError("N must be at least 2")
    t0 = time.perf_counter()
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    if target is None:
        target = Target.build(model, xs, ys, T, partition)
    B = target.partition.B
    if s is None:
        s = 8 * B
    if s < 1:
        raise ValueError("s must be at least 1")
    log_z0 = log_ism_marginal(model, xs, ys, T)
    if not math.isfinite(log_z0):
        raise WeightDegeneracy("independent-site transition probability is zero")

    parts = _parallel_map(lambda i: _init_particle(target, seed, i), range(N), threads)
    lq_prev = np.array([target.log_q(0.0, *p) for p in parts])
    log_z = log_z0
    stages: list[StageRecord] = []
    lw = np.zeros(N)
    betas = ladder.betas
    for v in range(1, len(betas)):
        beta = betas[v]
        lq_new = np.array(_parallel_map(lambda p: target.log_q(beta, *p), parts, threads))
        lw = lq_new - lq_prev
        if not np.isfinite(lw.max()):
            raise WeightDegeneracy(f"all weights vanished at stage {v} (beta={beta})")
        lz = _logmeanexp(lw)
        log_z += lz
        rec = StageRecord(beta, lz, ess(lw), second_moment_ratio(lw), None)
        stages.append(rec)
        if v == len(betas) - 1 and not _final_move:
            lq_prev = lq_new
            break
        anc = resample(lw, rngmod.stream(seed, rngmod.RESAMPLE, v), resampling)
        parts = [parts[a] for a in anc]

        def move(i, parts=parts, beta=beta, v=v):
            g = rngmod.stream(seed, rngmod.MUTATE, v, i)
            t, s_, b, lq, tally, held, coll, _ = target.sweep(beta, *parts[i], s, g, lazy)
            return (t, s_, b), lq, tally, coll

        moved = _parallel_map(move, range(N), threads)
        parts = [m[0] for m in moved]
        lq_prev = np.array([m[1] for m in moved])
        tallies = sum(m[2] for m in moved)
        moves = int(tallies.sum())
        rec.acceptance = float(tallies[:, 0].sum() / moves) if moves else None
        rec.collisions = int(sum(m[3] for m in moved))
        lw = np.zeros(N)

    m_final = np.array([p[0].size for p in parts], dtype=np.float64)
    mean_m, se_m = _weighted_mean_se(m_final, lw)
    paths = None
    if keep_paths:
        paths = [Path(xs, T, *p) for p in parts]
    return EstimateReport(
        method="smc", log_z=float(log_z), log_z0=float(log_z0), N=N, s=int(s), seed=int(seed), ladder=ladder,
        stages=stages, partition=target.partition.to_dict(), mean_m=mean_m, se_mean_m=se_m,
        wall_time=time.perf_counter() - t0, final_m=m_final, final_log_w=lw.copy(), final_paths=paths,
    )


def run_is(model: ContextModel, x, y, T: float, N: int = DEFAULT_N, seed: int = 0, threads: int = 1,
           keep_paths: bool = False, target: Target | None = None) -> EstimateReport:
    """Importance sampling with the independent-site bridge law as proposal.

    Identical to :func:`run_smc` with the two-point ladder ``{0, 1}`` up to
    the (skipped) final resample-move step; weighted draws are kept.
    """
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    from .mcmc import single_partition

    if target is None:
        target = Target.build(model, xs, ys, T, single_partition(model, xs, ys))
    rep = run_smc(model, xs, ys, T, TemperatureLadder((0.0, 1.0), source="is"), N, 1, seed, threads=threads,
                  keep_paths=keep_paths, target=target, _final_move=False)
    lw = rep.final_log_w
    # standard error of z0 * mean(w)
    w = np.exp(lw - lw.max())
    sd = float(np.std(w, ddof=1)) * math.exp(lw.max() + rep.log_z0)
    rep.method = "is"
    rep.s = 0
    rep.se_z = sd / math.sqrt(N)
    return rep
