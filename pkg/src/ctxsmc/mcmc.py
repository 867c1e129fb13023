"""Island partitions and the blocked Metropolis-Hastings kernel.

The kernel picks one block ``I_j`` uniformly, proposes fresh independent-site
bridges for the sites in ``I_j`` (keeping all other events), and accepts with
probability ``min(1, exp(delta))`` where

    delta = [log q(proposal) - log q(current)] - [log mu(P'_I) - log mu(P_I)].
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FilePath

import numpy as np

from . import _kernels
from .bridge import BridgeTables
from .model import ContextModel, ModelError, TemperedModelView, as_sequence
from .path import Path, site_log_densities

MAX_RETRIES = 8


# --------------------------------------------------------------------------
# partitions


class PartitionInfeasible(ValueError):
    """Mutations are too dense to separate blocks by unmutated division sites."""


@dataclass(frozen=True)
class IslandPartition:
    blocks: tuple[tuple[int, ...], ...]
    division_sites: tuple[tuple[int, ...], ...]
    boundaries: tuple[tuple[int, ...], ...]
    r_star: int
    block_r: tuple[int, ...]
    kind: str = "island"
    note: str = ""

    @property
    def B(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def D(self) -> tuple[int, ...]:
        return tuple(sorted(s for d in self.division_sites for s in d))

    @property
    def dD(self) -> tuple[int, ...]:
        return tuple(sorted(s for d in self.boundaries for s in d))

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """``(block_sites, block_ptr)`` in CSR layout for the compiled kernel."""
        sites = np.array([s for b in self.blocks for s in b], dtype=np.int64)
        ptr = np.cumsum([0] + [len(b) for b in self.blocks]).astype(np.int64)
        return sites, ptr

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "B": self.B,
            "blocks": [list(b) for b in self.blocks],
            "division_sites": [list(d) for d in self.division_sites],
            "boundaries": [list(d) for d in self.boundaries],
            "r_star": self.r_star,
            "block_r": list(self.block_r),
            "note": self.note,
        }


def mutated_sites(x, y) -> list[int]:
    return [i for i, (u, v) in enumerate(zip(x.codes, y.codes)) if u != v]


def _components(model: ContextModel, n: int, S: list[int]) -> list[list[int]]:
    """Connected components of mutated sites whose context sets intersect."""
    ctx = {i: model.context_set(n, i) for i in S}
    parent = {i: i for i in S}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a_idx, i in enumerate(S):
        for j in S[a_idx + 1:]:
            if ctx[i] & ctx[j]:
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in S:
        groups.setdefault(find(i), []).append(i)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def r_star(model: ContextModel, x, y) -> int:
    """Size of the largest group of mutated sites linked by overlapping contexts."""
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    S = mutated_sites(xs, ys)
    if not S:
        return 0
    return max(len(c) for c in _components(model, xs.n, S))


def _division(model: ContextModel, n: int, blocks: list[list[int]]):
    owner = np.empty(n, dtype=np.int64)
    for j, b in enumerate(blocks):
        owner[b] = j
    ctx = [model.context_set(n, i) for i in range(n)]
    D, dD = [], []
    for j, b in enumerate(blocks):
        if model.variant == "neighborhood":
            nbrs = {j - 1, j + 1}
            d = sorted(i for i in b if any(owner[c] in nbrs for c in ctx[i]))
        else:
            # edge sites: contexts reaching out of the block, or reached from outside
            bset = set(b)
            d = sorted(
                i for i in b
                if any(owner[c] != j for c in ctx[i])
                or any(i in ctx[l] for l in range(n) if owner[l] != j)
            )
        reach = set().union(*(ctx[i] for i in d)) if d else set()
        bd = sorted((reach - set(d)) & set(b))
        D.append(tuple(d))
        dD.append(tuple(bd))
    return D, dD


def _finish(model, n, blocks, S, rs, kind="island", note=""):
    D, dD = _division(model, n, blocks)
    Sset = set(S)
    block_r = tuple(sum(1 for i in b if i in Sset) for b in blocks)
    part = IslandPartition(tuple(tuple(b) for b in blocks), tuple(D), tuple(dD), rs, block_r, kind, note)
    _assert_partition(part, n, Sset if kind == "island" else set())
    return part


def _assert_partition(part: IslandPartition, n: int, S: set[int]):
    covered = sorted(s for b in part.blocks for s in b)
    assert covered == list(range(n)), "blocks must partition the sites"
    for d in part.division_sites:
        assert not (set(d) & S), "division sites must be unmutated"


def single_partition(model: ContextModel, x, y, note: str = "") -> IslandPartition:
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    S = mutated_sites(xs, ys)
    return _finish(model, xs.n, [list(range(xs.n))], S, r_star(model, xs, ys), kind="single", note=note)


def build_island_partition(model: ContextModel, x, y) -> IslandPartition:
    """Blocks built around groups of context-linked mutations.

    Neighborhood models: each group of mutated sites ``lo..hi`` claims the core
    ``[lo - k/2, hi + k/2]``; unmutated corridors between cores are attached
    whole to the larger neighbouring block (ties to the right), prefix and
    suffix to the end blocks.  Explicit-context models: each group claims the
    union of its context sets (overlapping claims merge), and the remaining
    sites form one extra block.

    Raises :class:`PartitionInfeasible` when a mutated site would be a
    division site.
    """
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    n = xs.n
    S = mutated_sites(xs, ys)
    if not S:
        return _finish(model, n, [list(range(n))], S, 0)
    comps = _components(model, n, S)
    rs = max(len(c) for c in comps)
    if model.variant == "neighborhood":
        h = model.k // 2
        cores = [[max(0, c[0] - h), min(n - 1, c[-1] + h)] for c in comps]
        for a_, b_ in zip(cores, cores[1:]):
            if a_[1] >= b_[0]:
                raise PartitionInfeasible("mutation groups are too close to separate")
        cores[0][0] = 0
        cores[-1][1] = n - 1
        for j in range(len(cores) - 1):
            left, right = cores[j], cores[j + 1]
            gap = right[0] - left[1] - 1
            if gap <= 0:
                continue
            if (left[1] - left[0]) > (right[1] - right[0]):
                left[1] = right[0] - 1
            else:
                right[0] = left[1] + 1
        blocks = [list(range(lo, hi + 1)) for lo, hi in cores]
    else:
        claims = [set().union(*(model.context_set(n, i) for i in c)) for c in comps]
        merged: list[set] = []
        for cl in claims:
            hit = [m for m in merged if m & cl]
            for m in hit:
                merged.remove(m)
                cl |= m
            merged.append(cl)
        merged.sort(key=min)
        rest = set(range(n)) - set().union(*merged)
        blocks = [sorted(m) for m in merged] + ([sorted(rest)] if rest else [])
    D, _ = _division(model, n, blocks)
    Sset = set(S)
    for j, d in enumerate(D):
        if set(d) & Sset:
            raise PartitionInfeasible(f"mutated site(s) {sorted(set(d) & Sset)} fall on the edge of block {j}")
    return _finish(model, n, blocks, S, rs)


def auto_partition(model: ContextModel, x, y) -> IslandPartition:
    """Island partition, falling back to a single block (with a warning) if infeasible."""
    try:
        return build_island_partition(model, x, y)
    except PartitionInfeasible as exc:
        msg = f"island partition infeasible ({exc}); using a single block"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return single_partition(model, x, y, note=msg)


def partition_from_blocks(model: ContextModel, x, y, blocks) -> IslandPartition:
    xs = as_sequence(x, model.alphabet)
    ys = as_sequence(y, model.alphabet)
    blocks = [sorted(int(s) for s in b) for b in blocks]
    if sorted(s for b in blocks for s in b) != list(range(xs.n)):
        raise ModelError("partition blocks must cover every site exactly once")
    return _finish(model, xs.n, blocks, mutated_sites(xs, ys), r_star(model, xs, ys), kind="file")


def load_partition(model: ContextModel, x, y, source) -> IslandPartition:
    """Read blocks from a JSON file ``{"blocks": [[0, 1, ...], ...]}``."""
    try:
        doc = json.loads(FilePath(source).read_text())
        blocks = doc["blocks"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelError(f"cannot read partition file {source}: {exc}") from None
    return partition_from_blocks(model, x, y, blocks)


# --------------------------------------------------------------------------
# kernel


@dataclass(frozen=True, eq=False)
class Target:
    """Everything the compiled kernel needs for one ``(model, x, y, T)``."""

    model: ContextModel
    x: np.ndarray
    y: np.ndarray
    T: float
    tables: BridgeTables
    partition: IslandPartition
    max_retries: int = MAX_RETRIES

    @classmethod
    def build(cls, model: ContextModel, x, y, T: float, partition: IslandPartition | None = None,
              max_retries: int = MAX_RETRIES) -> "Target":
        xs = as_sequence(x, model.alphabet)
        ys = as_sequence(y, model.alphabet)
        if xs.n != ys.n:
            raise ModelError("x and y differ in length")
        if partition is None:
            partition = auto_partition(model, xs, ys)
        tables = BridgeTables.build(model, xs, ys, T)
        if max_retries < 0:
            raise ValueError("max_retries must be nonnegative")
        return cls(model, tables.x, tables.y, float(T), tables, partition, int(max_retries))

    @property
    def n(self) -> int:
        return int(self.x.size)

    def x_seq(self):
        return as_sequence(self.x.tolist(), self.model.alphabet)

    @cached_property
    def _cm(self):
        return self.model.compiled(self.n)

    @cached_property
    def _flat(self):
        return self.partition.flat()

    @cached_property
    def _all_sites(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int64)

    def log_q(self, beta: float, times, sites, bases) -> float:
        cm = self._cm
        return float(_kernels.dsm_log_density(cm.gamma, cm.ctx, cm.dependents, cm.log_phi, cm.phi_beta(beta),
                                              float(beta), self.x, self.y, self.T, times, sites, bases))

    def sample_mu_arrays(self, rng: np.random.Generator):
        """``(times, sites, bases)`` of one independent-site bridge of all sites."""
        tb = self.tables
        for _ in range(self.max_retries + 1):
            t, s, b = _kernels.sample_block(tb.R, tb.mcdf, tb.rcol, tb.mcap, tb.x, tb.y, tb.T, self._all_sites, rng)
            if not _kernels._has_tie(t):
                return t, s, b
        raise RuntimeError("repeated event-time collisions while sampling a bridge")

    def sample_mu(self, rng: np.random.Generator) -> Path:
        return Path(self.x_seq(), self.T, *self.sample_mu_arrays(rng))

    def sweep(self, beta: float, times, sites, bases, steps: int, rng: np.random.Generator,
              lazy: bool = False, thin: int = 0):
        """Run ``steps`` MH steps; returns ``(times, sites, bases, log_q, tally, held, collisions, trace)``."""
        cm = self._cm
        bs, bp = self._flat
        B = self.partition.B
        tally = np.zeros((B, 2), dtype=np.int64)
        rows = 1 + steps // thin if thin > 0 else 0
        tm = np.zeros(rows, np.int64)
        tlq = np.zeros(rows)
        tb = np.zeros((rows, B), np.int64)
        ta = np.zeros(rows, np.int64)
        t, s, b, lq, held, coll = _kernels.mh_sweep(
            cm.gamma, cm.ctx, cm.dependents, cm.log_phi, cm.phi_beta(beta), float(beta), self.x, self.y, self.T,
            self.tables.R, self.tables.mcdf, self.tables.rcol, self.tables.mcap, bs, bp,
            np.ascontiguousarray(times, dtype=np.float64), np.ascontiguousarray(sites, dtype=np.int64),
            np.ascontiguousarray(bases, dtype=np.int64), int(steps), bool(lazy), self.max_retries, rng, tally,
            int(thin), tm, tlq, tb, ta,
        )
        trace = (tm, tlq, tb, ta) if thin > 0 else None
        return t, s, b, float(lq), tally, int(held), int(coll), trace


def log_acceptance_ratio(target: Target, beta: float, current: Path, proposal: Path, block) -> float:
    """``delta`` of the blocked MH step that replaces ``block`` of ``current`` by that of ``proposal``."""
    blk = np.asarray(sorted(int(s) for s in block), dtype=np.int64)
    lq = target.log_q(beta, current.times, current.sites, current.bases)
    lq_new = target.log_q(beta, proposal.times, proposal.sites, proposal.bases)
    y = target.y.tolist()
    mu = site_log_densities(target.model, y, current)[blk].sum()
    mu_new = site_log_densities(target.model, y, proposal)[blk].sum()
    return float((lq_new - lq) - (mu_new - mu))


@dataclass
class ChainState:
    path: Path
    log_q: float
    steps: int = 0
    accepted: np.ndarray = field(default=None)
    rejected: np.ndarray = field(default=None)
    held: int = 0
    collisions: int = 0

    @classmethod
    def start(cls, target: Target, view: TemperedModelView, path: Path) -> "ChainState":
        B = target.partition.B
        lq = target.log_q(view.beta, path.times, path.sites, path.bases)
        return cls(path, lq, 0, np.zeros(B, np.int64), np.zeros(B, np.int64))


def mh_block_step(state: ChainState, view: TemperedModelView, target: Target, rng: np.random.Generator,
                  lazy: bool = False) -> ChainState:
    """One blocked MH step targeting the tempered path law of ``view``."""
    p = state.path
    t, s, b, lq, tally, held, coll, _ = target.sweep(view.beta, p.times, p.sites, p.bases, 1, rng, lazy)
    return ChainState(
        Path(p.x0, p.T, t, s, b), lq, state.steps + 1,
        state.accepted + tally[:, 0], state.rejected + tally[:, 1],
        state.held + held, state.collisions + coll,
    )


@dataclass(frozen=True)
class ChainTrace:
    """Thinned chain summaries; row 0 describes the initial path."""

    m: np.ndarray
    log_q: np.ndarray
    block_m: np.ndarray
    accepted_flag: np.ndarray
    accepted: np.ndarray
    rejected: np.ndarray
    held: int
    collisions: int
    steps: int
    final: Path

    @property
    def acceptance_rate(self) -> float:
        moves = int(self.accepted.sum() + self.rejected.sum())
        return float(self.accepted.sum() / moves) if moves else float("nan")


def run_chain(init: Path, view: TemperedModelView, target: Target, steps: int, rng: np.random.Generator,
              thin: int = 1, lazy: bool = False) -> ChainTrace:
    """Apply ``steps`` MH steps from ``init`` and record every ``thin``-th state."""
    if steps < 0 or thin < 1:
        raise ValueError("steps must be >= 0 and thin >= 1")
    t, s, b, lq, tally, held, coll, trace = target.sweep(view.beta, init.times, init.sites, init.bases,
                                                         steps, rng, lazy, thin)
    tm, tlq, tb, ta = trace
    return ChainTrace(tm, tlq, tb, ta, tally[:, 0].copy(), tally[:, 1].copy(), held, coll, steps,
                      Path(init.x0, init.T, t, s, b))
