"""Latent substitution paths and their unnormalized log-densities."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Iterable

import numpy as np

from . import _kernels
from .model import ContextModel, ModelError, Sequence, TemperedModelView, as_sequence


class TimeCollisionError(ValueError):
    """Two events of a merged path share a time stamp."""


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Path:
    """A chronologically ordered list of substitution events on ``(0, T)``.

    ``times[j]``, ``sites[j]`` and ``bases[j]`` describe event ``j``: at time
    ``times[j]`` site ``sites[j]`` changes to symbol ``bases[j]``.  Nothing is
    checked on construction; use :func:`validate`.
    """

    x0: Sequence
    T: float
    times: np.ndarray
    sites: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "sites", _frozen(self.sites, np.int64))
        object.__setattr__(self, "bases", _frozen(self.bases, np.int64))
        if not (self.times.size == self.sites.size == self.bases.size):
            raise ValueError("times, sites and bases must have equal length")

    @classmethod
    def empty(cls, x0: Sequence, T: float) -> "Path":
        return cls(x0, T, (), (), ())

    @property
    def m(self) -> int:
        return int(self.times.size)

    @property
    def n(self) -> int:
        return self.x0.n

    def events(self) -> list[tuple[float, int, int]]:
        return list(zip(self.times.tolist(), self.sites.tolist(), self.bases.tolist()))

    def final_state(self) -> np.ndarray:
        seq = np.array(self.x0.codes, dtype=np.int64)
        for s, b in zip(self.sites, self.bases):
            seq[s] = b
        return seq

    def site_path(self, i: int) -> "SitePath":
        mask = self.sites == i
        return SitePath(i, self.x0[i], self.T, self.times[mask], self.bases[mask])

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        return (
            self.x0 == other.x0
            and self.T == other.T
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.sites, other.sites)
            and np.array_equal(self.bases, other.bases)
        )

    def __hash__(self):
        return hash((self.x0.codes, self.T, self.times.tobytes(), self.sites.tobytes(), self.bases.tobytes()))

    def __repr__(self):
        return f"Path(n={self.n}, T={self.T}, m={self.m})"


@dataclass(frozen=True, eq=False)
class SitePath:
    site: int
    start: int
    T: float
    times: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "bases", _frozen(self.bases, np.int64))

    @property
    def m(self) -> int:
        return int(self.times.size)

    @property
    def end(self) -> int:
        return int(self.bases[-1]) if self.bases.size else int(self.start)


@dataclass(frozen=True, eq=False)
class BlockPath:
    """Events of a path restricted to the site set ``sites``."""

    sites_set: frozenset
    times: np.ndarray
    sites: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sites_set", frozenset(int(s) for s in self.sites_set))
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "sites", _frozen(self.sites, np.int64))
        object.__setattr__(self, "bases", _frozen(self.bases, np.int64))

    @property
    def m(self) -> int:
        return int(self.times.size)

    def __eq__(self, other):
        if not isinstance(other, BlockPath):
            return NotImplemented
        return (
            self.sites_set == other.sites_set
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.sites, other.sites)
            and np.array_equal(self.bases, other.bases)
        )

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    kind: str  # "ordering" | "horizon" | "site" | "self-substitution" | "endpoint" | "start"
    index: int | None
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


def validate(path: Path, x, y) -> Violation | None:
    """Return ``None`` for a valid bridge from ``x`` to ``y``, else the first violation."""
    alphabet = path.x0.alphabet
    x = as_sequence(x, alphabet)
    y = as_sequence(y, alphabet)
    if path.x0 != x:
        return Violation("start", None, "path does not start at x")
    if y.n != x.n:
        return Violation("endpoint", None, "x and y differ in length")
    t = path.times
    if t.size:
        bad = np.flatnonzero(np.diff(t) <= 0)
        if bad.size:
            j = int(bad[0]) + 1
            return Violation("ordering", j, f"event {j} at t={t[j]} does not follow t={t[j - 1]}")
        if not (t[0] > 0):
            return Violation("horizon", 0, f"event time {t[0]} not in (0, T)")
        if not (t[-1] < path.T):
            return Violation("horizon", t.size - 1, f"event time {t[-1]} not in (0, T)")
    seq = list(x.codes)
    for j, (s, b) in enumerate(zip(path.sites.tolist(), path.bases.tolist())):
        if not 0 <= s < x.n:
            return Violation("site", j, f"site {s} out of range")
        if not 0 <= b < alphabet.a:
            return Violation("site", j, f"symbol {b} outside alphabet")
        if seq[s] == b:
            return Violation("self-substitution", j, f"event {j} re-writes site {s} with its current symbol")
        seq[s] = b
    if tuple(seq) != y.codes:
        diff = [i for i in range(x.n) if seq[i] != y.codes[i]]
        return Violation("endpoint", None, f"replayed path ends away from y at sites {diff}")
    return None


def _check_valid(path: Path, x, y):
    v = validate(path, x, y)
    if v is not None:
        raise ValueError(f"invalid path: {v}")


def log_density_dsm(view: TemperedModelView, x, y, path: Path) -> float:
    """Unnormalized tempered log path density under ``view``.

    Returns ``-inf`` if the path does not end at ``y``; other violations raise.
    """
    v = validate(path, x, y)
    if v is not None and v.kind != "endpoint":
        raise ValueError(f"invalid path: {v}")
    cm = view.model.compiled(path.n)
    yy = np.asarray(as_sequence(y, view.model.alphabet).codes, dtype=np.int64)
    return float(_kernels.dsm_log_density(
        cm.gamma, cm.ctx, cm.dependents, cm.log_phi, cm.phi_beta(view.beta), float(view.beta),
        np.asarray(path.x0.codes, dtype=np.int64), yy, path.T, path.times, path.sites, path.bases,
    ))


def site_log_densities(model: ContextModel, y, path: Path) -> np.ndarray:
    """Independent-site log density of each site's projected path."""
    cm = model.compiled(path.n)
    yy = np.asarray(as_sequence(y, model.alphabet).codes, dtype=np.int64)
    out = np.empty(path.n)
    _kernels.ism_site_log_density(cm.gamma, np.asarray(path.x0.codes, dtype=np.int64), yy, path.T,
                                  path.times, path.sites, path.bases, out)
    return out


def log_density_ism(model: ContextModel, x, y, path: Path) -> float:
    """Site-factorized log path density under the independent-site model."""
    v = validate(path, x, y)
    if v is not None and v.kind != "endpoint":
        raise ValueError(f"invalid path: {v}")
    return float(site_log_densities(model, y, path).sum())


def project(path: Path, siteset: Iterable[int]) -> BlockPath:
    A = frozenset(int(s) for s in siteset)
    mask = np.isin(path.sites, np.fromiter(A, dtype=np.int64, count=len(A)))
    return BlockPath(A, path.times[mask], path.sites[mask], path.bases[mask])


def merge(path: Path, siteset: Iterable[int], block: BlockPath) -> Path:
    """Replace the events of ``path`` on ``siteset`` with those of ``block``."""
    A = frozenset(int(s) for s in siteset)
    if block.sites.size and not set(block.sites.tolist()) <= A:
        raise ValueError("block contains events outside the replaced site set")
    keep = ~np.isin(path.sites, np.fromiter(A, dtype=np.int64, count=len(A)))
    t = np.concatenate([path.times[keep], block.times])
    s = np.concatenate([path.sites[keep], block.sites])
    b = np.concatenate([path.bases[keep], block.bases])
    order = np.argsort(t, kind="stable")
    t, s, b = t[order], s[order], b[order]
    if t.size > 1 and np.any(np.diff(t) == 0):
        raise TimeCollisionError("merged path has two events at the same time")
    return Path(path.x0, path.T, t, s, b)


def jump_counts(path: Path | BlockPath, siteset: Iterable[int]) -> int:
    A = np.fromiter((int(s) for s in siteset), dtype=np.int64)
    return int(np.isin(path.sites, A).sum())


# --------------------------------------------------------------------------
# serialization


def write_paths(paths: Iterable[Path], dest, header_extra: dict | None = None) -> None:
    """Write paths as TSV: a ``#`` header per path then ``t<TAB>site<TAB>symbol`` rows.

    Times are written with ``repr`` so a round trip is exact.
    """
    lines = []
    for k, p in enumerate(paths):
        syms = p.x0.alphabet.symbols
        lines.append(f"# path={k}\tn={p.n}\tT={p.T!r}\tx0={p.x0}")
        for t, s, b in zip(p.times.tolist(), p.sites.tolist(), p.bases.tolist()):
            lines.append(f"{t!r}\t{s}\t{syms[b]}")
    FilePath(dest).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_paths(source, alphabet) -> list[Path]:
    paths: list[Path] = []
    cur = None
    for raw in FilePath(source).read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            if cur is not None:
                paths.append(Path(cur["x0"], cur["T"], cur["t"], cur["s"], cur["b"]))
            fields = dict(f.split("=", 1) for f in raw[1:].strip().split("\t"))
            try:
                x0 = Sequence.from_string(fields["x0"], alphabet)
                cur = {"x0": x0, "T": float(fields["T"]), "t": [], "s": [], "b": []}
                if int(fields["n"]) != x0.n:
                    raise ModelError("path header length disagrees with x0")
            except (KeyError, ValueError) as exc:
                raise ModelError(f"malformed path header {raw!r}: {exc}") from None
            continue
        if cur is None:
            raise ModelError("path rows before header")
        t, s, b = raw.split("\t")
        cur["t"].append(float(t))
        cur["s"].append(int(s))
        cur["b"].append(alphabet.index(b))
    if cur is not None:
        paths.append(Path(cur["x0"], cur["T"], cur["t"], cur["s"], cur["b"]))
    return paths
