"""Alphabets, sequences and context-dependent substitution rate models.

A :class:`ContextModel` combines per-site base rates ``gamma_i(b; x_i)`` with a
context multiplier ``phi(b; context)``; raising the multiplier to an exponent
``beta`` gives the tempered family used by the SMC sampler (``beta = 0`` is the
independent-site model, ``beta = 1`` the full dependent-site model).

Site indices are 0-based throughout the package.

Context keys
------------
Multiplier tables are keyed by context strings.  For the ``neighborhood``
variant a key always has ``k + 1`` characters centred on the mutating site,
with ``-`` standing for a neighbour that falls outside the sequence, e.g.
``"-AC"`` is the context of a first site ``A`` followed by ``C`` when ``k=2``.
For the ``explicit`` variant the key is the symbols at ``sorted(C_i | {i})``.
A key may carry a target suffix, ``"ACG>T"``, to make ``phi`` depend on the
new symbol; plain keys apply to every target.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FilePath
from typing import Iterable, Mapping, Sequence as TypingSequence

import numpy as np

try:  # py>=3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

import tomli_w

PAD = "-"


class ModelError(ValueError):
    """Raised for malformed or inconsistent model specifications."""


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        syms = tuple(self.symbols)
        object.__setattr__(self, "symbols", syms)
        if len(syms) < 2:
            raise ModelError("alphabet needs at least two symbols")
        if len(set(syms)) != len(syms):
            raise ModelError(f"alphabet symbols are not distinct: {syms}")
        for s in syms:
            if len(s) != 1 or s == PAD or s == ">":
                raise ModelError(f"invalid alphabet symbol {s!r}")

    @property
    def a(self) -> int:
        return len(self.symbols)

    @property
    def q(self) -> int:
        return len(self.symbols) - 1

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def index(self, symbol: str) -> int:
        try:
            return self._lookup[symbol]
        except KeyError:
            raise ModelError(f"symbol {symbol!r} not in alphabet {''.join(self.symbols)}") from None

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index(c) for c in text], dtype=np.int64)

    def decode(self, codes: Iterable[int]) -> str:
        return "".join(self.symbols[int(c)] for c in codes)


DNA = Alphabet(("A", "C", "G", "T"))


@dataclass(frozen=True)
class Sequence:
    """An immutable sequence of alphabet indices."""

    alphabet: Alphabet
    codes: tuple[int, ...]

    def __post_init__(self):
        codes = tuple(int(c) for c in self.codes)
        object.__setattr__(self, "codes", codes)
        if not codes:
            raise ModelError("sequence must have at least one site")
        if min(codes) < 0 or max(codes) >= self.alphabet.a:
            raise ModelError("sequence entry outside alphabet")

    @classmethod
    def from_string(cls, text: str, alphabet: Alphabet = DNA) -> "Sequence":
        return cls(alphabet, tuple(alphabet.encode(text.strip())))

    @property
    def n(self) -> int:
        return len(self.codes)

    def __len__(self) -> int:
        return len(self.codes)

    def __str__(self) -> str:
        return self.alphabet.decode(self.codes)

    def __getitem__(self, i: int) -> int:
        return self.codes[i]

    @property
    def array(self) -> np.ndarray:
        arr = np.array(self.codes, dtype=np.int64)
        arr.setflags(write=False)
        return arr

    def mutated_sites(self, other: "Sequence") -> list[int]:
        if other.n != self.n:
            raise ModelError("sequences differ in length")
        return [i for i, (u, v) in enumerate(zip(self.codes, other.codes)) if u != v]

    def hamming(self, other: "Sequence") -> int:
        return len(self.mutated_sites(other))


def as_sequence(value, alphabet: Alphabet) -> Sequence:
    if isinstance(value, Sequence):
        return value
    if isinstance(value, str):
        return Sequence.from_string(value, alphabet)
    return Sequence(alphabet, tuple(int(v) for v in value))


def read_sequence(source: str, alphabet: Alphabet = DNA) -> Sequence:
    """Read a sequence from a plain-text/FASTA file, or parse ``source`` itself.

    Only the first record of a FASTA file is used.
    """
    p = FilePath(source)
    if p.is_file():
        lines = p.read_text().splitlines()
        body, seen_header = [], False
        for line in lines:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                if seen_header or body:
                    break
                seen_header = True
                continue
            body.append(line)
        if not body:
            raise ModelError(f"no sequence found in {source}")
        return Sequence.from_string("".join(body), alphabet)
    return Sequence.from_string(source, alphabet)


# --------------------------------------------------------------------------
# multipliers


@dataclass(frozen=True)
class CpGMultiplier:
    """``phi = lam ** (1_CG(x_{i-1}, x_i) + 1_CG(x_i, x_{i+1}))``."""

    lam: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ModelError("cpg lambda must be positive and finite")

    def value(self, key: str, target: str, k: int) -> float:
        left, centre, right = key[0], key[1], key[2]
        e = int(left == "C" and centre == "G") + int(centre == "C" and right == "G")
        return self.lam ** e

    @property
    def extrema(self) -> tuple[float, float]:
        # nominal range lam^{0,1,2} of the exponent form
        vals = (1.0, self.lam, self.lam ** 2)
        return min(vals), max(vals)

    def to_dict(self) -> dict:
        return {"kind": "cpg", "lambda": self.lam}


@dataclass(frozen=True)
class TableMultiplier:
    table: Mapping[str, float]
    default: float | None = None

    def __post_init__(self):
        table = {str(k): float(v) for k, v in dict(self.table).items()}
        object.__setattr__(self, "table", table)
        vals = list(table.values()) + ([] if self.default is None else [float(self.default)])
        for key, v in list(table.items()) + [("default", self.default)]:
            if v is None:
                continue
            if not (v > 0 and math.isfinite(v)):
                raise ModelError(f"multiplier entry {key!r} must be positive, got {v}")
        if not vals:
            raise ModelError("empty multiplier table")

    def value(self, key: str, target: str, k: int) -> float:
        v = self.table.get(f"{key}>{target}")
        if v is None:
            v = self.table.get(key)
        if v is None:
            v = self.default
        if v is None:
            raise ModelError(f"multiplier table has no entry for context {key!r} (target {target!r})")
        return v

    @property
    def extrema(self) -> tuple[float, float]:
        vals = list(self.table.values())
        if self.default is not None:
            vals.append(float(self.default))
        return min(vals), max(vals)

    def to_dict(self) -> dict:
        d: dict = {"kind": "table", "table": dict(sorted(self.table.items()))}
        if self.default is not None:
            d["default"] = float(self.default)
        return d


@dataclass(frozen=True)
class UnitMultiplier:
    """``phi == 1``: the independent-site model."""

    def value(self, key: str, target: str, k: int) -> float:
        return 1.0

    @property
    def extrema(self) -> tuple[float, float]:
        return 1.0, 1.0

    def to_dict(self) -> dict:
        return {"kind": "unit"}


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class ContextModel:
    """Base rates plus a context multiplier.

    ``base_rates`` is either one ``(a, a)`` matrix shared by every site or an
    ``(n, a, a)`` stack; diagonals are ignored.  ``context`` is
    ``("neighborhood", k)`` or ``("explicit", sites)`` where ``sites[i]`` lists
    the other sites in the context of site ``i``.
    """

    alphabet: Alphabet
    base_rates: np.ndarray
    variant: str = "neighborhood"
    k: int = 0
    explicit_sites: tuple[tuple[int, ...], ...] | None = None
    multiplier: CpGMultiplier | TableMultiplier | UnitMultiplier = field(default_factory=UnitMultiplier)

    def __post_init__(self):
        a = self.alphabet.a
        g = np.array(self.base_rates, dtype=np.float64)
        if g.ndim == 2:
            g = g[None]
        if g.ndim != 3 or g.shape[1:] != (a, a):
            raise ModelError(f"base rates must be ({a},{a}) or (n,{a},{a}); got {np.shape(self.base_rates)}")
        off = ~np.eye(a, dtype=bool)
        if not np.all(np.isfinite(g[:, off])) or np.any(g[:, off] <= 0):
            raise ModelError("all off-diagonal base rates must be positive and finite")
        g = g.copy()
        g[:, ~off] = 0.0
        g.setflags(write=False)
        object.__setattr__(self, "base_rates", g)

        if self.variant == "neighborhood":
            if self.k < 0 or self.k % 2:
                raise ModelError(f"neighborhood context size k must be even and >= 0, got {self.k}")
            if self.explicit_sites is not None:
                raise ModelError("explicit site lists given for a neighborhood model")
        elif self.variant == "explicit":
            if self.explicit_sites is None:
                raise ModelError("explicit context variant needs per-site index lists")
            sites = tuple(tuple(int(c) for c in cs) for cs in self.explicit_sites)
            n = len(sites)
            for i, cs in enumerate(sites):
                if any(c < 0 or c >= n for c in cs):
                    raise ModelError(f"context of site {i} references a site outside 0..{n - 1}")
            object.__setattr__(self, "explicit_sites", sites)
            if g.shape[0] not in (1, n):
                raise ModelError("per-site base rates disagree with the number of explicit contexts")
            object.__setattr__(self, "k", max(len(set(cs) - {i}) for i, cs in enumerate(sites)))
        else:
            raise ModelError(f"unknown context variant {self.variant!r}")

        if isinstance(self.multiplier, CpGMultiplier):
            if self.variant != "neighborhood" or self.k != 2:
                raise ModelError("the cpg multiplier requires a neighborhood context with k=2")
            for s in "CG":
                self.alphabet.index(s)
        if self.k == 0 and not isinstance(self.multiplier, UnitMultiplier):
            if self.variant == "neighborhood":
                # a k=0 table is allowed but carries no dependence on other sites
                pass
        if self.fixed_n is None and self.k > 0:
            # single-side truncated and full contexts must all be tabulated
            self.compiled(2 * self.k + 1)
        elif self.fixed_n is not None:
            self.compiled(self.fixed_n)

    # -- basic properties -------------------------------------------------
    @property
    def a(self) -> int:
        return self.alphabet.a

    @property
    def q(self) -> int:
        return self.alphabet.q

    @property
    def fixed_n(self) -> int | None:
        if self.variant == "explicit":
            return len(self.explicit_sites)
        if self.base_rates.shape[0] > 1:
            return self.base_rates.shape[0]
        return None

    @property
    def phi_min(self) -> float:
        return float(self.multiplier.extrema[0])

    @property
    def phi_max(self) -> float:
        return float(self.multiplier.extrema[1])

    @property
    def gamma_min(self) -> float:
        off = ~np.eye(self.a, dtype=bool)
        return float(self.base_rates[:, off].min())

    @property
    def gamma_max(self) -> float:
        off = ~np.eye(self.a, dtype=bool)
        return float(self.base_rates[:, off].max())

    @property
    def phi_star(self) -> float:
        return self.phi_max / self.phi_min

    @property
    def gamma_star(self) -> float:
        return self.gamma_max / self.gamma_min

    @property
    def is_independent(self) -> bool:
        """True when phi is identically one (the model is an ISM at every beta)."""
        return self.phi_min == 1.0 and self.phi_max == 1.0

    def tempered_extrema(self, beta: float = 1.0) -> tuple[float, float]:
        """(min, max) of ``gamma * phi**beta`` over all sites and contexts."""
        lo, hi = self.phi_min ** beta, self.phi_max ** beta
        return self.gamma_min * min(lo, hi), self.gamma_max * max(lo, hi)

    def site_matrix(self, i: int) -> np.ndarray:
        """The independent-site generator ``Q_i`` (phi == 1) of site ``i``."""
        g = self.base_rates[0 if self.base_rates.shape[0] == 1 else i]
        Q = g.copy()
        np.fill_diagonal(Q, -g.sum(axis=1))
        return Q

    # -- contexts ---------------------------------------------------------
    def context_sites(self, n: int, i: int) -> list[int | None]:
        """Ordered context positions of site ``i``; ``None`` marks a missing neighbour."""
        if not 0 <= i < n:
            raise IndexError(f"site {i} out of range 0..{n - 1}")
        if self.variant == "neighborhood":
            h = self.k // 2
            return [j if 0 <= j < n else None for j in range(i - h, i + h + 1)]
        self._check_n(n)
        return sorted(set(self.explicit_sites[i]) | {i})

    def context_set(self, n: int, i: int) -> set[int]:
        """The set ``C_i`` (including ``i`` itself)."""
        return {j for j in self.context_sites(n, i) if j is not None}

    def context_key(self, seq: TypingSequence[int], i: int) -> str:
        syms = self.alphabet.symbols
        return "".join(PAD if j is None else syms[seq[j]] for j in self.context_sites(len(seq), i))

    def _check_n(self, n: int):
        fn = self.fixed_n
        if fn is not None and fn != n:
            raise ModelError(f"model is defined for sequences of length {fn}, got {n}")

    def phi(self, key: str, target: int) -> float:
        return float(self.multiplier.value(key, self.alphabet.symbols[target], self.k))

    # -- compiled arrays -------------------------------------------------
    def compiled(self, n: int) -> "CompiledModel":
        cache = self.__dict__.setdefault("_compiled_cache", {})
        if n not in cache:
            self._check_n(n)
            cache[n] = _compile(self, n)
        return cache[n]

    def view(self, beta: float) -> "TemperedModelView":
        return TemperedModelView(self, beta)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        g = self.base_rates
        d: dict = {"alphabet": {"symbols": list(self.alphabet.symbols)}}
        if g.shape[0] == 1:
            d["base_rates"] = {"matrix": g[0].tolist()}
        else:
            d["base_rates"] = {"per_site": g.tolist()}
        if self.variant == "neighborhood":
            d["context"] = {"variant": "neighborhood", "k": int(self.k)}
        else:
            d["context"] = {"variant": "explicit", "sites": [list(cs) for cs in self.explicit_sites]}
        if not isinstance(self.multiplier, UnitMultiplier):
            d["multiplier"] = self.multiplier.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ContextModel":
        known = {"alphabet", "base_rates", "context", "multiplier"}
        extra = set(doc) - known
        if extra:
            raise ModelError(f"unknown model sections: {sorted(extra)}")
        try:
            alphabet = Alphabet(tuple(doc["alphabet"]["symbols"]))
            br = doc["base_rates"]
        except (KeyError, TypeError) as exc:
            raise ModelError(f"model is missing required section: {exc}") from None
        if "matrix" in br:
            rates = np.array(br["matrix"], dtype=np.float64)
        elif "per_site" in br:
            rates = np.array(br["per_site"], dtype=np.float64)
        elif "uniform" in br:
            rates = np.full((alphabet.a, alphabet.a), float(br["uniform"]))
        else:
            raise ModelError("base_rates needs one of 'matrix', 'per_site' or 'uniform'")
        ctx = doc.get("context", {"variant": "neighborhood", "k": 0})
        variant = ctx.get("variant", "neighborhood")
        kw: dict = {}
        if variant == "neighborhood":
            kw["k"] = int(ctx.get("k", 0))
        else:
            kw["explicit_sites"] = tuple(tuple(s) for s in ctx.get("sites", ()))
        mult = doc.get("multiplier")
        if mult is None or mult.get("kind") == "unit":
            multiplier = UnitMultiplier()
        elif mult.get("kind") == "cpg":
            multiplier = CpGMultiplier(float(mult["lambda"]))
        elif mult.get("kind") == "table":
            multiplier = TableMultiplier(mult.get("table", {}), mult.get("default"))
        else:
            raise ModelError(f"unknown multiplier kind {mult.get('kind')!r}")
        return cls(alphabet, rates, variant=variant, multiplier=multiplier, **kw)

    def __eq__(self, other):
        if not isinstance(other, ContextModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return id(self)


def load_model(source) -> ContextModel:
    """Load a model from a TOML or JSON file (or an already-parsed mapping)."""
    if isinstance(source, Mapping):
        return ContextModel.from_dict(source)
    p = FilePath(source)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ModelError(f"cannot read model file {p}: {exc}") from None
    try:
        doc = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ModelError(f"malformed model file {p}: {exc}") from None
    return ContextModel.from_dict(doc)


def save_model(model: ContextModel, path) -> None:
    p = FilePath(path)
    d = model.to_dict()
    if p.suffix == ".json":
        p.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    else:
        p.write_bytes(tomli_w.dumps(d).encode())


def cpg_model(lam: float, gamma: float = 1.0, alphabet: Alphabet = DNA) -> ContextModel:
    a = alphabet.a
    return ContextModel(alphabet, np.full((a, a), gamma), k=2, multiplier=CpGMultiplier(lam))


def symmetric_model(alphabet: Alphabet = DNA, gamma: float = 1.0) -> ContextModel:
    """Standard symmetric (Jukes-Cantor style) independent-site model."""
    a = alphabet.a
    return ContextModel(alphabet, np.full((a, a), gamma), k=0)


# --------------------------------------------------------------------------
# flat arrays for compiled kernels and the exact oracle


@dataclass(frozen=True, eq=False)
class CompiledModel:
    """Numeric tables for one sequence length.

    ``ctx[i]`` lists the context positions of site ``i`` (``-1`` for a missing
    neighbour or padding); a context is encoded as ``sum(d_p * (a+1)**p)``
    where the digit ``a`` marks a missing position.  ``log_phi[code, b]`` is
    ``log phi(b; context)`` and ``dependents[s]`` lists every site whose
    context contains ``s``.
    """

    n: int
    a: int
    gamma: np.ndarray
    ctx: np.ndarray
    dependents: np.ndarray
    log_phi: np.ndarray
    phi: np.ndarray

    @property
    def ncodes(self) -> int:
        return self.phi.shape[0]

    def codes(self, seq: np.ndarray) -> np.ndarray:
        """Context code of every site (vectorised over trailing state axis)."""
        seq = np.asarray(seq)
        radix = self.a + 1
        out = np.zeros((self.n,) + seq.shape[1:], dtype=np.int64)
        for p in range(self.ctx.shape[1]):
            pos = self.ctx[:, p]
            digit = np.where((pos >= 0).reshape((-1,) + (1,) * (seq.ndim - 1)), seq[np.maximum(pos, 0)], self.a)
            out += digit * radix ** p
        return out

    def phi_beta(self, beta: float) -> np.ndarray:
        cache = self.__dict__.setdefault("_phi_beta", {})
        key = float(beta)
        if key not in cache:
            with np.errstate(invalid="ignore"):
                pb = np.power(self.phi, key)
            pb.setflags(write=False)
            cache[key] = pb
        return cache[key]


def _compile(model: ContextModel, n: int) -> CompiledModel:
    a = model.a
    g = model.base_rates
    gamma = np.ascontiguousarray(np.broadcast_to(g, (n, a, a)) if g.shape[0] == 1 else g)
    ctx_lists = [model.context_sites(n, i) for i in range(n)]
    L = max(len(c) for c in ctx_lists)
    if (a + 1) ** L > 4_000_000:
        raise ModelError(f"context tuples of length {L} are too large to tabulate")
    ctx = np.full((n, L), -1, dtype=np.int64)
    for i, cs in enumerate(ctx_lists):
        for p, j in enumerate(cs):
            ctx[i, p] = -1 if j is None else j
    deps_lists = [[] for _ in range(n)]
    for i, cs in enumerate(ctx_lists):
        for j in cs:
            if j is not None:
                deps_lists[j].append(i)
    D = max(len(d) for d in deps_lists)
    deps = np.full((n, D), -1, dtype=np.int64)
    for s, d in enumerate(deps_lists):
        deps[s, : len(d)] = sorted(d)

    radix = a + 1
    phi = np.full((radix ** L, a), np.nan)
    syms = model.alphabet.symbols
    # tabulate only context patterns that actually occur for this length
    patterns = {}
    for i, cs in enumerate(ctx_lists):
        mask = tuple(j is not None for j in cs)
        centre = cs.index(i)
        patterns.setdefault((mask, centre, len(cs)), True)
    for (mask, centre, length) in patterns:
        real = [p for p in range(length) if mask[p]]
        for combo in itertools.product(range(a), repeat=len(real)):
            digits = [a] * L
            for p, d in zip(real, combo):
                digits[p] = d
            key = "".join(PAD if digits[p] == a else syms[digits[p]] for p in range(length))
            code = sum(d * radix ** p for p, d in enumerate(digits))
            xc = digits[centre]
            for b in range(a):
                if b == xc:
                    continue
                v = model.phi(key, b)
                if not (v > 0 and math.isfinite(v)):
                    raise ModelError(f"multiplier for context {key!r} must be positive")
                phi[code, b] = v
    with np.errstate(divide="ignore", invalid="ignore"):
        log_phi = np.log(phi)
    for arr in (gamma, ctx, deps, phi, log_phi):
        arr.setflags(write=False)
    return CompiledModel(n, a, gamma, ctx, deps, log_phi, phi)


# --------------------------------------------------------------------------
# tempered view


@dataclass(frozen=True)
class TemperedModelView:
    model: ContextModel
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ModelError(f"beta must lie in [0, 1], got {self.beta}")

    def _seq(self, seq) -> np.ndarray:
        return np.asarray(as_sequence(seq, self.model.alphabet).codes, dtype=np.int64)

    def site_rate(self, seq, i: int, b: int) -> float:
        x = self._seq(seq)
        if not 0 <= i < x.size:
            raise IndexError(f"site {i} out of range")
        if b == x[i]:
            raise ModelError("a site has no rate for substituting its own symbol")
        cm = self.model.compiled(x.size)
        code = int(cm.codes(x)[i])
        return float(cm.gamma[i, x[i], b] * cm.phi_beta(self.beta)[code, b])

    def exit_rate(self, seq, i: int) -> float:
        x = self._seq(seq)
        return sum(self.site_rate(x, i, b) for b in range(self.model.a) if b != x[i])

    def exit_rates(self, seq) -> np.ndarray:
        x = self._seq(seq)
        cm = self.model.compiled(x.size)
        codes = cm.codes(x)
        pb = cm.phi_beta(self.beta)
        out = np.empty(x.size)
        for i in range(x.size):
            row = cm.gamma[i, x[i]] * np.nan_to_num(pb[codes[i]], nan=0.0)
            out[i] = row.sum()
        return out

    def total_rate(self, seq) -> float:
        return float(self.exit_rates(seq).sum())


def context_of(model: ContextModel, seq, i: int) -> tuple[str, ...]:
    """Symbols in the context of site ``i`` in site order, missing neighbours dropped."""
    x = as_sequence(seq, model.alphabet)
    syms = model.alphabet.symbols
    return tuple(syms[x[j]] for j in model.context_sites(x.n, i) if j is not None)


def site_rate(view: TemperedModelView, seq, i: int, b: int) -> float:
    return view.site_rate(seq, i, b)


def exit_rate(view: TemperedModelView, seq, i: int) -> float:
    return view.exit_rate(seq, i)


def total_rate(view: TemperedModelView, seq) -> float:
    return view.total_rate(seq)
