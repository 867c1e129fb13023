"""Run configuration: command-line flags merged over an optional TOML file.

The file mirrors :class:`RunConfig` in typed sections::

    [run]      subcommand, seed, threads
    [inputs]   model, from, to, T, beta, batch, samples
    [sampler]  N, s, safety, steps, thin, lazy, partition, n_draws,
               resampling, ladder_file, V, seeds
    [limits]   cap, max_retries, max_stages, tol
    [bench]    rmax, lambda, is_N
    [bounds]   epsilon, omega
    [output]   out, format, dump, trace, timing

Flags override file values; every field records where its value came from
(``default``, ``file`` or ``flag``).  Unknown sections or keys are errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path as FilePath

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .oracle import DEFAULT_STATE_CAP
from .report import FORMAT_VERSION

SUBCOMMANDS = ("estimate-smc", "estimate-is", "sample-mcmc", "sample-ism", "exact", "check-bounds",
               "bench-island")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    subcommand: str
    model: str | None = None
    x: str | None = None
    y: str | None = None
    T: float | None = None
    beta: float = 1.0
    batch: str | None = None
    samples: str | None = None
    N: int = 4096
    s: int | None = None
    safety: float = 1.0
    seed: int = 0
    seeds: int = 1
    steps: int = 1000
    thin: int = 1
    lazy: bool = False
    partition: str = "auto"
    n_draws: int = 1000
    resampling: str = "multinomial"
    ladder_file: str | None = None
    V: int | None = None
    cap: int = DEFAULT_STATE_CAP
    max_retries: int = 8
    max_stages: int = 100_000
    tol: float = 1e-12
    rmax: int = 3
    lam: float = 2.0
    is_N: int | None = None
    epsilon: float = 0.25
    omega: float = 2.0
    threads: int = 1
    out: str | None = None
    format: str = "json"
    dump: str | None = None
    trace: str | None = None
    timing: bool = False
    format_version: str = FORMAT_VERSION
    provenance: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "provenance"}
        return d


# (section, file key) -> RunConfig field
FILE_KEYS = {
    "run": {"subcommand": "subcommand", "seed": "seed", "threads": "threads"},
    "inputs": {"model": "model", "from": "x", "to": "y", "T": "T", "beta": "beta", "batch": "batch",
               "samples": "samples"},
    "sampler": {"N": "N", "s": "s", "safety": "safety", "steps": "steps", "thin": "thin", "lazy": "lazy",
                "partition": "partition", "n_draws": "n_draws", "resampling": "resampling",
                "ladder_file": "ladder_file", "V": "V", "seeds": "seeds"},
    "limits": {"cap": "cap", "max_retries": "max_retries", "max_stages": "max_stages", "tol": "tol"},
    "bench": {"rmax": "rmax", "lambda": "lam", "is_N": "is_N"},
    "bounds": {"epsilon": "epsilon", "omega": "omega"},
    "output": {"out": "out", "format": "format", "dump": "dump", "trace": "trace", "timing": "timing"},
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(key, "a value is required")
    try:
        if kind.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError("expected a boolean")
            return value
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError("expected an integer")
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise TypeError("expected a number")
            return float(value)
        if kind.startswith("str"):
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"{exc} (got {value!r})") from None
    return value


def read_config_file(path) -> dict:
    """Flatten a TOML config file into ``{field: value}``; unknown keys are errors."""
    p = FilePath(path)
    try:
        doc = tomllib.loads(p.read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {p}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"malformed {p}: {exc}") from None
    out = {}
    for section, body in doc.items():
        if section not in FILE_KEYS:
            raise ConfigError(section, "unknown config section")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        for key, value in body.items():
            if key not in FILE_KEYS[section]:
                raise ConfigError(f"{section}.{key}", "unknown config key")
            out[FILE_KEYS[section][key]] = value
    return out


# --------------------------------------------------------------------------
# argument parser


def _global_flags(parser: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    g = parser.add_argument_group("global options")
    g.add_argument("--config", default=S, help="TOML config file (flags override its values)")
    g.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    g.add_argument("--threads", type=int, default=S, help="worker threads (default 1); results do not depend on it")
    g.add_argument("--out", default=S, help="report path (default: stdout)")
    g.add_argument("--format", choices=("json", "csv"), default=S, help="report format (default json)")
    g.add_argument("--timing", action="store_const", const=True, default=S,
                   help="include wall-clock times in the report (makes it run-dependent)")


def _problem_flags(p: argparse.ArgumentParser, seqs: bool = True):
    S = argparse.SUPPRESS
    p.add_argument("--model", default=S, help="model file (TOML/JSON) or 'cpg:<lambda>' / 'symmetric'")
    if seqs:
        p.add_argument("--from", dest="x", default=S, help="ancestral sequence (literal or FASTA/text file)")
        p.add_argument("--to", dest="y", default=S, help="descendant sequence (literal or FASTA/text file)")
    p.add_argument("--T", type=float, default=S, help="branch length")
    p.add_argument("--cap", type=int, default=S, help=f"state-space cap for exact computations (default {DEFAULT_STATE_CAP})")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(
        prog="ctxsmc", description="Transition probabilities under context-dependent substitution models.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    parents = []

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p)
        parents.append(p)
        return p

    for name, what in (("estimate-smc", "tempered SMC estimate of p(y | x)"),
                       ("estimate-is", "importance-sampling estimate of p(y | x)")):
        p = add(name, what)
        _problem_flags(p)
        p.add_argument("--N", type=int, default=S, help="particles (default 4096)")
        p.add_argument("--batch", default=S, help="TSV of x<TAB>y<TAB>T rows; one report row per line")
        p.add_argument("--partition", default=S, help="auto | single | JSON blocks file (default auto)")
        p.add_argument("--max-retries", dest="max_retries", type=int, default=S,
                       help="redraws on event-time collisions before rejecting (default 8)")
        if name == "estimate-smc":
            p.add_argument("--s", type=int, default=S, help="MH steps per stage (default 8 B)")
            p.add_argument("--safety", type=float, default=S, help="ladder step safety factor in (0, 1]")
            p.add_argument("--ladder-file", dest="ladder_file", default=S, help="JSON list of temperatures")
            p.add_argument("--V", type=int, default=S, help="use a uniform ladder with V stages")
            p.add_argument("--max-stages", dest="max_stages", type=int, default=S,
                           help="refuse theory ladders longer than this (default 100000)")
            p.add_argument("--resampling", choices=("multinomial", "systematic"), default=S)
            p.add_argument("--lazy", action="store_const", const=True, default=S, help="lazy MH kernel")

    p = add("sample-mcmc", "run the blocked MH chain on the tempered path law")
    _problem_flags(p)
    p.add_argument("--beta", type=float, default=S, help="inverse temperature (default 1)")
    p.add_argument("--steps", type=int, default=S, help="MH steps (default 1000)")
    p.add_argument("--thin", type=int, default=S, help="record every thin-th state (default 1)")
    p.add_argument("--lazy", action="store_const", const=True, default=S, help="lazy MH kernel")
    p.add_argument("--partition", default=S, help="auto | single | JSON blocks file (default auto)")
    p.add_argument("--max-retries", dest="max_retries", type=int, default=S)
    p.add_argument("--trace", default=S, help="write the chain trace TSV here")
    p.add_argument("--dump", default=S, help="write the final path TSV here")

    p = add("sample-ism", "draw exact independent-site bridges")
    _problem_flags(p)
    p.add_argument("--n-draws", dest="n_draws", type=int, default=S, help="number of draws (default 1000)")
    p.add_argument("--max-retries", dest="max_retries", type=int, default=S)
    p.add_argument("--dump", default=S, help="write the sampled paths TSV here")

    p = add("exact", "exact transition probability by uniformization")
    _problem_flags(p)
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--tol", type=float, default=S, help="truncation tolerance (default 1e-12)")

    p = add("check-bounds", "closed-form constants and sampled MGF checks")
    _problem_flags(p)
    p.add_argument("--samples", default=S, help="paths TSV (from sample-ism/sample-mcmc --dump)")
    p.add_argument("--partition", default=S, help="auto | single | JSON blocks file (default auto)")
    p.add_argument("--epsilon", type=float, default=S)
    p.add_argument("--omega", type=float, default=S)

    p = add("bench-island", "IS versus SMC on the island family")
    p.add_argument("--rmax", type=int, default=S, help="largest island count (default 3)")
    p.add_argument("--lambda", dest="lam", type=float, default=S, help="CpG multiplier (default 2)")
    p.add_argument("--N", type=int, default=S, help="SMC particles (default 4096)")
    p.add_argument("--seeds", type=int, default=S, help="number of SMC seeds, starting at --seed (default 1)")
    p.add_argument("--V", type=int, default=S, help="uniform ladder stages (default 8)")
    p.add_argument("--s", type=int, default=S)
    p.add_argument("--is-N", dest="is_N", type=int, default=S,
                   help="IS draws (default N when exact, 10^6 otherwise)")
    p.add_argument("--cap", type=int, default=S)
    return parser


# --------------------------------------------------------------------------
# merging and validation


def _check(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: RunConfig) -> RunConfig:
    sc = cfg.subcommand
    _check(sc in SUBCOMMANDS, "subcommand", f"must be one of {', '.join(SUBCOMMANDS)}")
    problem = sc != "bench-island"
    if problem:
        _check(cfg.model is not None, "model", "missing model")
        if cfg.batch is None:
            for key in ("x", "y", "T"):
                _check(getattr(cfg, key) is not None, key, "required")
        elif sc not in ("estimate-smc", "estimate-is"):
            raise ConfigError("batch", "batch mode is only available for estimate-smc and estimate-is")
    if cfg.T is not None:
        _check(math.isfinite(cfg.T) and cfg.T > 0, "T", f"must be a positive finite number (got {cfg.T})")
    _check(0 <= cfg.beta <= 1, "beta", "must lie in [0, 1]")
    _check(cfg.N >= 2, "N", "must be at least 2")
    _check(cfg.s is None or cfg.s >= 1, "s", "must be at least 1")
    _check(0 < cfg.safety <= 1, "safety", "must lie in (0, 1]")
    _check(cfg.seed >= 0, "seed", "must be nonnegative")
    _check(cfg.seeds >= 1, "seeds", "must be at least 1")
    _check(cfg.steps >= 0, "steps", "must be nonnegative")
    _check(cfg.thin >= 1, "thin", "must be at least 1")
    _check(cfg.n_draws >= 1, "n_draws", "must be at least 1")
    _check(cfg.resampling in ("multinomial", "systematic"), "resampling", "must be multinomial or systematic")
    _check(cfg.V is None or cfg.V >= 1, "V", "must be at least 1")
    _check(cfg.cap >= 1, "cap", "must be positive")
    _check(cfg.max_retries >= 0, "max_retries", "must be nonnegative")
    _check(cfg.max_stages >= 1, "max_stages", "must be positive")
    _check(0 < cfg.tol < 1, "tol", "must lie in (0, 1)")
    _check(cfg.rmax >= 1, "rmax", "must be at least 1")
    _check(cfg.lam > 0, "lam", "must be positive")
    _check(cfg.is_N is None or cfg.is_N >= 2, "is_N", "must be at least 2")
    _check(0 < cfg.epsilon < 1, "epsilon", "must lie in (0, 1)")
    _check(cfg.omega >= 1, "omega", "must be at least 1")
    _check(cfg.threads >= 1, "threads", "must be at least 1")
    _check(cfg.format in ("json", "csv"), "format", "must be json or csv")
    if cfg.ladder_file is not None and cfg.V is not None:
        raise ConfigError("ladder", "conflicting ladder specs: give either ladder_file or V, not both")
    return cfg


def parse_config(argv=None, config_file=None) -> RunConfig:
    """Build a validated :class:`RunConfig` from ``argv`` and an optional file.

    ``config_file`` may also be given as ``--config`` in ``argv``; flags take
    precedence over file values.
    """
    parser = build_parser()
    ns = vars(parser.parse_args(list(sys.argv[1:] if argv is None else argv)))
    path = ns.pop("config", None) or config_file
    values: dict = {}
    prov: dict = {}
    if path is not None:
        for k, v in read_config_file(path).items():
            values[k] = v
            prov[k] = "file"
    for k, v in ns.items():
        if v is None and k == "subcommand":
            continue
        values[k] = v
        prov[k] = "flag"
    if values.get("subcommand") is None:
        raise ConfigError("subcommand", "missing subcommand")
    kwargs = {k: _coerce(k, v) for k, v in values.items()}
    cfg = RunConfig(**kwargs)
    cfg.provenance = {f.name: prov.get(f.name, "default") for f in fields(cfg)
                      if f.name not in ("provenance", "format_version")}
    return validate(cfg)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    new = dataclasses.replace(cfg, **changes)
    new.provenance = dict(cfg.provenance)
    return validate(new)
