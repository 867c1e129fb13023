"""``ctxsmc`` command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric abort
(all importance weights vanished), 4 a size cap was exceeded (exact state
space or tempering ladder).
"""
from __future__ import annotations

import json
import math
import sys
import time
import warnings
from pathlib import Path as FilePath

import numba
import numpy as np
import scipy

from . import __version__
from . import rng as rngmod
from .config import ConfigError, RunConfig, parse_config
from .diagnostics import IslandRow, bench_island, bound_report
from .mcmc import Target, auto_partition, load_partition, run_chain, single_partition
from .model import ContextModel, ModelError, cpg_model, load_model, read_sequence, symmetric_model
from .oracle import StateSpaceTooLarge, exact_marginal
from .path import Path, read_paths, write_paths
from .report import FORMAT_VERSION, emit_report
from .smc import LadderError, TemperatureLadder, WeightDegeneracy, build_ladder, run_is, run_smc, uniform_ladder

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4


# --------------------------------------------------------------------------
# input loading


def resolve_model(spec: str) -> ContextModel:
    """Model from a file, or one of the built-ins ``symmetric`` / ``cpg:<lambda>``."""
    if FilePath(spec).is_file():
        return load_model(spec)
    if spec == "symmetric":
        return symmetric_model()
    if spec.startswith("cpg:"):
        try:
            lam = float(spec[4:])
        except ValueError:
            raise ModelError(f"bad CpG multiplier in {spec!r}") from None
        return cpg_model(lam)
    raise ModelError(f"model file {spec!r} not found")


def load_ladder(path) -> TemperatureLadder:
    """A JSON list of temperatures, or ``{"betas": [...]}``."""
    try:
        doc = json.loads(FilePath(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError("ladder_file", f"cannot read {path}: {exc}") from None
    betas = doc["betas"] if isinstance(doc, dict) and "betas" in doc else doc
    try:
        return TemperatureLadder(tuple(float(b) for b in betas), source="file")
    except (TypeError, ValueError) as exc:
        raise ConfigError("ladder_file", str(exc)) from None


def read_batch(path) -> list[tuple[str, str, float]]:
    rows = []
    try:
        text = FilePath(path).read_text()
    except OSError as exc:
        raise ConfigError("batch", f"cannot read {path}: {exc}") from None
    for k, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError("batch", f"line {k}: expected x<TAB>y<TAB>T")
        try:
            T = float(parts[2])
        except ValueError:
            raise ConfigError("batch", f"line {k}: bad T {parts[2]!r}") from None
        if not (math.isfinite(T) and T > 0):
            raise ConfigError("batch", f"line {k}: T must be positive")
        rows.append((parts[0].strip(), parts[1].strip(), T))
    if not rows:
        raise ConfigError("batch", "no rows")
    return rows


def _partition(cfg: RunConfig, model, x, y):
    if cfg.partition == "auto":
        return auto_partition(model, x, y)
    if cfg.partition == "single":
        return single_partition(model, x, y)
    return load_partition(model, x, y, cfg.partition)


def _regime_warning(x, y, T: float) -> list[str]:
    r, n = x.hamming(y), x.n
    if T > 4 * r / n:
        return [f"T = {T!r} exceeds 4 r / n = {4 * r / n!r}; the complexity guarantees assume short branches"]
    return []


# --------------------------------------------------------------------------
# subcommands (each returns (result, csv columns or None, warnings))


def _problem(cfg: RunConfig):
    model = resolve_model(cfg.model)
    x = read_sequence(cfg.x, model.alphabet)
    y = read_sequence(cfg.y, model.alphabet)
    if x.n != y.n:
        raise ModelError(f"sequences differ in length ({x.n} vs {y.n})")
    return model, x, y


def _estimate_one(cfg: RunConfig, model, x, y, T: float) -> tuple[dict, list[str]]:
    if x.n != y.n:
        raise ModelError(f"sequences differ in length ({x.n} vs {y.n})")
    warn = _regime_warning(x, y, T)
    if cfg.subcommand == "estimate-is":
        target = Target.build(model, x, y, T, single_partition(model, x, y), cfg.max_retries)
        rep = run_is(model, x, y, T, cfg.N, cfg.seed, cfg.threads, target=target)
    else:
        if cfg.ladder_file is not None:
            ladder = load_ladder(cfg.ladder_file)
        elif cfg.V is not None:
            ladder = uniform_ladder(cfg.V)
        else:
            ladder = build_ladder(model, x, y, T, cfg.safety, cfg.max_stages)
        target = Target.build(model, x, y, T, _partition(cfg, model, x, y), cfg.max_retries)
        rep = run_smc(model, x, y, T, ladder, cfg.N, cfg.s, cfg.seed, threads=cfg.threads, lazy=cfg.lazy,
                      resampling=cfg.resampling, target=target)
    out = {"x": str(x), "y": str(y), "T": T}
    out.update(rep.to_dict(timing=cfg.timing))
    return out, warn


def cmd_estimate(cfg: RunConfig):
    model = resolve_model(cfg.model)
    if cfg.batch is None:
        _, x, y = _problem(cfg)
        res, warn = _estimate_one(cfg, model, x, y, cfg.T)
        return res, None, warn
    rows, warn = [], []
    for xs, ys, T in read_batch(cfg.batch):
        res, w = _estimate_one(cfg, model, read_sequence(xs, model.alphabet), read_sequence(ys, model.alphabet), T)
        rows.append(res)
        warn += w
    return {"rows": rows}, None, warn


def cmd_sample_mcmc(cfg: RunConfig):
    model, x, y = _problem(cfg)
    part = _partition(cfg, model, x, y)
    target = Target.build(model, x, y, cfg.T, part, cfg.max_retries)
    init = target.sample_mu(rngmod.stream(cfg.seed, rngmod.CHAIN, 0))
    view = model.view(cfg.beta)
    tr = run_chain(init, view, target, cfg.steps, rngmod.stream(cfg.seed, rngmod.CHAIN, 1), cfg.thin, cfg.lazy)
    if cfg.trace is not None:
        lines = ["step\tm\tlog_q\taccepted\t" + "\t".join(f"m_block{j}" for j in range(part.B))]
        for k in range(tr.m.size):
            lines.append(f"{k * cfg.thin}\t{int(tr.m[k])}\t{float(tr.log_q[k])!r}\t{int(tr.accepted_flag[k])}\t"
                         + "\t".join(str(v) for v in tr.block_m[k]))
        FilePath(cfg.trace).write_text("\n".join(lines) + "\n")
    if cfg.dump is not None:
        write_paths([tr.final], cfg.dump)
    moves = tr.accepted + tr.rejected
    m_rec = tr.m[1:] if tr.m.size > 1 else tr.m
    res = {
        "beta": cfg.beta,
        "steps": cfg.steps,
        "thin": cfg.thin,
        "lazy": cfg.lazy,
        "acceptance_rate": tr.acceptance_rate,
        "block_acceptance": [float(a / m) if m else None for a, m in zip(tr.accepted.tolist(), moves.tolist())],
        "held": tr.held,
        "collisions": tr.collisions,
        "r_star": part.r_star,
        "partition": part.to_dict(),
        "initial_m": int(tr.m[0]),
        "final_m": tr.final.m,
        "mean_m": float(np.mean(m_rec)),
        "final_log_q": float(tr.log_q[-1]),
    }
    return res, None, _regime_warning(x, y, cfg.T)


def cmd_sample_ism(cfg: RunConfig):
    model, x, y = _problem(cfg)
    target = Target.build(model, x, y, cfg.T, single_partition(model, x, y), cfg.max_retries)
    paths = [Path(x, cfg.T, *target.sample_mu_arrays(rngmod.stream(cfg.seed, rngmod.INIT, i)))
             for i in range(cfg.n_draws)]
    if cfg.dump is not None:
        write_paths(paths, cfg.dump)
    m = np.array([p.m for p in paths])
    res = {
        "n_draws": cfg.n_draws,
        "mean_m": float(m.mean()),
        "se_mean_m": float(m.std(ddof=1) / math.sqrt(m.size)) if m.size > 1 else None,
        "p_m0": float(np.mean(m == 0)),
        "m_histogram": np.bincount(m).tolist(),
    }
    return res, None, _regime_warning(x, y, cfg.T)


def cmd_exact(cfg: RunConfig):
    model, x, y = _problem(cfg)
    res = exact_marginal(model, x, y, cfg.T, cfg.beta, cfg.tol, cfg.cap).to_dict()
    res["log_p"] = math.log(res["p"]) if res["p"] > 0 else -math.inf
    return res, None, []


def cmd_check_bounds(cfg: RunConfig):
    model, x, y = _problem(cfg)
    samples = read_paths(cfg.samples, model.alphabet) if cfg.samples is not None else None
    if samples is not None:
        for p in samples:
            if p.x0 != x or p.T != cfg.T:
                raise ModelError("samples do not match --from / --T")
    res = bound_report(model, x, y, cfg.T, _partition(cfg, model, x, y), cfg.epsilon, cfg.omega, samples)
    res["T"] = cfg.T
    res["note"] = "mixing-time constants are evaluated at this T"
    return res, None, _regime_warning(x, y, cfg.T)


def cmd_bench_island(cfg: RunConfig):
    V = cfg.V if cfg.V is not None else 8
    rows = bench_island(cfg.rmax, cfg.lam, cfg.N, range(cfg.seed, cfg.seed + cfg.seeds), V, cfg.s, cfg.is_N,
                        cfg.cap, cfg.threads)
    chi = [r.is_chi2 for r in rows]
    errs = [r.smc_rel_err_max for r in rows if r.smc_rel_err_max is not None]
    summary = {
        "is_chi2_increasing": all(a < b for a, b in zip(chi, chi[1:])),
        "smc_stage_l2_hat_max": max(r.smc_stage_l2_hat_max for r in rows),
        "smc_rel_err_max": max(errs) if errs else None,
    }
    return {"rows": [r.to_dict(cfg.timing) for r in rows], "summary": summary}, IslandRow.CSV_COLUMNS, []


COMMANDS = {
    "estimate-smc": cmd_estimate,
    "estimate-is": cmd_estimate,
    "sample-mcmc": cmd_sample_mcmc,
    "sample-ism": cmd_sample_ism,
    "exact": cmd_exact,
    "check-bounds": cmd_check_bounds,
    "bench-island": cmd_bench_island,
}


def summary_path(out) -> str:
    """JSON companion of a CSV table: ``table.csv`` -> ``table.summary.json``."""
    p = FilePath(out)
    return str(p.with_name(p.stem + ".summary.json"))


def versions() -> dict:
    return {"ctxsmc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


def run(cfg: RunConfig) -> dict:
    """Execute ``cfg`` and return the full report (config echo included)."""
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result, columns, warn = COMMANDS[cfg.subcommand](cfg)
    warn = list(warn) + [str(w.message) for w in caught]
    report = {
        "format_version": FORMAT_VERSION,
        "subcommand": cfg.subcommand,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "provenance": dict(cfg.provenance),
        "versions": versions(),
        "warnings": warn,
        "result": result,
    }
    if cfg.timing:
        report["wall_time"] = time.perf_counter() - t0
    report["_columns"] = columns
    return report


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        report = run(cfg)
        columns = report.pop("_columns")
        for w in report["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
        if cfg.format == "csv" and columns is not None:
            # table as CSV; the full report (summary, config echo) goes next to it as JSON
            emit_report(report["result"], "csv", cfg.out, columns)
            if cfg.out is not None and cfg.out != "-":
                emit_report(report, "json", summary_path(cfg.out))
        else:
            emit_report(report, cfg.format, cfg.out)
    except (WeightDegeneracy,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StateSpaceTooLarge, LadderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (ConfigError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
