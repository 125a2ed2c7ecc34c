"""Configuration-driven experiment runner.

Subcommands:

* ``run``             -- adaptive surrogate run; writes run_record.json,
                         metrics.csv, particles.csv, marginals.csv,
                         training_points.csv, and (for the analytic
                         benchmark) kl_trace.csv.
* ``reference``       -- surrogate-free SMC on the true likelihood;
                         writes reference particles.csv and marginals.csv.
* ``compare``         -- divergence report between two particles.csv files.
* ``validate-config`` -- schema check only.

Configs are JSON with a strict schema: unknown keys are rejected before
any computation starts.  Every CSV carries a metadata header (version,
seed, config hash) and uses 17-significant-digit formatting so reruns with
the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import (AdaptiveConfig, AdaptiveRunFailure, RunRecord,
                       run_adaptive, run_reference)
from .bounded import CFBGP, CGPMAP_II, GPMAP_I, EstimatorMode
from .diagnostics import (gaussian_kl, kde_1d, max_marginal_cs,
                          moments_from_ensemble)
from .problems import (build_diffusion_problem, energy_target,
                       field_csv_rows, gaussian_benchmark,
                       solution_csv_rows)
from .smc import ParticleEnsemble, SMCConfig

__all__ = ["main", "load_config", "ConfigError"]

_EXPERIMENTS = ("gaussian-benchmark", "energy-demo", "diffusion")


class ConfigError(ValueError):
    """The configuration document is malformed."""


# schema: section -> key -> (type, default); REQUIRED means no default
_REQUIRED = object()

_SCHEMA = {
    "": {
        "experiment": (str, _REQUIRED),
        "seed": (int, _REQUIRED),
        "output_dir": (str, "out"),
    },
    "estimator": {
        "mode": (str, CGPMAP_II),
        "q": (float, 0.9),
        "n_theta": (int, 100),
    },
    "adaptive": {
        "n_initial": (int, _REQUIRED),
        "n_per_iteration": (int, _REQUIRED),
        "alpha_tol": (float, 1e-2),
        "max_iterations": (int, 100),
        "max_solver_calls": (int, None),
        "map_restarts": (int, 2),
        "training_source": (str, "posterior"),
    },
    "smc": {
        "n_particles": (int, 2000),
        "n_rejuvenation": (int, 25),
        "ess_threshold": (float, 0.5),
        "target_acceptance": (float, 0.3),
    },
    "problem": {
        "n_x": (int, 10),
        "sigma2": (float, 1e-4),
        "n_cells": (int, 10),
        "lengthscale": (float, 0.3),
        "noise_variance": (float, 1e-4),
        "variance_target": (float, 0.99),
        "problem_seed": (int, 0),
    },
}


def _check_section(data: dict, section: str) -> dict:
    schema = _SCHEMA[section]
    unknown = set(data) - set(schema)
    if unknown:
        where = section or "top level"
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = {}
    for key, (typ, default) in schema.items():
        if key in data:
            value = data[key]
            if value is None and default is None:
                out[key] = None
                continue
            if typ is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, typ) or isinstance(value, bool):
                raise ConfigError(f"key '{key}' must be of type {typ.__name__}")
            out[key] = value
        elif default is _REQUIRED:
            where = f"section '{section}'" if section else "top level"
            raise ConfigError(f"missing required key '{key}' in {where}")
        else:
            out[key] = default
    return out


def load_config(path: str | Path) -> dict:
    """Parse and schema-validate a config file; raises ConfigError."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")

    sections = {"estimator", "adaptive", "smc", "problem"}
    top = {k: v for k, v in raw.items() if k not in sections}
    cfg = _check_section(top, "")
    for name in sections:
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section '{name}' must be an object")
        cfg[name] = _check_section(sub, name)
    if cfg["experiment"] not in _EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {_EXPERIMENTS}")
    if cfg["estimator"]["mode"] not in (GPMAP_I, CGPMAP_II, CFBGP):
        raise ConfigError("estimator mode must be GPMAP-I, CGPMAP-II, or CFBGP")
    return cfg


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _build_problem(cfg: dict, threads: int):
    """Returns (problem, diffusion_setup_or_None)."""
    p = cfg["problem"]
    name = cfg["experiment"]
    if name == "gaussian-benchmark":
        return gaussian_benchmark(p["n_x"], p["sigma2"],
                                  seed=p["problem_seed"]), None
    if name == "energy-demo":
        return energy_target(), None
    setup = build_diffusion_problem(
        n_cells=p["n_cells"], lengthscale=p["lengthscale"],
        noise_variance=p["noise_variance"],
        variance_target=p["variance_target"], seed=p["problem_seed"])
    problem = setup.problem
    if threads > 1:
        problem = _threaded_problem(problem, threads)
    return problem, setup


def _threaded_problem(problem: InverseProblem, threads: int) -> InverseProblem:
    from concurrent.futures import ThreadPoolExecutor
    from dataclasses import replace

    inner = problem.log_likelihood

    def log_likelihood(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda x: inner(x[None, :])[0], X))
        return np.asarray(rows)

    return replace(problem, log_likelihood=log_likelihood)


def _adaptive_config(cfg: dict) -> AdaptiveConfig:
    est = cfg["estimator"]
    mode = EstimatorMode(est["mode"], q=est["q"], n_theta=est["n_theta"])
    smc = cfg["smc"]
    ada = cfg["adaptive"]
    return AdaptiveConfig(
        n_initial=ada["n_initial"], n_per_iteration=ada["n_per_iteration"],
        alpha_tol=ada["alpha_tol"], mode=mode,
        smc=SMCConfig(n_particles=smc["n_particles"],
                      n_rejuvenation=smc["n_rejuvenation"],
                      ess_threshold=smc["ess_threshold"],
                      target_acceptance=smc["target_acceptance"],
                      seed=cfg["seed"]),
        max_iterations=ada["max_iterations"],
        max_solver_calls=ada["max_solver_calls"],
        map_restarts=ada["map_restarts"],
        training_source=ada["training_source"],
        seed=cfg["seed"])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_csv(path: Path, header: list[str], rows, meta: dict) -> None:
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _meta(cfg: dict, command: str) -> dict:
    return {"version": __version__, "command": command,
            "seed": cfg["seed"], "config_sha256": _config_hash(cfg)}


def _write_particles(path: Path, ensemble: ParticleEnsemble, meta: dict) -> None:
    header = ["weight"] + [f"x{i}" for i in range(ensemble.dim)]
    rows = [[w] + list(p) for w, p in zip(ensemble.weights, ensemble.particles)]
    _write_csv(path, header, rows, meta)


def _read_particles(path: Path) -> ParticleEnsemble:
    lines = [ln for ln in Path(path).read_text().splitlines()
             if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    if header[0] != "weight":
        raise ValueError(f"{path} is not a particles file")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    weights = data[:, 0]
    return ParticleEnsemble(data[:, 1:], weights / np.sum(weights))


def _write_marginals(path: Path, ensemble: ParticleEnsemble, meta: dict,
                     n_grid: int = 201) -> None:
    rows = []
    for j in range(ensemble.dim):
        samples = ensemble.particles[:, j]
        mix = kde_1d(samples)
        lo = float(np.min(samples)) - 3.0 * mix.bandwidth
        hi = float(np.max(samples)) + 3.0 * mix.bandwidth
        grid = np.linspace(lo, hi, n_grid)
        dens = mix.pdf(grid)
        rows.extend([j, x, d] for x, d in zip(grid, dens))
    _write_csv(path, ["dim", "x", "density"], rows, meta)


def _write_run_outputs(out: Path, cfg: dict, record: RunRecord) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "run")

    doc = {
        "version": __version__,
        "config": cfg,
        "status": record.status,
        "solver_calls": record.solver_calls,
        "iterations": [
            {
                "iteration": r.iteration,
                "n_training": r.n_training,
                "solver_calls": r.solver_calls,
                # strict JSON has no Infinity; a disabled bound serializes
                # as null
                "bound": r.bound if math.isfinite(r.bound) else None,
                "hyper_summary": r.hyper_summary,
                "cs_divergence": r.cs_divergence,
                "kl_to_truth": r.kl_to_truth,
                "smc_stages": r.smc_stages,
                "wall_time": r.wall_time,
            }
            for r in record.iterations
        ],
    }
    (out / "run_record.json").write_text(json.dumps(doc, indent=2) + "\n")

    _write_csv(
        out / "metrics.csv",
        ["iteration", "solver_calls", "n_training", "bound", "cs_divergence",
         "kl_to_truth", "smc_stages", "signal_variance", "noise_variance",
         "lengthscale_geomean"],
        [[r.iteration, r.solver_calls, r.n_training, r.bound,
          r.cs_divergence, r.kl_to_truth, r.smc_stages,
          r.hyper_summary["signal_variance"],
          r.hyper_summary["noise_variance"],
          r.hyper_summary["lengthscale_geomean"]]
         for r in record.iterations],
        meta)

    points_rows = []
    for r in record.iterations:
        for point in r.new_points:
            points_rows.append([r.iteration] + list(point))
    dim = record.final_ensemble.dim if record.final_ensemble is not None else 0
    _write_csv(out / "training_points.csv",
               ["iteration"] + [f"x{i}" for i in range(dim)],
               points_rows, meta)

    if record.final_ensemble is not None:
        _write_particles(out / "particles.csv", record.final_ensemble, meta)
        _write_marginals(out / "marginals.csv", record.final_ensemble, meta)

    kl_rows = [[calls, kl] for calls, kl in record.kl_trace]
    if kl_rows:
        _write_csv(out / "kl_trace.csv", ["solver_calls", "kl_to_truth"],
                   kl_rows, meta)


def _cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    print("config ok")
    return 0


def _write_field_outputs(out: Path, cfg: dict, setup, ensemble) -> None:
    meta = _meta(cfg, "fields")
    _write_csv(out / "field_truth.csv", ["cx", "cy", "diffusivity"],
               field_csv_rows(setup.kle, setup.true_x), meta)
    _write_csv(out / "solution_truth.csv", ["cx", "cy", "u"],
               solution_csv_rows(setup.n_cells, setup.forward(setup.true_x)),
               meta)
    if ensemble is not None:
        mean_coeff = ensemble.weights @ ensemble.particles
        _write_csv(out / "field_posterior_mean.csv",
                   ["cx", "cy", "diffusivity"],
                   field_csv_rows(setup.kle, mean_coeff), meta)


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out or cfg["output_dir"])
    problem, setup = _build_problem(cfg, args.threads)
    ada_cfg = _adaptive_config(cfg)
    try:
        record = run_adaptive(problem, ada_cfg)
    except AdaptiveRunFailure as failure:
        _write_run_outputs(out, cfg, failure.record)
        print(f"numerical failure: {failure.cause} "
              f"(partial outputs in {out})", file=sys.stderr)
        return 2
    _write_run_outputs(out, cfg, record)
    if setup is not None:
        _write_field_outputs(out, cfg, setup, record.final_ensemble)
    print(f"{record.status} after {record.solver_calls} solver calls; "
          f"outputs in {out}")
    return 0


def _cmd_reference(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out or cfg["output_dir"])
    problem, setup = _build_problem(cfg, args.threads)
    smc = cfg["smc"]
    smc_cfg = SMCConfig(n_particles=smc["n_particles"],
                        n_rejuvenation=smc["n_rejuvenation"],
                        ess_threshold=smc["ess_threshold"],
                        target_acceptance=smc["target_acceptance"],
                        seed=cfg["seed"])
    try:
        result = run_reference(problem, smc_cfg)
    except Exception as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "reference")
    _write_particles(out / "particles.csv", result.ensemble, meta)
    _write_marginals(out / "marginals.csv", result.ensemble, meta)
    if setup is not None:
        _write_field_outputs(out, cfg, setup, result.ensemble)
    print(f"reference done: {result.n_likelihood_calls} likelihood calls, "
          f"{result.n_stages} stages; outputs in {out}")
    return 0


def _cmd_compare(args) -> int:
    try:
        a = _read_particles(Path(args.particles_a))
        b = _read_particles(Path(args.particles_b))
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if a.dim != b.dim:
        print(f"error: dimension mismatch {a.dim} vs {b.dim}", file=sys.stderr)
        return 1
    dcs = max_marginal_cs(a, b)
    report = {"max_marginal_cs": dcs}
    try:
        kl = gaussian_kl(moments_from_ensemble(a), moments_from_ensemble(b))
        report["gaussian_kl_moment_matched"] = kl
    except np.linalg.LinAlgError:
        pass
    print(json.dumps(report, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "compare.json").write_text(
            json.dumps(report, indent=2) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gpinverse",
        description="Bayesian inverse problems with bounded GP surrogates")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for forward-model batches")

    add_common(sub.add_parser("run", help="adaptive surrogate run"))
    add_common(sub.add_parser("reference", help="surrogate-free SMC run"))

    cmp_p = sub.add_parser("compare", help="divergence between two runs")
    cmp_p.add_argument("particles_a")
    cmp_p.add_argument("particles_b")
    cmp_p.add_argument("--out", default=None)

    val_p = sub.add_parser("validate-config", help="schema-check a config")
    val_p.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "reference": _cmd_reference,
        "compare": _cmd_compare,
        "validate-config": _cmd_validate,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
