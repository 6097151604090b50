"""Command-line front end.

Subcommands
-----------
thresholds  estimate the climatology and derive the trigger thresholds
run         run a batch of twin-experiment trials and write its artifacts
sweep       re-run batches along a rho / h / integrator grid
report      regenerate markdown + SVG summaries from an output directory

Configuration comes from a single TOML file; command-line flags override
config fields. Exit codes: 0 success, 2 configuration error, 3 a
should-never acceptance assertion failed (an adaptive variant diverged).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .benchmarks import BenchmarkResult, Climatology, benchmark_error, estimate_climatology
from .harness import (
    ExperimentConfig,
    parse_variant,
    run_batch,
    sweep as run_sweep,
    statistics_histograms,
    write_trial_jsonl,
)
from .integrators import IntegratorSpec
from .models import ModelSpec
from .observations import build_operator
from .report import write_report

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERTION = 3

_REGIMES = {"F4": 4.0, "F8": 8.0, "F16": 16.0}

_DEFAULT_OBS = {"matrix": [[1.0, 0.0, 0.0, 0.0, 0.0]], "noise_cov": [[0.01]]}


class ConfigError(ValueError):
    pass


def _load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as e:
        # tomli messages carry line/column context
        raise ConfigError(f"{path}: {e}")


def parse_integrator(text: str) -> IntegratorSpec:
    """Parse integrator strings like ``rk4@2.5e-3`` or ``rk45``."""
    name, _, dt = text.partition("@")
    name = name.strip().lower().replace("-", "_")
    try:
        if name == "rk45":
            return IntegratorSpec.rk45()
        if not dt:
            raise ValueError(f"integrator {name!r} needs a step, e.g. {name}@1e-4")
        return IntegratorSpec(scheme=name, dt=float(dt))
    except ValueError as e:
        raise ConfigError(str(e))


def _integrator_from_table(tab: dict) -> IntegratorSpec:
    scheme = tab.get("scheme", "explicit_euler").replace("-", "_")
    kwargs = {}
    for key in ("dt", "newton_tol", "rtol", "atol"):
        if key in tab:
            kwargs[key] = float(tab[key])
    if "newton_max_iter" in tab:
        kwargs["newton_max_iter"] = int(tab["newton_max_iter"])
    try:
        return IntegratorSpec(scheme=scheme, **kwargs)
    except ValueError as e:
        raise ConfigError(f"[integrator] {e}")


def _model_from_config(conf: dict, regime: str | None) -> ModelSpec:
    tab = dict(conf.get("model", {}))
    kind = tab.get("kind", "lorenz96")
    if regime is not None:
        if regime not in _REGIMES:
            raise ConfigError(f"unknown regime {regime!r}; expected one of {sorted(_REGIMES)}")
        tab["forcing"] = _REGIMES[regime]
        kind = "lorenz96"
    try:
        if kind == "lorenz96":
            return ModelSpec.lorenz96(
                forcing=float(tab.get("forcing", 8.0)),
                dimension=int(tab.get("dimension", 5)),
                noise_cov=np.asarray(tab["noise_cov"], dtype=float)
                if "noise_cov" in tab
                else None,
            )
        if kind == "linear_gaussian":
            return ModelSpec.linear_gaussian(
                drift=np.asarray(tab["drift"], dtype=float),
                noise_cov=np.asarray(tab["noise_cov"], dtype=float)
                if "noise_cov" in tab
                else None,
                discrete=bool(tab.get("discrete", False)),
            )
    except (KeyError, ValueError) as e:
        raise ConfigError(f"[model] {e}")
    raise ConfigError(f"[model] unknown kind {kind!r}")


def _operator_from_config(conf: dict):
    tab = conf.get("observation", _DEFAULT_OBS)
    try:
        return build_operator(
            np.asarray(tab.get("matrix", _DEFAULT_OBS["matrix"]), dtype=float),
            np.asarray(tab.get("noise_cov", _DEFAULT_OBS["noise_cov"]), dtype=float),
        )
    except ValueError as e:
        raise ConfigError(f"[observation] {e}")


def _config_hash(conf: dict, args: argparse.Namespace) -> str:
    payload = json.dumps(
        {"config": conf, "overrides": {k: v for k, v in sorted(vars(args).items()) if k != "func"}},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _experiment_config(conf: dict, args: argparse.Namespace, clim: Climatology,
                       bench: BenchmarkResult | None) -> ExperimentConfig:
    model = _model_from_config(conf, getattr(args, "regime", None))
    op = _operator_from_config(conf)
    integ = _integrator_from_table(conf.get("integrator", {}))
    if getattr(args, "integrator", None):
        integ = parse_integrator(args.integrator)
    truth_tab = conf.get("truth_integrator")
    truth_integ = _integrator_from_table(truth_tab) if truth_tab else None
    filt = conf.get("filter", {})
    exp = conf.get("experiment", {})
    variants = filt.get("variants", ["enkf", "enkf-ai", "enkf-ci", "enkf-cai"])
    if getattr(args, "variants", None):
        variants = [v.strip() for v in args.variants.split(",")]
    try:
        for v in variants:
            parse_variant(v)
    except ValueError as e:
        raise ConfigError(str(e))
    thr = conf.get("thresholds", {})
    m1 = thr.get("m1")
    m2 = thr.get("m2")
    if bench is not None:
        m1, m2 = bench.m1, bench.m2
    rho = args.rho if getattr(args, "rho", None) is not None else float(filt.get("rho", 0.1))
    h = args.h if getattr(args, "h", None) is not None else float(exp.get("h", 0.05))
    try:
        return ExperimentConfig(
            model=model,
            operator=op,
            climatology=clim,
            variants=tuple(variants),
            integrator=integ,
            truth_integrator=truth_integ,
            ensemble_size=int(filt.get("ensemble_size", 6)),
            h=h,
            total_time=float(
                args.total_time
                if getattr(args, "total_time", None) is not None
                else exp.get("total_time", 100.0)
            ),
            record_start=exp.get("record_start"),
            trials=int(
                args.trials
                if getattr(args, "trials", None) is not None
                else exp.get("trials", 100)
            ),
            base_seed=int(
                args.seed if getattr(args, "seed", None) is not None else exp.get("seed", 2357)
            ),
            rho=rho,
            multiplicative=bool(filt.get("multiplicative", False)),
            c_phi=float(filt.get("c_phi", 1.0)),
            m1=m1,
            m2=m2,
            esrf_literal_theta=bool(filt.get("literal_theta", False)),
        )
    except ValueError as e:
        raise ConfigError(str(e))


def _derive_thresholds(conf: dict, args: argparse.Namespace, out_dir: Path):
    """Climatology + benchmark for the configured model; cached as JSON."""
    model = _model_from_config(conf, getattr(args, "regime", None))
    op = _operator_from_config(conf)
    thr = conf.get("thresholds", {})
    clim_path = out_dir / "climatology.json"
    bench_path = out_dir / "thresholds.json"
    if clim_path.exists() and bench_path.exists() and not getattr(args, "rederive", False):
        return Climatology.load(clim_path), BenchmarkResult.load(bench_path)
    if getattr(args, "no_derive", False):
        raise ConfigError(
            f"missing climatology/thresholds under {out_dir} and --no-derive given; "
            f"run the thresholds command first"
        )
    tab = thr.get("climatology", {})
    integ = _integrator_from_table(
        tab.get("integrator", {"scheme": "rk4", "dt": 2.5e-3})
    )
    exp = conf.get("experiment", {})
    clim = estimate_climatology(
        model,
        integ,
        total_time=float(tab.get("total_time", 1e4)),
        burn_in=float(tab.get("burn_in", 10.0)),
        rng=np.random.default_rng(int(tab.get("seed", 0))),
        h=float(exp.get("h", 0.05)),
        chains=int(tab.get("chains", 16)),
    )
    bench = benchmark_error(
        clim,
        op,
        ensemble_size=int(conf.get("filter", {}).get("ensemble_size", 6)),
        state_dim_noise=bool(thr.get("state_dim_noise", False)),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    clim.save(clim_path)
    bench.save(bench_path)
    return clim, bench


def _write_summary_csv(path: Path, summaries: dict, seed: int, provenance: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["Filter", "Cata. Div.", "RMSE", "Pattern Cor.", "Trials Triggered",
             "Mean Triggers", "Avg. Time", "Seed", "Version"]
        )
        for variant, s in summaries.items():
            writer.writerow(
                [
                    variant,
                    f"{100 * s.divergence_fraction:g}%",
                    _fmt(s.rmse),
                    _fmt(s.pattern_correlation),
                    s.trials_triggered,
                    _fmt(s.mean_triggers_per_triggered_trial),
                    f"{s.avg_wall_per_trial:.3f}",
                    seed,
                    provenance,
                ]
            )


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NaN"
    return f"{x:.4g}"


def _write_sweep_csv(path: Path, axis: str, rows: list[dict], seed: int, provenance: str) -> None:
    values = list(dict.fromkeys(r["value"] for r in rows))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    lookup = {(r["variant"], r["value"]): r for r in rows}
    metrics = [
        ("Cata. Div.", lambda r: f"{100 * r['divergence_fraction']:g}%"),
        ("RMSE", lambda r: _fmt(r["rmse"])),
        ("Pattern Cor.", lambda r: _fmt(r["pattern_correlation"])),
        ("Avg. Time", lambda r: f"{r['avg_wall_per_trial']:.3f}"),
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis] + values)
        for variant in variants:
            for label, get in metrics:
                writer.writerow(
                    [f"{variant} {label}"]
                    + [get(lookup[(variant, v)]) for v in values]
                )
        writer.writerow(["Seed"] + [seed] * len(values))
        writer.writerow(["Version"] + [provenance] * len(values))


def _write_error_series_csv(path: Path, records: dict, h: float, trial: int = 0) -> None:
    variants = list(records)
    n = records[variants[0]][trial].n_steps
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + variants)
        for i in range(n):
            row = [f"{(i + 1) * h:.6g}"]
            for v in variants:
                row.append(_fmt(float(records[v][trial].error[i])))
            writer.writerow(row)


def _write_hist_csv(path: Path, hists: dict, which: str) -> None:
    entry = hists[which]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if "edges" not in entry:
            writer.writerow(["bin_left", "bin_right", "count", "log_count"])
            return
        writer.writerow(["bin_left", "bin_right", "count", "log_count"])
        edges, counts, logc = entry["edges"], entry["counts"], entry["log_counts"]
        for i, c in enumerate(counts):
            writer.writerow([f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", c, f"{logc[i]:.6g}"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_thresholds(args: argparse.Namespace) -> int:
    conf = _load_toml(args.config)
    out_dir = Path(args.output)
    clim, bench = _derive_thresholds(conf, args, out_dir)
    print(f"climatology: {out_dir / 'climatology.json'} (samples={clim.samples})")
    print(f"thresholds:  m1={bench.m1:.4g} m2={bench.m2:.4g} "
          f"benchmark_rmse={bench.rmse:.4g} -> {out_dir / 'thresholds.json'}")
    return EXIT_OK


def _needs_thresholds(variants) -> bool:
    return any(parse_variant(v)[1] in ("ai", "cai") for v in variants)


def cmd_run(args: argparse.Namespace) -> int:
    conf = _load_toml(args.config)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    thr = conf.get("thresholds", {})
    if thr.get("mode", "derive") == "fixed":
        clim, bench = _derive_thresholds(conf, args, out_dir)
        bench = None  # thresholds come from the config below
        cfg = _experiment_config(conf, args, clim, None)
        cfg = replace(cfg, m1=float(thr["m1"]), m2=float(thr["m2"]))
    else:
        clim, bench = _derive_thresholds(conf, args, out_dir)
        cfg = _experiment_config(conf, args, clim, bench)
    t0 = time.time()
    summaries, records = run_batch(cfg, jobs=args.jobs, with_records=True)
    elapsed = time.time() - t0
    provenance = _git_describe()
    _write_summary_csv(out_dir / "summary.csv", summaries, cfg.base_seed, provenance)
    trials_dir = out_dir / "trials"
    trials_dir.mkdir(exist_ok=True)
    for variant, recs in records.items():
        path = trials_dir / f"{variant}.jsonl"
        for i, r in enumerate(recs):
            write_trial_jsonl(r, path, append=i > 0)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    _write_error_series_csv(fig_dir / "error_series.csv", records, cfg.h)
    for variant, recs in records.items():
        hists = statistics_histograms(recs, cfg.m1, cfg.m2)
        _write_hist_csv(fig_dir / f"theta_hist_{variant}.csv", hists, "theta")
        _write_hist_csv(fig_dir / f"xi_hist_{variant}.csv", hists, "xi")
    manifest = {
        "config_hash": _config_hash(conf, args),
        "seed": cfg.base_seed,
        "version": __version__,
        "provenance": provenance,
        "layout": {
            "summary": "summary.csv",
            "trials": "trials/<variant>.jsonl",
            "figures": "figures/*.csv",
        },
        "timing_seconds": elapsed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for variant, s in summaries.items():
        print(
            f"{variant:10s} div={100 * s.divergence_fraction:g}% "
            f"rmse={_fmt(s.rmse)} cor={_fmt(s.pattern_correlation)}"
        )
    bad = [
        v
        for v, s in summaries.items()
        if parse_variant(v)[1] in ("ai", "cai") and s.diverged > 0
    ]
    if bad:
        print(
            f"ACCEPTANCE ASSERTION FAILED: adaptive variant(s) diverged: {', '.join(bad)}",
            file=sys.stderr,
        )
        return EXIT_ASSERTION
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    conf = _load_toml(args.config)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    sw = conf.get("sweep", {})
    axis = args.axis or sw.get("axis")
    if axis not in ("rho", "h", "integrator"):
        raise ConfigError("sweep needs an axis: rho, h, or integrator")
    if args.values:
        raw = [v.strip() for v in args.values.split(",")]
    else:
        raw = sw.get("values")
        if not raw:
            raise ConfigError("sweep needs values (config [sweep].values or --values)")
    values = [parse_integrator(str(v)) for v in raw] if axis == "integrator" else [float(v) for v in raw]
    clim, bench = _derive_thresholds(conf, args, out_dir)
    cfg = _experiment_config(conf, args, clim, bench)
    rows = run_sweep(cfg, axis, values, jobs=args.jobs)
    path = out_dir / f"sweep_{axis}.csv"
    _write_sweep_csv(path, axis, rows, cfg.base_seed, _git_describe())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    try:
        paths = write_report(out_dir)
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adenkf",
        description="Ensemble filters with adaptive covariance inflation: "
        "twin-experiment runner",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="TOML config file")
    common.add_argument("--output", "-o", default="adenkf-out", help="output directory")
    common.add_argument("--regime", choices=sorted(_REGIMES), help="forcing shorthand")
    common.add_argument("--seed", type=int, help="override base seed")
    common.add_argument("--trials", type=int, help="override trial count")
    common.add_argument("--no-derive", action="store_true",
                        help="fail instead of deriving missing thresholds")
    common.add_argument("--rederive", action="store_true",
                        help="recompute climatology/thresholds even if cached")

    p = sub.add_parser("thresholds", parents=[common],
                       help="estimate climatology and trigger thresholds")
    p.set_defaults(func=cmd_thresholds)

    jobs_default = os.cpu_count() or 1
    p = sub.add_parser("run", parents=[common], help="run a twin-experiment batch")
    p.add_argument("--variants", help="comma-separated filter variants")
    p.add_argument("--integrator", help="forecast integrator, e.g. rk4@2.5e-3")
    p.add_argument("--rho", type=float, help="constant inflation strength")
    p.add_argument("--h", type=float, help="observation interval")
    p.add_argument("--total-time", type=float, dest="total_time")
    p.add_argument("--jobs", type=int, default=jobs_default,
                   help=f"parallel workers (default {jobs_default})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run a parameter sweep")
    p.add_argument("--axis", choices=["rho", "h", "integrator"])
    p.add_argument("--values", help="comma-separated grid values")
    p.add_argument("--variants", help="comma-separated filter variants")
    p.add_argument("--integrator", help="forecast integrator for non-integrator axes")
    p.add_argument("--rho", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--total-time", type=float, dest="total_time")
    p.add_argument("--jobs", type=int, default=jobs_default)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render markdown + SVG from run artifacts")
    p.add_argument("--output", "-o", default="adenkf-out", help="directory with run artifacts")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
