"""Command-line entry points: run experiments, check certificates, export.

Subcommands::

    pcmpc run <config> [--seed S] [--runs N] [--out DIR]
    pcmpc check <config> [--out DIR]

``<config>`` is a TOML file path, or the bare name of a packaged example
(``vandevusse``).  Exit codes: 0 success, 2 validation error, 3 certificate
or check failure, 4 I/O error.

The output directory resolves in order of precedence: the ``--out`` flag,
the config's ``[output] directory``, the ``PCMPC_OUT_DIR`` environment
variable, and finally ``./results``.

All emitted files are byte-deterministic for a fixed (config, seed): rows
follow fixed field orders, floats are serialized with 17 significant
digits, and line endings are ``\\n``.  ``summary.json`` embeds a canonical
echo of the effective configuration so a result can be re-run from its own
summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import stability
from .config import (
    ExperimentConfig,
    assemble_experiment,
    config_to_dict,
    load_config,
)
from .errors import (
    CertificateError,
    ConditioningError,
    ConfigError,
    DegreeOverflowError,
    ParameterError,
)
from .sim import MonteCarloSummary, monte_carlo

__all__ = [
    "main",
    "run_experiment",
    "check_stability",
    "export",
    "bundled_config_path",
]

_ENV_OUT_DIR = "PCMPC_OUT_DIR"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CHECK_FAILURE = 3
EXIT_IO = 4

_VALIDATION_ERRORS = (ConfigError, ParameterError, DegreeOverflowError)
_CERTIFICATE_ERRORS = (CertificateError, ConditioningError)


def bundled_config_path(name: str) -> Path:
    """Filesystem path of a packaged example configuration."""
    from importlib.resources import files

    return Path(str(files("pcmpc") / "data" / f"{name}.toml"))


def _resolve_config_arg(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    if path.suffix == "" and os.sep not in arg:
        candidate = bundled_config_path(arg)
        if candidate.is_file():
            return candidate
    return path


def _resolve_output_dir(flag: str | None, cfg: ExperimentConfig) -> Path:
    if flag:
        return Path(flag)
    if cfg.output.directory:
        return Path(cfg.output.directory)
    env = os.environ.get(_ENV_OUT_DIR)
    if env:
        return Path(env)
    return Path("results")


# ----------------------------------------------------------------------
# deterministic serialization

def _fmt(value) -> str:
    """Fixed-width-precision text for one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def _json_text(obj, indent: int = 0) -> str:
    """JSON with insertion-ordered keys and 17-significant-digit floats."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        rows = [
            f"{pad}  {json.dumps(str(key))}: {_json_text(val, indent + 1)}"
            for key, val in obj.items()
        ]
        return "{\n" + ",\n".join(rows) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [_json_text(val, indent + 1) for val in obj]
        if all(not isinstance(val, (dict, list, tuple)) for val in obj):
            return "[" + ", ".join(items) + "]"
        rows = [f"{pad}  {item}" for item in items]
        return "[\n" + ",\n".join(rows) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        # JSON has no NaN/Inf literal; null keeps the document parseable
        return "%.17g" % value if np.isfinite(value) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def _write_rows(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _trajectory_rows(stats):
    for run in stats.runs:
        n_steps = run.inputs.shape[0]
        for t in range(n_steps + 1):
            violated = bool(run.violations[t].any()) if run.violations.size else False
            inputs = run.inputs[t] if t < n_steps else [""] * run.inputs.shape[1]
            yield [run.run_index, t, *run.states[t], *inputs, int(violated)]


def export(
    summary: MonteCarloSummary,
    out_dir,
    formats=("csv", "json"),
    config: ExperimentConfig | None = None,
) -> list[Path]:
    """Write the per-run, aggregate, and summary files; returns the paths.

    CSV trajectory files hold one row per run per step per controller file;
    ``moments.csv`` and ``histograms.csv`` hold the cross-run aggregates;
    ``summary.json`` holds fractions, fallback counts, the seed, and the
    configuration echo.
    """
    if summary.n_runs < 1:
        raise ParameterError("cannot export an empty summary")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if "csv" in formats:
        for name, stats in summary.stats.items():
            n_x = stats.mean_traj.shape[1]
            n_u = stats.runs[0].inputs.shape[1]
            header = (
                ["run", "t"]
                + [f"x{i + 1}" for i in range(n_x)]
                + [f"u{i + 1}" for i in range(n_u)]
                + ["violated"]
            )
            path = out_dir / f"trajectories_{name}.csv"
            _write_rows(path, header, _trajectory_rows(stats))
            written.append(path)

        any_stats = next(iter(summary.stats.values()))
        n_x = any_stats.mean_traj.shape[1]
        header = (
            ["controller", "t"]
            + [f"mean_x{i + 1}" for i in range(n_x)]
            + [f"var_x{i + 1}" for i in range(n_x)]
        )
        path = out_dir / "moments.csv"
        _write_rows(
            path,
            header,
            (
                [name, t, *stats.mean_traj[t], *stats.var_traj[t]]
                for name, stats in summary.stats.items()
                for t in range(stats.mean_traj.shape[0])
            ),
        )
        written.append(path)

        path = out_dir / "histograms.csv"
        _write_rows(
            path,
            ["controller", "time", "state", "bin_lo", "bin_hi", "count"],
            (
                [name, hist.time, hist.state, hist.edges[b], hist.edges[b + 1], counts[b]]
                for hist in summary.histograms
                for name, counts in hist.counts.items()
                for b in range(len(counts))
            ),
        )
        written.append(path)

    if "json" in formats:
        controllers = {}
        for name, stats in summary.stats.items():
            controllers[name] = {
                "violation_fraction": stats.violation_fraction,
                "satisfaction_fraction": 1.0 - stats.violation_fraction,
                "violation_by_constraint": list(stats.violation_by_constraint),
                "fallback_total": stats.fallback_total,
                "fallback_rate": stats.fallback_rate,
                "aborted_total": stats.aborted_total,
                "mean_square_sum": stats.mean_square_sum,
            }
        doc = {
            "n_runs": summary.n_runs,
            "base_seed": summary.base_seed,
            "controllers": controllers,
        }
        if config is not None:
            doc["config"] = config_to_dict(config)
        path = out_dir / "summary.json"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_json_text(doc) + "\n")
        written.append(path)

    return written


# ----------------------------------------------------------------------
# subcommands

def _load_and_assemble(config_arg: str, seed=None, runs=None):
    """Shared front half of both subcommands; returns (cfg, experiment) or exit code."""
    try:
        cfg = load_config(_resolve_config_arg(config_arg))
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if seed is not None:
        if seed < 0:
            print("error: --seed must be nonnegative", file=sys.stderr)
            return EXIT_VALIDATION
        cfg = replace(cfg, simulation=replace(cfg.simulation, seed=int(seed)))
    if runs is not None:
        if runs < 1:
            print("error: --runs must be positive", file=sys.stderr)
            return EXIT_VALIDATION
        cfg = replace(cfg, simulation=replace(cfg.simulation, runs=int(runs)))
    try:
        experiment = assemble_experiment(cfg)
    except _CERTIFICATE_ERRORS as exc:
        rho = getattr(exc, "spectral_radius", None)
        detail = f" (spectral radius {rho:.6f})" if rho is not None else ""
        print(f"certificate failure: {exc}{detail}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return cfg, experiment


def run_experiment(config_arg: str, seed=None, runs=None, out_dir=None) -> int:
    """Load, assemble, Monte Carlo, export; returns a process exit code."""
    front = _load_and_assemble(config_arg, seed=seed, runs=runs)
    if isinstance(front, int):
        return front
    cfg, experiment = front
    summary = monte_carlo(
        experiment.setup, n_runs=cfg.simulation.runs, base_seed=cfg.simulation.seed
    )
    target = _resolve_output_dir(out_dir, cfg)
    try:
        written = export(summary, target, formats=cfg.output.formats, config=cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(f"wrote {path}")
    for name, stats in summary.stats.items():
        print(
            f"{name}: violation fraction {stats.violation_fraction:.2f}, "
            f"fallbacks {stats.fallback_total}"
        )
    return EXIT_OK


def check_stability(config_arg: str, out_dir=None) -> int:
    """Run the certificate audit suite and write a machine-readable report."""
    front = _load_and_assemble(config_arg)
    if isinstance(front, int):
        return front
    cfg, experiment = front
    cert = experiment.certificate
    if cert is None:
        try:
            cert = stability.build_certificate(
                experiment.dynamics,
                experiment.problem.weights,
                gain=experiment.problem.gain,
                delta=cfg.controller.delta,
            )
        except _CERTIFICATE_ERRORS as exc:
            print(f"certificate failure: {exc}", file=sys.stderr)
            return EXIT_CHECK_FAILURE

    rng = np.random.default_rng(cfg.simulation.seed)
    residual = stability.residual_check(cert, experiment.dynamics)
    drift = stability.drift_check(cert, experiment.dynamics, rng=rng)
    value = stability.value_bound_check(experiment.problem, cert, rng=rng)

    checks = {
        "lyapunov_residual": {
            "inequality": "max |Acl' P Acl - P + (1 + delta) M| <= tolerance",
            "passed": residual.passed,
            "residual": residual.residual,
            "tolerance": residual.tolerance,
        },
        "drift": {
            "inequality": "-delta z' M z + b <= 0 outside {z' M z <= b / delta}",
            "passed": drift.passed,
            "max_drift": drift.max_drift,
            "n_exterior": drift.n_exterior,
            "identity_gap": drift.identity_gap,
            "mc_gap_sigmas": drift.mc_gap_sigmas,
            "worst_sample": list(drift.worst_sample) if drift.worst_sample is not None else None,
        },
        "value_bound": {
            "inequality": "V*(z) <= V_gain(z) <= z' P z + N b",
            "passed": value.passed,
            "max_suboptimal_gap": value.max_suboptimal_gap,
            "max_optimal_gap": value.max_optimal_gap,
            "n_samples": value.n_samples,
            "worst_sample": list(value.worst_sample) if value.worst_sample is not None else None,
        },
    }
    all_passed = all(entry["passed"] for entry in checks.values())
    report = {
        "passed": all_passed,
        "spectral_radius": cert.spectral_radius,
        "delta": cert.delta,
        "checks": checks,
    }

    target = _resolve_output_dir(out_dir, cfg)
    try:
        target.mkdir(parents=True, exist_ok=True)
        report_path = target / "check_report.json"
        with open(report_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_json_text(report) + "\n")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    for name, entry in checks.items():
        status = "PASS" if entry["passed"] else "FAIL"
        line = f"[{status}] {name}: {entry['inequality']}"
        if not entry["passed"] and entry.get("worst_sample") is not None:
            line += f" | worst sample {np.array(entry['worst_sample'])}"
        print(line)
    print(f"report written to {report_path}")
    return EXIT_OK if all_passed else EXIT_CHECK_FAILURE


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pcmpc",
        description="Chance-constrained stochastic MPC experiments on uncertain linear systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a Monte Carlo experiment and export results")
    p_run.add_argument("config", help="TOML config path or packaged name (e.g. vandevusse)")
    p_run.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_run.add_argument("--runs", type=int, default=None, help="override the run count")
    p_run.add_argument("--out", default=None, help="output directory")

    p_check = sub.add_parser("check", help="audit the stability certificate")
    p_check.add_argument("config", help="TOML config path or packaged name")
    p_check.add_argument("--out", default=None, help="output directory for the report")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, seed=args.seed, runs=args.runs, out_dir=args.out)
    return check_stability(args.config, out_dir=args.out)


if __name__ == "__main__":
    sys.exit(main())
