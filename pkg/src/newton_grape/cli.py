"""Benchmark command line: `grape run` and `grape compare`.

Outputs are CSV files with full decimal precision so that runs can be
audited byte-for-byte: given the same config, seed and worker count, two
runs produce identical files.  Exit codes: 0 success, 1 configuration
error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .config import BenchConfig, ConfigError, load_config, preset_config
from .grape_core import ControlSequence
from .optimizer import OptimLog, OptimizationError, optimize

__all__ = ["main", "run_benchmark", "write_convergence_csv", "write_waveform_csv"]

CSV_COLUMNS = (
    "iteration",
    "cumulative_trajectories",
    "fidelity",
    "penalty",
    "infidelity",
    "grad_inf_norm",
    "sigma",
    "alpha",
    "cond_estimate",
    "linesearch_evals",
)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def write_convergence_csv(path: str, log: OptimLog, j_max: float = 1.0) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for rec in log.records:
        j = rec.extra.get("fidelity", -rec.f)
        penalty = rec.extra.get("penalty", 0.0)
        row = (
            rec.iteration,
            rec.cost_cumulative,
            j,
            penalty,
            j_max - j,
            rec.grad_inf,
            rec.sigma,
            rec.alpha,
            rec.cond_estimate,
            rec.ls_evals,
        )
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_waveform_csv(path: str, seq: ControlSequence, labels: list[str], dt: float) -> None:
    lines = [f"# dt_seconds={_fmt(dt)}", ",".join(labels)]
    for n in range(seq.n_slices):
        lines.append(",".join(_fmt(seq.amplitudes[k, n]) for k in range(seq.n_channels)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _final_record(log: OptimLog):
    return log.records[-1] if log.records else None


def run_benchmark(config: BenchConfig, method: str | None = None,
                  seed: int | None = None, workers: int = 1):
    """Assemble, optimize, and return (best sequence, log, problem)."""
    problem = config.assemble_problem()
    seq0 = config.initial_sequence(seed)
    settings = config.optimizer_settings()
    cache = config.make_cache()
    return (
        *optimize(problem, seq0, method or config.method, settings,
                  cache=cache, workers=workers),
        problem,
    )


def _cmd_run(args) -> int:
    config = _resolve_config(args)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    conv_path = os.path.join(out_dir, "convergence.csv")
    wave_path = os.path.join(out_dir, "waveform.csv")
    summary_path = os.path.join(out_dir, "summary.json")
    method = args.method or config.method
    seed = args.seed if args.seed is not None else config.seed

    try:
        seq, log, problem = run_benchmark(config, method, seed, args.workers)
    except OptimizationError as exc:
        # Flush whatever was logged before the numerical failure.
        write_convergence_csv(conv_path, exc.log, config.j_max)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2

    write_convergence_csv(conv_path, log, config.j_max)
    write_waveform_csv(wave_path, seq, config.channel_labels(), problem.dt)
    final = _final_record(log)
    summary = {
        "method": method,
        "seed": seed,
        "workers": args.workers,
        "iterations": len(log.records) - 1,
        "termination": log.termination,
        "final_fidelity": final.extra.get("fidelity", -final.f) if final else None,
        "final_penalty": final.extra.get("penalty", 0.0) if final else None,
        "final_infidelity": (
            config.j_max - final.extra.get("fidelity", -final.f) if final else None
        ),
        "cumulative_trajectories": final.cost_cumulative if final else 0,
        "outputs": {"convergence": conv_path, "waveform": wave_path},
    }
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"{method}: J = {summary['final_fidelity']:.6f} after "
        f"{summary['cumulative_trajectories']} trajectories ({log.termination})"
    )
    return 0


def _trajectories_to_threshold(log: OptimLog, threshold: float):
    for rec in log.records:
        j = rec.extra.get("fidelity", -rec.f)
        if j >= threshold:
            return rec.cost_cumulative
    return None


def _cmd_compare(args) -> int:
    config = _resolve_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("--methods must name at least one method")
    thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else []
    seed = args.seed if args.seed is not None else config.seed

    rows = []
    for method in methods:
        try:
            _, log, _ = run_benchmark(config, method, seed, args.workers)
        except OptimizationError as exc:
            print(f"error in {method}: {exc}", file=sys.stderr)
            return 2
        final = _final_record(log)
        row = {
            "method": method,
            "final_fidelity": final.extra.get("fidelity", -final.f),
            "trajectories": final.cost_cumulative,
        }
        for t in thresholds:
            row[f"to_{t:g}"] = _trajectories_to_threshold(log, t)
        rows.append(row)

    headers = ["method", "final_fidelity", "trajectories"] + [f"to_{t:g}" for t in thresholds]
    widths = {h: max(len(h), 12) for h in headers}
    print("  ".join(h.ljust(widths[h]) for h in headers))
    for row in rows:
        cells = []
        for h in headers:
            val = row[h]
            if val is None:
                cells.append("-".ljust(widths[h]))
            elif isinstance(val, float):
                cells.append(f"{val:.6f}".ljust(widths[h]))
            else:
                cells.append(str(val).ljust(widths[h]))
        print("  ".join(cells))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "comparison.csv")
        lines = [",".join(headers)]
        for row in rows:
            lines.append(
                ",".join(
                    "" if row[h] is None else (row[h] if isinstance(row[h], str) else _fmt(row[h]))
                    for h in headers
                )
            )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def _resolve_config(args) -> BenchConfig:
    if args.preset:
        overrides = None
        if args.config:
            # A config given next to a preset is a partial override; it is
            # validated only after merging into the preset.
            try:
                with open(args.config, "r", encoding="utf-8") as fh:
                    overrides = json.load(fh)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {args.config}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"config parse error in {args.config}: line {exc.lineno}, "
                    f"column {exc.colno}: {exc.msg}"
                ) from exc
        return preset_config(args.preset, overrides)
    if not args.config:
        raise ConfigError("give a config file, a --preset, or both")
    return load_config(args.config)


def _add_common(parser):
    parser.add_argument("config", nargs="?", help="JSON config file (optional with --preset)")
    parser.add_argument("--preset", choices=["hcf", "singlet"],
                        help="built-in benchmark; a config file, if also given, overrides preset keys")
    parser.add_argument("--method", help="optimizer method override")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers for slice derivatives")
    parser.add_argument("--seed", type=int, default=None, help="initial-guess seed override")
    parser.add_argument("--out", default=None, help="output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="grape",
        description="Newton-Raphson GRAPE benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one optimization and write logs")
    _add_common(p_run)
    p_cmp = sub.add_parser("compare", help="run several methods on one problem")
    _add_common(p_cmp)
    p_cmp.add_argument("--methods", required=True, help="comma-separated method list")
    p_cmp.add_argument("--thresholds", default="", help="comma-separated fidelity thresholds")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
