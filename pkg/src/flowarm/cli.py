"""``flowarm`` command line: train, transfer, plot, compare.

Exit codes: 0 success, 1 configuration or input error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import env as reacher
from .harness import (
    Stage, TransferMode, adaptation_speed_summary, detect_asymptote, retention_percent, run_stage1, run_stage3,
)
from .io import ConfigError, canonical_config, load_checkpoint, load_config, read_eval_log, save_checkpoint, \
    write_eval_log
from .plot import learning_curve_svg

log = logging.getLogger("flowarm")

SEED_ENV = "FLOWARM_SEED"
EARLY_EVALS = 5


class InputError(Exception):
    pass


def _load_manifest(path):
    manifest = load_config(path)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            manifest = manifest.replace(seed=int(seed))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from exc
    return manifest


def _summary(manifest, ckpt, evals, window):
    values = [r.mean_return for r in evals]
    report = None
    if len(values) >= 2:
        rep = detect_asymptote(values, window=min(window, len(values)), timesteps=[r.timestep for r in evals])
        report = {
            "converged": rep.converged,
            "convergence_index": rep.convergence_index,
            "convergence_timestep": rep.convergence_timestep,
            "asymptotic_value": rep.asymptotic_value,
            "window_size": rep.window_size,
            "variance_threshold": rep.variance_threshold,
        }
    final = evals[-1] if evals else None
    return {
        "algorithm": manifest.algorithm,
        "stage": manifest.stage.value,
        "fault": manifest.fault.kind.value,
        "transfer_mode": manifest.transfer_mode.value,
        "seed": manifest.seed,
        "eval_freq": manifest.eval_freq,
        "timestep_budget": manifest.timestep_budget,
        "wall_clock_seconds": ckpt.train_seconds,
        "pretrain_seconds": ckpt.pretrain_seconds,
        "final_eval": None if final is None else {
            "timestep": final.timestep,
            "mean_return": final.mean_return,
            "mean_sparse_return": float(np.mean(final.sparse_returns)) if final.sparse_returns is not None else None,
            "mean_final_distance": float(np.mean(final.final_distances)) if final.final_distances is not None else None,
        },
        "early_mean_return": float(np.mean(values[:EARLY_EVALS])) if values else None,
        "asymptote": report,
    }


def _write_outputs(out: Path, manifest, ckpt, evals, window):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_config(manifest))
    write_eval_log(evals, out / "eval.csv", manifest.eval_episodes)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    summary = _summary(manifest, ckpt, evals, window)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def cmd_train(args) -> int:
    manifest = _load_manifest(args.config)
    if manifest.stage is not Stage.STAGE1:
        raise ConfigError("train runs stage 1; use 'transfer' for stage 3")
    ckpt, evals = run_stage1(manifest)
    summary = _write_outputs(Path(args.out), manifest, ckpt, evals, args.window)
    print(json.dumps({"out": str(args.out), "final_eval": summary["final_eval"]}))
    return 0


def cmd_transfer(args) -> int:
    manifest = _load_manifest(args.config)
    try:
        fault = reacher.FaultSpec.from_kind(args.fault)
    except ValueError as exc:
        raise ConfigError(f"unknown fault {args.fault!r}") from exc
    if fault.kind is reacher.FaultKind.NONE:
        raise ConfigError("transfer needs a fault other than 'none'")
    mode = TransferMode(args.mode)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise InputError(f"checkpoint not found: {ckpt_path}")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except ValueError as exc:
        raise InputError(f"{ckpt_path}: {exc}") from exc
    if ckpt.algorithm != manifest.algorithm:
        raise ConfigError(f"checkpoint holds {ckpt.algorithm} but the config asks for {manifest.algorithm}")
    if mode is TransferMode.PARAMS_AND_BUFFER and ckpt.buffer is None:
        raise ConfigError(f"{ckpt_path} was saved without a replay buffer; cannot use --mode params+buffer")
    manifest = manifest.replace(stage=Stage.STAGE3, fault=fault, transfer_mode=mode)
    out_ckpt, evals = run_stage3(ckpt, fault, mode, manifest)
    summary = _write_outputs(Path(args.out), manifest, out_ckpt, evals, args.window)
    print(json.dumps({"out": str(args.out), "final_eval": summary["final_eval"]}))
    return 0


def _series_label(csv_path: Path) -> str:
    summary = csv_path.parent / "summary.json"
    if summary.is_file():
        s = json.loads(summary.read_text())
        if s["stage"] == Stage.STAGE1.value:
            return f"{s['algorithm']} normal"
        return f"{s['algorithm']} {s['fault']} {s['transfer_mode']}"
    return csv_path.stem


def cmd_plot(args) -> int:
    paths = sorted({p for pattern in args.logs for p in glob.glob(pattern, recursive=True)})
    if not paths:
        raise InputError(f"no eval logs match {' '.join(args.logs)}")
    series = defaultdict(list)
    for p in paths:
        series[_series_label(Path(p))].append(read_eval_log(p))
    try:
        svg = learning_curve_svg(dict(sorted(series.items())), window=args.window, title=args.title)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    return 0


COMPARE_COLUMNS = ("algorithm", "fault", "transfer_mode", "runs", "converged_runs", "timesteps_to_asymptote",
                   "wall_clock_seconds", "asymptotic_return", "retention_percent", "early_mean_return")


def compare_runs(runs_dir, window: int = 20) -> list[dict]:
    """Group completed runs under ``runs_dir`` and tabulate speed, asymptote and retention."""
    groups = defaultdict(list)
    for summary_path in sorted(Path(runs_dir).rglob("summary.json")):
        s = json.loads(summary_path.read_text())
        csv_path = summary_path.parent / "eval.csv"
        if not csv_path.is_file():
            continue
        evals = read_eval_log(csv_path)
        if len(evals) < 2:
            continue
        rep = detect_asymptote([r.mean_return for r in evals], window=min(window, len(evals)),
                               timesteps=[r.timestep for r in evals])
        row = adaptation_speed_summary([{
            "algorithm": s["algorithm"], "fault": s["fault"], "report": rep,
            "eval_freq": s["eval_freq"], "wall_clock": s["wall_clock_seconds"],
        }])[0]
        row["early_mean_return"] = float(np.mean([r.mean_return for r in evals[:EARLY_EVALS]]))
        groups[(s["algorithm"], s["fault"], s["transfer_mode"])].append(row)

    normal = {}
    for (algo, fault, _), rows in groups.items():
        if fault == reacher.FaultKind.NONE.value:
            normal[algo] = float(np.mean([r["asymptotic_return"] for r in rows]))

    table = []
    for (algo, fault, mode), rows in sorted(groups.items()):
        steps = [r["timesteps_to_asymptote"] for r in rows if r["converged"]]
        asym = float(np.mean([r["asymptotic_return"] for r in rows]))
        retention = None
        if algo in normal:
            try:
                retention = retention_percent(normal[algo], asym)
            except ValueError:
                retention = None
        table.append({
            "algorithm": algo,
            "fault": fault,
            "transfer_mode": mode,
            "runs": len(rows),
            "converged_runs": len(steps),
            "timesteps_to_asymptote": float(np.mean(steps)) if steps else None,
            "wall_clock_seconds": float(np.mean([r["wall_clock_seconds"] for r in rows])),
            "asymptotic_return": asym,
            "retention_percent": retention,
            "early_mean_return": float(np.mean([r["early_mean_return"] for r in rows])),
        })
    return table


def format_table(table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for row in table:
        writer.writerow(["" if row[c] is None else row[c] for c in COMPARE_COLUMNS])
    return buf.getvalue()


def cmd_compare(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise InputError(f"runs directory not found: {runs}")
    table = compare_runs(runs, args.window)
    text = format_table(table)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(text)
        (out / "compare.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowarm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="stage 1: train on the healthy arm")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=20, help="asymptote window (evaluations)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="stage 3: continue training on a faulted arm")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fault", required=True, choices=[k.value for k in reacher.FaultKind if k.value != "none"])
    p.add_argument("--mode", required=True, choices=[m.value for m in TransferMode])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("plot", help="learning curves with 95%% bands and asymptotes as SVG")
    p.add_argument("--logs", required=True, nargs="+", help="glob(s) of eval.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="adaptation-speed and retention table over completed runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None, help="directory for compare.csv / compare.json")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"flowarm {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"flowarm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
