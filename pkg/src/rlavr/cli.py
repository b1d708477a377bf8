"""Command-line entry point.

Subcommands: run, compare, sweep, theory-check, gen-bank, plot. Exit codes:
0 success, 1 runtime failure, 2 validation failure (stable for scripting).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import env as env_mod
from . import plotting, theory, trainer
from .trainer import ConfigError, RunConfig

SEED_ENV_VAR = "RLAVR_SEED"


class CliError(ValueError):
    """Usage or validation problem; maps to exit code 2."""


def _load_yaml(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise CliError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must be a mapping at the top level")
    return data


def _resolve_config(args) -> tuple[RunConfig, dict]:
    """Run config from file plus CLI/env seed override; returns (config, extras)."""
    raw = _load_yaml(args.config) if args.config else {}
    extras = {k: raw.pop(k) for k in ("compare", "sweep") if k in raw}
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and os.environ.get(SEED_ENV_VAR):
        try:
            raw["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise CliError(f"{SEED_ENV_VAR} must be an integer") from exc
    return trainer.config_from_dict(raw), extras


def _prepare_out_dir(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _run_many(configs: list[RunConfig], jobs: int) -> list[trainer.RunResult]:
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(trainer.run_experiment, configs))
    return [trainer.run_experiment(cfg) for cfg in configs]


def cmd_run(args) -> int:
    cfg, _ = _resolve_config(args)
    out = _prepare_out_dir(args.out, args.force)
    result = trainer.run_experiment(cfg)
    trainer.write_run_artifacts(result, out)
    _say(
        args,
        f"{cfg.strategy} seed={cfg.seed}: best accuracy {result.best_accuracy:.4f} "
        f"at step {result.best_step}; budget {result.ledger.cumulative_queried}/"
        f"{result.ledger.cumulative_seen} -> {out}",
    )
    return 0


def _run_grid(
    base: RunConfig, grid: list[dict], seeds: list[int], out: Path, jobs: int
) -> list[tuple[dict, RunConfig, trainer.RunResult]]:
    configs, keys = [], []
    for point in grid:
        for seed in seeds:
            configs.append(dataclasses.replace(base, seed=seed, **point))
            keys.append(point)
    results = _run_many(configs, jobs)
    out_rows = []
    for point, cfg, result in zip(keys, configs, results):
        tag = "-".join(f"{k}{v}" for k, v in point.items()) or "base"
        run_dir = out / "runs" / f"{tag}-seed{cfg.seed}"
        trainer.write_run_artifacts(result, run_dir)
        out_rows.append((point, cfg, result))
    return out_rows


def cmd_compare(args) -> int:
    cfg, extras = _resolve_config(args)
    compare = extras.get("compare")
    if not compare or not compare.get("strategies"):
        raise CliError("compare requires a 'compare: {strategies: [...], seeds: [...]}' config section")
    strategies = list(compare["strategies"])
    seeds = [int(s) for s in compare.get("seeds", [cfg.seed])]
    out = _prepare_out_dir(args.out, args.force)
    rows = _run_grid(cfg, [{"strategy": s} for s in strategies], seeds, out, args.jobs)

    by_strategy: dict[str, list[float]] = {}
    for point, _, result in rows:
        by_strategy.setdefault(point["strategy"], []).append(result.best_accuracy)
    table = [
        {
            "strategy": strategy,
            "mean_best_accuracy": float(np.mean(accs)),
            "std_best_accuracy": float(np.std(accs)),
            "seeds": len(accs),
        }
        for strategy, accs in by_strategy.items()
    ]
    table.sort(key=lambda r: -r["mean_best_accuracy"])
    with (out / "comparison.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["strategy", "mean_best_accuracy", "std_best_accuracy", "seeds"])
        writer.writeheader()
        writer.writerows(table)
    for row in table:
        _say(args, f"{row['strategy']:<12} {row['mean_best_accuracy']:.4f} +- {row['std_best_accuracy']:.4f}")
    _say(args, f"comparison written to {out / 'comparison.csv'}")
    return 0


_SWEEP_AXES = ("p", "p2", "strategy")


def cmd_sweep(args) -> int:
    cfg, extras = _resolve_config(args)
    sweep = extras.get("sweep")
    if not sweep:
        raise CliError("sweep requires a 'sweep:' config section with at least one axis (p, p2, strategy)")
    axes = {k: list(v) for k, v in sweep.items() if k in _SWEEP_AXES and v}
    if not axes:
        raise CliError("sweep section declares no non-empty axis (p, p2, strategy)")
    seeds = [int(s) for s in sweep.get("seeds", [cfg.seed])]
    grid: list[dict] = [{}]
    for axis, values in axes.items():
        grid = [dict(point, **{axis: value}) for point in grid for value in values]
    out = _prepare_out_dir(args.out, args.force)
    rows = _run_grid(cfg, grid, seeds, out, args.jobs)

    axis_names = list(axes)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(axis_names + ["seed", "best_step", "best_accuracy", "final_pseudo_label_accuracy", "budget_ratio"])
        for point, cfg_i, result in rows:
            summary = trainer.run_summary(result)
            writer.writerow(
                [point.get(a, getattr(cfg_i, a)) for a in axis_names]
                + [
                    cfg_i.seed,
                    summary["best_step"],
                    repr(summary["best_accuracy"]),
                    repr(summary["final_pseudo_label_accuracy"]),
                    repr(summary["budget_ratio"]),
                ]
            )
    aggregates: dict[tuple, list[float]] = {}
    for point, cfg_i, result in rows:
        key = tuple(point.get(a, getattr(cfg_i, a)) for a in axis_names)
        aggregates.setdefault(key, []).append(result.best_accuracy)
    with (out / "sweep_summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(axis_names + ["seeds", "mean_best_accuracy", "std_best_accuracy"])
        for key in sorted(aggregates):
            accs = aggregates[key]
            writer.writerow(list(key) + [len(accs), repr(float(np.mean(accs))), repr(float(np.std(accs)))])
            _say(args, f"{dict(zip(axis_names, key))}: {np.mean(accs):.4f} +- {np.std(accs):.4f}")
    _say(args, f"sweep written to {out / 'sweep.csv'}")
    return 0


def cmd_theory_check(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV_VAR, "0") or 0)
    summary, rows = theory.fuzz_theorem(args.instances, seed, collect_rows=True)
    with (out / "instances.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["seed", "G", "d", "kappa", "cos_grad", "bound", "satisfied"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _say(
        args,
        f"{summary['instances']} instances, {summary['violations']} violations, "
        f"max identity gap {summary['max_identity_gap']:.3e} -> {out}",
    )
    return 0 if summary["violations"] == 0 else 1


def cmd_gen_bank(args) -> int:
    cfg, _ = _resolve_config(args)
    out = _prepare_out_dir(args.out, args.force)
    environment = trainer.build_environment(cfg)
    env_mod.save_bank(environment.train, out / "train_bank.json")
    env_mod.save_bank(environment.eval, out / "eval_bank.json")
    _say(
        args,
        f"banks written to {out} (train {len(environment.train)}, eval {len(environment.eval)}, "
        f"achieved hardness {environment.achieved_hardness:.3f})",
    )
    return 0


_CHARTS = [
    ("eval_accuracy", "Evaluation accuracy", "eval_accuracy.svg"),
    ("pseudo_label_accuracy", "Pseudo-label accuracy", "pseudo_label_accuracy.svg"),
    ("cumulative_budget_ratio", "Cumulative budget usage", "budget_ratio.svg"),
]


def _series_label(path: Path) -> str:
    summary = path.parent / "summary.json"
    if summary.exists():
        try:
            data = json.loads(summary.read_text())
            return f"{data['strategy']}-seed{data['seed']}"
        except (json.JSONDecodeError, KeyError):
            pass
    return path.stem


def cmd_plot(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    tables = []
    for metrics_path in args.metrics:
        path = Path(metrics_path)
        if not path.exists():
            raise CliError(f"metrics file not found: {metrics_path}")
        with path.open() as fh:
            reader = csv.DictReader(fh)
            columns = reader.fieldnames or []
            required = ["step"] + [c for c, _, _ in _CHARTS]
            for column in required:
                if column not in columns:
                    raise CliError(f"metrics file {metrics_path} is missing column '{column}'")
            rows = list(reader)
        tables.append((_series_label(path), rows))
    for column, title, filename in _CHARTS:
        series = []
        for label, rows in tables:
            xs, ys = [], []
            for row in rows:
                if row[column] == "":
                    continue
                xs.append(float(row["step"]))
                ys.append(float(row[column]))
            series.append(plotting.ChartSeries(label=label, xs=xs, ys=ys))
        plotting.write_chart(series, title, "step", column, out / filename)
    _say(args, f"{len(_CHARTS)} charts -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlavr",
        description="Budgeted active-label acquisition for group-relative policy optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    common(sub.add_parser("run", help="execute one training run"))
    common(sub.add_parser("compare", help="run several strategies over shared seeds"))
    common(sub.add_parser("sweep", help="grid over p / p2 / strategy axes"))

    p_theory = sub.add_parser("theory-check", help="fuzz the gradient-alignment identity and bound")
    p_theory.add_argument("--out", required=True)
    p_theory.add_argument("--instances", type=int, default=10000)
    p_theory.add_argument("--seed", type=int, default=None)
    p_theory.add_argument("--force", action="store_true")
    p_theory.add_argument("--quiet", action="store_true")

    common(sub.add_parser("gen-bank", help="write prompt banks as JSON"))

    p_plot = sub.add_parser("plot", help="render SVG charts from metrics files")
    p_plot.add_argument("metrics", nargs="+", help="metrics.csv files to overlay")
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--force", action="store_true")
    p_plot.add_argument("--quiet", action="store_true")
    return parser


_COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "theory-check": cmd_theory_check,
    "gen-bank": cmd_gen_bank,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
