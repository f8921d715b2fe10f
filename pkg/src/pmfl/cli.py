"""Command-line entry points: run, sweep, synth-data, inspect."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, _coerce, load_config
from .data import DatasetSpec, export_csv, synth_dataset
from .harness import resume_run, run_experiment, run_sweep

_TUPLE_FIELDS = ("encoder_dims", "projection_dims", "classifier_hidden_dims")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One optional flag per config field; unset flags leave the base alone."""
    for f in dataclasses.fields(ExperimentConfig):
        name = _flag(f.name)
        if f.name in _TUPLE_FIELDS:
            parser.add_argument(
                name, default=None, metavar="W1,W2,...",
                help=f"layer widths (default {','.join(map(str, f.default))})",
            )
        elif f.name == "cutoff_interval":
            parser.add_argument(
                name, default=None, metavar="N|inf",
                help=f"weight-update cutoff in rounds, 'inf' disables (default {f.default})",
            )
        elif f.default is True or f.default is False:
            parser.add_argument(
                name, default=None, action=argparse.BooleanOptionalAction,
                help=f"(default {f.default})",
            )
        elif isinstance(f.default, int):
            parser.add_argument(name, type=int, default=None,
                                help=f"(default {f.default})")
        elif isinstance(f.default, float):
            parser.add_argument(name, type=float, default=None,
                                help=f"(default {f.default})")
        else:
            parser.add_argument(name, default=None, help=f"(default {f.default})")


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return overrides


def _build_config(parser, args) -> ExperimentConfig:
    overrides = _collect_overrides(args)
    try:
        if args.config:
            return load_config(args.config, overrides)
        base = ExperimentConfig().to_dict()
        base.update(overrides)
        return ExperimentConfig.from_dict(base)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))


def _parse_vary(parser, base: ExperimentConfig, items: list[str]) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            parser.error(f"--vary needs key=v1,v2,... (got {item!r})")
        key, _, raw = item.partition("=")
        key = key.strip()
        if not hasattr(base, key):
            parser.error(f"--vary: unknown config field {key!r}")
        values = []
        for token in raw.split(","):
            token = token.strip()
            if not token:
                continue
            try:
                values.append(_coerce_vary(base, key, token))
            except ValueError as exc:
                parser.error(f"--vary {key}: {exc}")
        if not values:
            parser.error(f"--vary {key}: no values given")
        grid[key] = values
    return grid


def _coerce_vary(base: ExperimentConfig, key: str, token: str):
    if key in _TUPLE_FIELDS or key == "cutoff_interval":
        return _coerce(key, token)
    default = getattr(base, key)
    if isinstance(default, bool):
        if token.lower() in ("1", "true", "yes"):
            return True
        if token.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {token!r}")
    if isinstance(default, int):
        return int(token)
    if isinstance(default, float):
        return float(token)
    return token


def _cmd_run(parser, args) -> int:
    out = Path(args.out)
    if args.resume:
        if args.config or _collect_overrides(args):
            parser.error("--resume continues with the recorded config; "
                         "drop the other flags")
        if not (out / "manifest.json").exists():
            parser.error(f"{out} has no manifest.json to resume from")
        try:
            result = resume_run(out)
        except FileNotFoundError as exc:
            parser.error(str(exc))
    else:
        cfg = _build_config(parser, args)
        result = run_experiment(cfg, out)
    summary = result.summary
    print(f"run complete: {result.rounds_completed} rounds -> {result.out_dir}")
    for key in ("final_train_accuracy", "final_test_accuracy",
                "top5_test_accuracy", "mean_deviation_last_quarter"):
        print(f"  {key}: {summary.get(key)}")
    return 0


def _cmd_sweep(parser, args) -> int:
    base = _build_config(parser, args)
    grid = _parse_vary(parser, base, args.vary or [])
    if not grid:
        parser.error("sweep needs at least one --vary key=v1,v2,...")
    rows = run_sweep(base, grid, args.out)
    failures = [r for r in rows if r["status"] != "ok"]
    print(f"sweep complete: {len(rows)} cells, {len(failures)} failed -> {args.out}")
    for row in rows:
        cells = ", ".join(f"{k}={row[k]}" for k in sorted(grid))
        if row["status"] == "ok":
            print(f"  [{row['cell']:03d}] {cells}: "
                  f"top5_test={row['top5_test_accuracy']:.4f}")
        else:
            print(f"  [{row['cell']:03d}] {cells}: ERROR {row['error']}")
    return 1 if failures else 0


def _cmd_synth_data(parser, args) -> int:
    try:
        spec = DatasetSpec(
            source="synthetic",
            num_classes=args.num_classes,
            input_dim=args.input_dim,
            samples_per_class=args.samples_per_class,
            test_fraction=args.test_fraction,
            noise_scale=args.noise_scale,
            class_separation=args.class_separation,
            seed=args.seed,
            standardize=args.standardize,
        )
        train, test = synth_dataset(spec)
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_csv(train, out / "train.csv")
    if test.num_samples:
        export_csv(test, out / "test.csv")
    with open(out / "dataset_meta.json", "w") as fh:
        json.dump(dataclasses.asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {train.num_samples} train rows and {test.num_samples} test rows "
          f"to {out}")
    return 0


def _cmd_inspect(parser, args) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        parser.error(f"{run_dir} has no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    summary = {}
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        with open(summary_path) as fh:
            summary = json.load(fh)
    if args.json:
        print(json.dumps({"manifest": manifest, "summary": summary},
                         indent=2, sort_keys=True))
        return 0
    cfg = manifest["resolved_config"]
    print(f"run directory : {run_dir}")
    print(f"package       : {manifest['package']} {manifest['version']}")
    print(f"variant       : {cfg['variant']} (mode {cfg['aggregation_mode']})")
    print(f"population    : {cfg['num_nodes']} nodes, {cfg['rounds']} rounds, "
          f"pattern {cfg['pattern']}")
    print(f"model         : {manifest['num_params']} parameters")
    if summary:
        print("summary:")
        for key in sorted(summary):
            print(f"  {key}: {summary[key]}")
    else:
        print("summary       : (run incomplete, no summary.json)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pmfl",
        description="Deterministic federated-learning simulation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", help="flat JSON config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--resume", action="store_true",
                       help="continue from the checkpoint in --out")
    _add_config_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="grid of runs over config fields")
    p_sweep.add_argument("--config", help="flat JSON config file")
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--vary", action="append", metavar="KEY=V1,V2,...",
                         help="field to vary; repeatable")
    _add_config_flags(p_sweep)

    p_synth = sub.add_parser("synth-data", help="generate a synthetic CSV dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--num-classes", type=int, default=10)
    p_synth.add_argument("--input-dim", type=int, default=32)
    p_synth.add_argument("--samples-per-class", type=int, default=500)
    p_synth.add_argument("--test-fraction", type=float, default=0.25)
    p_synth.add_argument("--noise-scale", type=float, default=1.0)
    p_synth.add_argument("--class-separation", type=float, default=3.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--standardize", action="store_true")

    p_inspect = sub.add_parser("inspect", help="print a run's manifest and summary")
    p_inspect.add_argument("--run", required=True, help="run directory")
    p_inspect.add_argument("--json", action="store_true", help="raw JSON output")

    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(p_run, args)
    if args.command == "sweep":
        return _cmd_sweep(p_sweep, args)
    if args.command == "synth-data":
        return _cmd_synth_data(p_synth, args)
    return _cmd_inspect(p_inspect, args)


if __name__ == "__main__":
    sys.exit(main())
