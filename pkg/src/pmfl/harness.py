"""Experiment driver: one config in, a directory of reproducible artifacts out.

Everything a run needs (dataset, shards, frequencies, traces, initial model)
is rebuilt deterministically from the config, so a checkpoint only has to
carry the mutable state: the global model, the weight bookkeeping, the node
buffers and the metric rows recorded so far.  Reruns of the same config are
byte-identical, with any worker count, and a resumed run finishes with the
same bytes as an uninterrupted one.

Output files per run:

- ``metrics.csv``    one row per evaluated round (accuracy/loss on train/test)
- ``weights.csv``    one row per round: mixing coefficient, participant count,
                     update deviation and every node's aggregation weight
- ``summary.json``   final and top-5 statistics (results only, no config echo)
- ``cdf.csv``        per-node accuracy/loss CDF of the final model
- ``partition.json`` shard sizes, class histograms, participation frequencies
- ``participation.csv`` the full round-by-node indicator matrix
- ``model.bin`` / ``model_meta.json`` flat float64 weights plus shape header
- ``manifest.json``  requested and resolved config, version, file list
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .client import LocalTrainConfig, NodeState, local_train, nonparticipant_update
from .config import ExperimentConfig
from .contrastive import LocalBuffer
from .data import LabeledDataset, load_dataset
from .heterogeneity import assign_frequencies, dirichlet_partition, partition_manifest
from .metrics import RoundMetrics, evaluate, node_cdf, top5_mean, update_deviation
from .nn import ModelSpec, flatten, init_params, unflatten
from .participation import ParticipationSchedule, export_trace_csv
from .rng import stream
from .server import (
    AggregatorState,
    aggregate,
    baseline_aggregate,
    history_coefficient,
    update_weights,
)

log = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.npz"
CHECKPOINT_ROWS_FILE = "checkpoint_rows.json"

OUTPUT_FILES = (
    "metrics.csv",
    "weights.csv",
    "summary.json",
    "cdf.csv",
    "partition.json",
    "participation.csv",
    "model.bin",
    "model_meta.json",
    "manifest.json",
)


def model_spec_for(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(
        input_dim=cfg.dataset_input_dim,
        encoder=tuple(cfg.encoder_dims),
        projection=tuple(cfg.projection_dims),
        classifier=tuple(cfg.classifier_hidden_dims) + (cfg.dataset_num_classes,),
    )


def dataset_spec_for(cfg: ExperimentConfig):
    from .data import DatasetSpec

    return DatasetSpec(
        source=cfg.dataset_source,
        num_classes=cfg.dataset_num_classes,
        input_dim=cfg.dataset_input_dim,
        samples_per_class=cfg.dataset_samples_per_class,
        test_fraction=cfg.dataset_test_fraction,
        noise_scale=cfg.dataset_noise_scale,
        class_separation=cfg.dataset_class_separation,
        seed=cfg.dataset_seed,
        standardize=cfg.dataset_standardize,
    )


@dataclass
class Environment:
    """Everything deterministic a run derives from its config."""

    cfg: ExperimentConfig  # resolved
    train: LabeledDataset
    test: LabeledDataset
    shards: list[np.ndarray]
    dists: np.ndarray
    assignment: object
    trace: np.ndarray  # (rounds, num_nodes)
    nodes: list[NodeState]
    spec: ModelSpec
    local_cfg: LocalTrainConfig


def build_environment(cfg: ExperimentConfig) -> Environment:
    """Instantiate dataset, shards, frequencies, traces and nodes from a
    resolved config.  Pure function of the config."""
    train, test = load_dataset(dataset_spec_for(cfg))
    if train.input_dim != cfg.dataset_input_dim:
        raise ValueError(
            f"dataset rows have {train.input_dim} features, config says "
            f"{cfg.dataset_input_dim}"
        )
    shards, dists = dirichlet_partition(
        train.labels,
        train.num_classes,
        cfg.num_nodes,
        cfg.data_alpha,
        stream(cfg.seed, "partition"),
    )
    assignment = assign_frequencies(
        dists,
        cfg.participation_beta,
        cfg.mean_frequency,
        stream(cfg.seed, "frequencies"),
        mode=cfg.frequency_mode,
    )
    schedule = ParticipationSchedule(
        pattern=cfg.pattern,
        frequencies=assignment.frequencies,
        root_seed=cfg.seed,
        cycle_length=cfg.cycle_length,
        p01=cfg.markov_p01,
    )
    trace = schedule.trace_matrix(cfg.rounds)
    nodes = [
        NodeState(
            node_id=k,
            features=train.features[shards[k]],
            labels=train.labels[shards[k]],
            buffer=LocalBuffer(cfg.local_buffer_size),
            root_seed=cfg.seed,
        )
        for k in range(cfg.num_nodes)
    ]
    local_cfg = LocalTrainConfig(
        local_iterations=cfg.local_iterations,
        local_lr=cfg.local_lr,
        batch_size=cfg.batch_size,
        temperature=cfg.temperature,
        contrastive_weight=cfg.contrastive_weight,
    )
    return Environment(
        cfg=cfg,
        train=train,
        test=test,
        shards=shards,
        dists=dists,
        assignment=assignment,
        trace=trace,
        nodes=nodes,
        spec=model_spec_for(cfg),
        local_cfg=local_cfg,
    )


@dataclass
class RunResult:
    out_dir: Path
    rounds_completed: int
    summary: dict

    @property
    def final_test_accuracy(self):
        return self.summary.get("final_test_accuracy")

    @property
    def top5_test_accuracy(self):
        return self.summary.get("top5_test_accuracy")


def _train_task(args):
    node, global_params, local_cfg, round_idx = args
    delta = local_train(node, global_params, local_cfg, round_idx)
    return node.node_id, delta, node.buffer, node.last_participation_round


def _aggregate_for_variant(
    variant: str,
    state: AggregatorState,
    updates: dict[int, np.ndarray],
    indicators: np.ndarray,
    mode: str,
):
    if variant in ("pmfl", "wo_mct", "wo_hgm"):
        return aggregate(state, updates, mode=mode)
    if variant == "wo_awc":
        return aggregate(
            state, updates, mode=mode, weights_override=np.ones(state.num_nodes)
        )
    if variant in ("uniform_average", "cached_update"):
        return baseline_aggregate(variant, state, updates, indicators, mode=mode)
    raise ValueError(f"unknown variant {variant!r}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_metrics_csv(path, rows: list[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "round",
                "psi",
                "participants",
                "deviation",
                "train_accuracy",
                "train_loss",
                "test_accuracy",
                "test_loss",
            ]
        )
        for r in rows:
            if r.train_accuracy is None:
                continue
            writer.writerow(
                [
                    r.round_idx,
                    _fmt(r.psi),
                    r.num_participants,
                    _fmt(r.deviation),
                    _fmt(r.train_accuracy),
                    _fmt(r.train_loss),
                    _fmt(r.test_accuracy),
                    _fmt(r.test_loss),
                ]
            )


def _write_weights_csv(path, rows: list[RoundMetrics], num_nodes: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "psi", "participants", "deviation"]
            + [f"weight_{k}" for k in range(num_nodes)]
        )
        for r in rows:
            weights = [] if r.weights is None else [_fmt(v) for v in r.weights]
            writer.writerow(
                [r.round_idx, _fmt(r.psi), r.num_participants, _fmt(r.deviation)]
                + weights
            )


def _write_cdf_csv(path, acc_cdf: np.ndarray, loss_cdf: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "cum_fraction"])
        for value, frac in acc_cdf:
            writer.writerow(["node_accuracy", _fmt(value), _fmt(frac)])
        for value, frac in loss_cdf:
            writer.writerow(["node_loss", _fmt(value), _fmt(frac)])


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_model(out_dir: Path, spec: ModelSpec, flat: np.ndarray) -> None:
    (out_dir / "model.bin").write_bytes(flat.astype("<f8").tobytes())
    _write_json(
        out_dir / "model_meta.json",
        {
            "dtype": "float64",
            "byte_order": "little",
            "count": int(flat.size),
            "input_dim": spec.input_dim,
            "encoder_dims": list(spec.encoder),
            "projection_dims": list(spec.projection),
            "classifier_dims": list(spec.classifier),
        },
    )


def _rows_to_jsonable(rows: list[RoundMetrics]) -> list[dict]:
    out = []
    for r in rows:
        d = dataclasses.asdict(r)
        d["weights"] = None if r.weights is None else [float(v) for v in r.weights]
        out.append(d)
    return out


def _rows_from_jsonable(raw: list[dict]) -> list[RoundMetrics]:
    rows = []
    for d in raw:
        weights = d.pop("weights")
        rows.append(
            RoundMetrics(
                **d, weights=None if weights is None else np.asarray(weights)
            )
        )
    return rows


def _save_checkpoint(
    out_dir: Path,
    env: Environment,
    state: AggregatorState,
    next_round: int,
    rows: list[RoundMetrics],
) -> None:
    arrays = {
        "next_round": np.asarray(next_round),
        "global_flat": flatten(state.global_model),
        "weights": state.weights,
        "rounds_waiting": state.rounds_waiting,
        "event_counts": state.event_counts,
        "last_participation": np.asarray(
            [-1 if n.last_participation_round is None else n.last_participation_round
             for n in env.nodes],
            dtype=np.int64,
        ),
        "history": np.stack([flatten(m) for m in state.history])
        if len(state.history)
        else np.zeros((0, state.num_params)),
    }
    if state.cached_updates is not None:
        arrays["cached_updates"] = state.cached_updates
    for node in env.nodes:
        entries = node.buffer.entries()
        arrays[f"buffer_{node.node_id}"] = (
            np.stack([flatten(m) for m in entries])
            if entries
            else np.zeros((0, state.num_params))
        )
    np.savez(out_dir / CHECKPOINT_FILE, **arrays)
    _write_json(out_dir / CHECKPOINT_ROWS_FILE, {"rows": _rows_to_jsonable(rows)})


def _load_checkpoint(
    out_dir: Path, env: Environment, state: AggregatorState
) -> tuple[int, list[RoundMetrics]]:
    path = out_dir / CHECKPOINT_FILE
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    data = np.load(path)
    spec = env.spec
    state.global_model = unflatten(spec, data["global_flat"])
    state.weights = data["weights"].copy()
    state.rounds_waiting = data["rounds_waiting"].copy()
    state.event_counts = data["event_counts"].copy()
    next_round = int(data["next_round"])
    state.round_idx = next_round
    state.history.clear()
    for row in data["history"]:
        state.history.append(unflatten(spec, row))
    if "cached_updates" in data:
        state.cached_updates = data["cached_updates"].copy()
    last = data["last_participation"]
    for node in env.nodes:
        node.last_participation_round = (
            None if last[node.node_id] < 0 else int(last[node.node_id])
        )
        node.buffer = LocalBuffer(env.cfg.local_buffer_size)
        for flat_row in data[f"buffer_{node.node_id}"]:
            node.buffer.push(unflatten(spec, flat_row))
    with open(out_dir / CHECKPOINT_ROWS_FILE) as fh:
        rows = _rows_from_jsonable(json.load(fh)["rows"])
    return next_round, rows


def _summarize(
    cfg: ExperimentConfig, rows: list[RoundMetrics], trace: np.ndarray, num_params: int
) -> dict:
    evaluated = [r for r in rows if r.train_accuracy is not None]
    last = evaluated[-1] if evaluated else None
    quarter_start = (3 * cfg.rounds) // 4
    tail_devs = [
        r.deviation
        for r in rows
        if r.round_idx >= quarter_start and r.deviation is not None
    ]
    return {
        "rounds_completed": cfg.rounds,
        "num_params": int(num_params),
        "final_train_accuracy": None if last is None else last.train_accuracy,
        "final_train_loss": None if last is None else last.train_loss,
        "final_test_accuracy": None if last is None else last.test_accuracy,
        "final_test_loss": None if last is None else last.test_loss,
        "top5_train_accuracy": (
            top5_mean([r.train_accuracy for r in evaluated]) if evaluated else None
        ),
        "top5_test_accuracy": (
            top5_mean([r.test_accuracy for r in evaluated]) if evaluated else None
        ),
        "mean_deviation_last_quarter": (
            float(np.mean(tail_devs)) if tail_devs else None
        ),
        "realized_mean_frequency": float(trace.mean()) if trace.size else 0.0,
        "evaluated_round_count": len(evaluated),
    }


def run_experiment(
    cfg: ExperimentConfig, out_dir, resume: bool = False
) -> RunResult:
    """Run one experiment end to end, writing every artifact into ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    env = build_environment(resolved)
    num_params = env.spec.num_params

    state = AggregatorState(
        num_nodes=resolved.num_nodes,
        global_model=init_params(env.spec, stream(resolved.seed, "init")),
        horizon=resolved.rounds,
        cutoff=resolved.cutoff_interval,
        history_size=resolved.global_buffer_size,
        global_lr=resolved.global_lr,
    )

    rows: list[RoundMetrics] = []
    start_round = 0
    if resume:
        start_round, rows = _load_checkpoint(out_dir, env, state)
        log.info("resuming %s at round %d", out_dir, start_round)

    _write_json(
        out_dir / "manifest.json",
        {
            "package": "pmfl",
            "version": __version__,
            "requested_config": cfg.to_dict(),
            "resolved_config": resolved.to_dict(),
            "num_params": int(num_params),
            "outputs": list(OUTPUT_FILES),
        },
    )
    _write_json(
        out_dir / "partition.json",
        partition_manifest(env.shards, env.dists, env.assignment),
    )
    export_trace_csv(env.trace, out_dir / "participation.csv")

    empty_shards = np.asarray([n.num_samples == 0 for n in env.nodes])
    pool = (
        ProcessPoolExecutor(max_workers=resolved.workers)
        if resolved.workers > 1
        else None
    )
    try:
        for t in range(start_round, resolved.rounds):
            indicators = env.trace[t].astype(np.int64)
            if empty_shards.any():
                indicators = np.where(empty_shards, 0, indicators)
            participants = [int(k) for k in np.flatnonzero(indicators == 1)]

            updates: dict[int, np.ndarray] = {}
            if pool is not None and participants:
                tasks = [
                    (env.nodes[k], state.global_model, env.local_cfg, t)
                    for k in participants
                ]
                for node_id, delta, buffer, last_round in pool.map(
                    _train_task, tasks, chunksize=1
                ):
                    updates[node_id] = delta
                    env.nodes[node_id].buffer = buffer
                    env.nodes[node_id].last_participation_round = last_round
            else:
                for k in participants:
                    updates[k] = local_train(
                        env.nodes[k], state.global_model, env.local_cfg, t
                    )
            for k in range(resolved.num_nodes):
                if k not in updates:
                    updates[k] = nonparticipant_update(num_params)

            update_weights(state, indicators)
            psi = (
                history_coefficient(t, resolved.rounds)
                if resolved.rounds >= 2
                else None
            )
            deviation = (
                update_deviation([updates[k] for k in participants])
                if participants
                else None
            )
            weights_snapshot = state.weights.copy()

            new_global = _aggregate_for_variant(
                resolved.variant, state, updates, indicators, resolved.aggregation_mode
            )

            row = RoundMetrics(
                round_idx=t,
                num_participants=len(participants),
                psi=psi,
                deviation=deviation,
                weights=weights_snapshot,
            )
            if (t + 1) % resolved.eval_every == 0 or t == resolved.rounds - 1:
                row.train_accuracy, row.train_loss = evaluate(
                    new_global, env.train.features, env.train.labels
                )
                if env.test.num_samples:
                    row.test_accuracy, row.test_loss = evaluate(
                        new_global, env.test.features, env.test.labels
                    )
            rows.append(row)

            if (
                resolved.checkpoint_every
                and (t + 1) % resolved.checkpoint_every == 0
                and t + 1 < resolved.rounds
            ):
                _save_checkpoint(out_dir, env, state, t + 1, rows)
    except Exception:
        # a periodic checkpoint pair on disk is from a clean round boundary;
        # never clobber it with this mid-round state snapshot
        if not (out_dir / CHECKPOINT_FILE).exists():
            _save_checkpoint(out_dir, env, state, state.round_idx, rows)
        log.exception(
            "run failed at round %d; checkpoint kept in %s", state.round_idx, out_dir
        )
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    _write_metrics_csv(out_dir / "metrics.csv", rows)
    _write_weights_csv(out_dir / "weights.csv", rows, resolved.num_nodes)

    per_node = [
        evaluate(state.global_model, n.features, n.labels)
        for n in env.nodes
        if n.num_samples
    ]
    acc_cdf = node_cdf([a for a, _ in per_node])
    loss_cdf = node_cdf([l for _, l in per_node])
    _write_cdf_csv(out_dir / "cdf.csv", acc_cdf, loss_cdf)

    summary = _summarize(resolved, rows, env.trace, num_params)
    _write_json(out_dir / "summary.json", summary)
    _write_model(out_dir, env.spec, flatten(state.global_model))

    # a finished run does not need its checkpoint any more
    for name in (CHECKPOINT_FILE, CHECKPOINT_ROWS_FILE):
        p = out_dir / name
        if p.exists():
            p.unlink()

    return RunResult(out_dir=out_dir, rounds_completed=resolved.rounds, summary=summary)


def resume_run(out_dir) -> RunResult:
    """Continue an interrupted run from its checkpoint."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = ExperimentConfig.from_dict(manifest["requested_config"])
    return run_experiment(cfg, out_dir, resume=True)


def run_sweep(base: ExperimentConfig, grid: dict[str, list], out_dir) -> list[dict]:
    """Cartesian grid of runs; cells fail independently and in a fixed order.

    Returns one summary row per cell and writes ``sweep_summary.csv``.
    """
    if not grid:
        raise ValueError("sweep needs at least one field to vary")
    for key in grid:
        if not hasattr(base, key):
            raise ValueError(f"unknown sweep field {key!r}")
        if not grid[key]:
            raise ValueError(f"sweep field {key!r} has no values")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    rows = []
    for index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        overrides = dict(zip(keys, combo))
        label = "__".join(f"{k}={overrides[k]}" for k in keys)
        cell_dir = out_dir / f"cell_{index:03d}__{label}".replace("/", "_")
        row = {"cell": index, **{k: overrides[k] for k in keys}}
        try:
            cfg = dataclasses.replace(base, **overrides)
            result = run_experiment(cfg, cell_dir)
            row.update(
                status="ok",
                final_test_accuracy=result.summary["final_test_accuracy"],
                top5_test_accuracy=result.summary["top5_test_accuracy"],
                final_train_accuracy=result.summary["final_train_accuracy"],
                mean_deviation_last_quarter=result.summary[
                    "mean_deviation_last_quarter"
                ],
            )
        except Exception as exc:  # cell failures must not kill the sweep
            log.exception("sweep cell %d (%s) failed", index, label)
            row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)

    fieldnames = ["cell", *keys, "status", "final_test_accuracy",
                  "top5_test_accuracy", "final_train_accuracy",
                  "mean_deviation_last_quarter", "error"]
    with open(out_dir / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt_cell(row.get(k)) for k in fieldnames})
    return rows


def _fmt_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value
