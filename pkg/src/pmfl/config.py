"""Flat experiment configuration with strict validation.

Configs load from a single-level JSON object whose keys match the dataclass
fields one to one; unknown keys are errors, not warnings.  Hyperparameter
defaults are the reference settings (learning rates, temperature, buffer
sizes, cutoff, concentrations, mean frequency); the population/duration
defaults are desk scale so a default run finishes in seconds.  The
``full_scale()`` profile swaps in the reference population (250 nodes,
10000 rounds).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .participation import PATTERNS
from .server import AGGREGATION_MODES

VARIANTS = (
    "pmfl",
    "wo_mct",
    "wo_awc",
    "wo_hgm",
    "uniform_average",
    "cached_update",
)
FREQUENCY_MODES = ("dirichlet", "uniform")


@dataclass
class ExperimentConfig:
    # federation
    num_nodes: int = 30
    rounds: int = 400
    variant: str = "pmfl"
    aggregation_mode: str = "corrected"
    seed: int = 0
    # local training
    local_iterations: int = 5
    local_lr: float = 0.1
    batch_size: int = 32
    temperature: float = 0.5
    contrastive_weight: float = 0.5
    local_buffer_size: int = 5
    # server
    global_lr: float = 1.0
    global_buffer_size: int = 3
    cutoff_interval: int | None = 50  # None disables the cutoff
    # heterogeneity
    data_alpha: float = 0.1
    participation_beta: float = 0.1
    mean_frequency: float = 0.1
    frequency_mode: str = "dirichlet"
    # participation
    pattern: str = "bernoulli"
    markov_p01: float = 0.05
    cycle_length: int = 100
    # model (classifier output width comes from the dataset's class count)
    encoder_dims: tuple[int, ...] = (32, 32)
    projection_dims: tuple[int, ...] = (16,)
    classifier_hidden_dims: tuple[int, ...] = ()
    # dataset
    dataset_source: str = "synthetic"
    dataset_num_classes: int = 10
    dataset_input_dim: int = 32
    dataset_samples_per_class: int = 500
    dataset_test_fraction: float = 0.25
    dataset_noise_scale: float = 1.0
    dataset_class_separation: float = 3.0
    dataset_seed: int = 0
    dataset_standardize: bool = False
    # harness
    eval_every: int = 10
    checkpoint_every: int = 0  # 0: only on failure
    workers: int = 1

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        """Reference-scale profile: 250 nodes, 10000 rounds."""
        base = dict(num_nodes=250, rounds=10000)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        problems = []

        def check(ok: bool, name: str, why: str):
            if not ok:
                problems.append(f"{name}: {why}")

        check(self.num_nodes >= 1, "num_nodes", "must be >= 1")
        check(self.rounds >= 0, "rounds", "must be >= 0")
        check(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        check(
            self.aggregation_mode in AGGREGATION_MODES,
            "aggregation_mode",
            f"must be one of {AGGREGATION_MODES}",
        )
        check(self.local_iterations >= 0, "local_iterations", "must be >= 0")
        check(self.local_lr > 0, "local_lr", "must be > 0")
        check(self.batch_size >= 1, "batch_size", "must be >= 1")
        check(self.temperature > 0, "temperature", "must be > 0")
        check(self.contrastive_weight >= 0, "contrastive_weight", "must be >= 0")
        check(self.local_buffer_size >= 0, "local_buffer_size", "must be >= 0")
        check(self.global_lr > 0, "global_lr", "must be > 0")
        check(self.global_buffer_size >= 0, "global_buffer_size", "must be >= 0")
        check(
            not (self.global_buffer_size > 1 and self.rounds < 2),
            "global_buffer_size",
            "history smoothing needs rounds >= 2",
        )
        check(
            self.cutoff_interval is None or self.cutoff_interval >= 1,
            "cutoff_interval",
            "must be >= 1 or null",
        )
        check(self.data_alpha > 0, "data_alpha", "must be > 0")
        check(self.participation_beta > 0, "participation_beta", "must be > 0")
        check(0 < self.mean_frequency <= 1, "mean_frequency", "must lie in (0, 1]")
        check(
            self.frequency_mode in FREQUENCY_MODES,
            "frequency_mode",
            f"must be one of {FREQUENCY_MODES}",
        )
        check(self.pattern in PATTERNS, "pattern", f"must be one of {PATTERNS}")
        check(0 < self.markov_p01 <= 1, "markov_p01", "must lie in (0, 1]")
        check(self.cycle_length >= 1, "cycle_length", "must be >= 1")
        for name in ("encoder_dims", "projection_dims", "classifier_hidden_dims"):
            dims = getattr(self, name)
            check(
                all(isinstance(d, int) and d >= 1 for d in dims),
                name,
                "widths must be positive integers",
            )
        check(self.dataset_num_classes >= 2, "dataset_num_classes", "must be >= 2")
        check(self.dataset_input_dim >= 1, "dataset_input_dim", "must be >= 1")
        check(
            self.dataset_samples_per_class >= 1,
            "dataset_samples_per_class",
            "must be >= 1",
        )
        check(
            0 <= self.dataset_test_fraction < 1,
            "dataset_test_fraction",
            "must lie in [0, 1)",
        )
        check(self.dataset_noise_scale >= 0, "dataset_noise_scale", "must be >= 0")
        check(self.eval_every >= 1, "eval_every", "must be >= 1")
        check(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        check(self.workers >= 1, "workers", "must be >= 1")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def resolved(self) -> "ExperimentConfig":
        """Effective config after the variant's forced settings.

        The contrastive machinery is part of the full scheme only; ablation
        and baseline variants that drop it force the corresponding knobs off
        so that one variant label always means one behaviour.
        """
        out = dataclasses.replace(self)
        if self.variant in ("wo_mct", "uniform_average", "cached_update"):
            out.contrastive_weight = 0.0
            out.local_buffer_size = 0
        if self.variant in ("wo_hgm", "uniform_average", "cached_update"):
            out.global_buffer_size = 0
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("encoder_dims", "projection_dims", "classifier_hidden_dims"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        cleaned = {}
        for key, value in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            cleaned[key] = _coerce(key, value)
        cfg = cls(**cleaned)
        cfg.validate()
        return cfg


def _coerce(key: str, value):
    if key in ("encoder_dims", "projection_dims", "classifier_hidden_dims"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ValueError(f"config key {key!r} must be a list of integers") from None
    if key == "cutoff_interval":
        if value is None:
            return None
        if isinstance(value, str):
            if value.lower() in ("inf", "none", "null"):
                return None
            value = int(value)
        if isinstance(value, float):
            if math.isinf(value):
                return None
            if not value.is_integer():
                raise ValueError("cutoff_interval must be an integer, 'inf' or null")
            value = int(value)
        return int(value)
    return value


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat JSON config file and apply explicit overrides on top."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    if overrides:
        raw.update(overrides)
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
