"""Deterministic federated-learning simulator.

Local training carries a model-contrastive term against a sliding buffer of
the node's own historical models; the server weights updates by each node's
mean participation interval and smooths the new global model with its recent
predecessors.  Ablation and baseline variants, heterogeneity generators,
participation patterns and a CLI harness round out the package.
"""
__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, save_config
from .contrastive import (
    ContrastiveContext,
    LocalBuffer,
    combined_loss_and_grad,
    compute_mu,
    contrastive_loss,
    cosine_similarity,
    partition_samples,
)
from .client import LocalTrainConfig, NodeState, local_train, nonparticipant_update
from .data import DatasetSpec, LabeledDataset, export_csv, ingest_csv, synth_dataset
from .harness import RunResult, build_environment, run_experiment, run_sweep, resume_run
from .heterogeneity import (
    FrequencyAssignment,
    assign_frequencies,
    dirichlet_partition,
)
from .metrics import RoundMetrics, evaluate, node_cdf, top5_mean, update_deviation
from .nn import (
    Gradient,
    Layer,
    Minibatch,
    ModelParams,
    ModelSpec,
    cross_entropy,
    cross_entropy_and_grad,
    flatten,
    forward_logits,
    forward_representation,
    init_params,
    param_delta,
    partition_slices,
    sgd_step,
    unflatten,
)
from .participation import ParticipationSchedule, markov_stationary
from .server import (
    AggregatorState,
    aggregate,
    baseline_aggregate,
    history_coefficient,
    update_weights,
)
