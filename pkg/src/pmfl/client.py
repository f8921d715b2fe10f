"""Node-side state and the local training loop.

A participating node copies the broadcast global model, runs a fixed number of
one-minibatch gradient steps on the combined objective, and ships back the
flat difference between its final and initial parameters.  After every
iteration the pre-step model is snapshotted into the node's sliding buffer, so
the buffer always holds the models *preceding* the one currently training;
those snapshots feed the contrastive term, both this round and in later rounds
the node attends.

The partition threshold reference is frozen at round start (the newest buffer
entry from before this round), so mid-round snapshots do not move the goalposts
within the round.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .contrastive import LocalBuffer, combined_loss_and_grad
from .nn import Minibatch, ModelParams, param_delta, sgd_step
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class LocalTrainConfig:
    """Knobs the local loop needs; a slice of the experiment config."""

    local_iterations: int = 5
    local_lr: float = 0.1
    batch_size: int = 32
    temperature: float = 0.5
    contrastive_weight: float = 0.5

    def __post_init__(self):
        if self.local_iterations < 0:
            raise ValueError("local_iterations must be >= 0")
        if self.local_lr <= 0:
            raise ValueError("local_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be >= 0")


@dataclass
class NodeState:
    """One federated node: its shard, snapshot buffer and stream identity."""

    node_id: int
    features: np.ndarray
    labels: np.ndarray
    buffer: LocalBuffer
    root_seed: int
    last_participation_round: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        # shards are fixed for the whole run
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    def round_rng(self, round_idx: int) -> np.random.Generator:
        return stream(self.root_seed, "train", self.node_id, round_idx)


def _epoch_batches(rng: np.random.Generator, n: int, batch_size: int, count: int):
    """``count`` index batches, without replacement inside each shuffled epoch.

    The tail of an epoch yields a short batch; the next draw reshuffles.
    """
    order = rng.permutation(n)
    pos = 0
    for _ in range(count):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        take = min(batch_size, n - pos)
        yield order[pos : pos + take]
        pos += take


def local_train(
    node: NodeState,
    global_params: ModelParams,
    cfg: LocalTrainConfig,
    round_idx: int,
) -> np.ndarray:
    """Run the node's local iterations and return its flat update vector.

    An empty shard is skipped with a logged error and contributes a zero
    update, the same as sitting the round out.
    """
    if node.num_samples == 0:
        log.error("node %d has an empty shard, skipping round %d", node.node_id, round_idx)
        return np.zeros(global_params.num_params)

    rng = node.round_rng(round_idx)
    batches = _epoch_batches(
        rng, node.num_samples, cfg.batch_size, cfg.local_iterations
    )
    mu_reference = node.buffer.newest()
    w = global_params.copy()
    for batch_idx in batches:
        batch = Minibatch(node.features[batch_idx], node.labels[batch_idx])
        _, grad = combined_loss_and_grad(
            w,
            batch,
            global_params,
            node.buffer,
            temperature=cfg.temperature,
            contrastive_weight=cfg.contrastive_weight,
            mu_reference=mu_reference,
        )
        node.buffer.push(w)  # the buffer holds models older than the current one
        w = sgd_step(w, grad, cfg.local_lr)
    node.last_participation_round = round_idx
    return param_delta(w, global_params)


def nonparticipant_update(num_params: int) -> np.ndarray:
    """Zero update standing in for a node that sat the round out."""
    return np.zeros(num_params)
