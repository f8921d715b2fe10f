"""Server-side aggregation: interval-based weights and historical smoothing.

Every node carries a weight equal to the running mean of the gaps between its
weight-update events.  An event is a participation, or hitting the cutoff
``C`` rounds of silence; rare nodes therefore get proportionally larger
weights, which undoes the bias of uneven attendance.  The weighted update sum
moves the global model, and the result is blended with the last few global
models under a coefficient that decays linearly from 1/2 to 0 across the run.

Two update-application modes exist.  ``corrected`` adds the weighted sum
scaled by 1/K, which makes the scheme reduce exactly to plain averaging when
everyone attends with weight one.  ``literal`` subtracts the raw weighted sum,
reproducing the published recursion verbatim for fidelity experiments; with
updates defined as (local - global) the subtraction walks away from the local
optima, so it is not the default.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .nn import ModelParams, flatten, unflatten

log = logging.getLogger(__name__)

AGGREGATION_MODES = ("corrected", "literal")
BASELINE_KINDS = ("uniform_average", "cached_update", "awc_only")


def history_coefficient(round_idx: int, horizon: int) -> float:
    """Mixing weight of the historical term: 1/2 - t / (2 (T - 1)).

    Exactly 0.5 at the first round, exactly 0 at the last, strictly
    decreasing in between.
    """
    if horizon < 2:
        raise ValueError("history_coefficient needs a horizon of at least 2 rounds")
    if not 0 <= round_idx < horizon:
        raise ValueError(f"round_idx {round_idx} outside [0, {horizon})")
    return 0.5 - round_idx / (2.0 * (horizon - 1))


@dataclass
class AggregatorState:
    """Mutable server state for one run."""

    num_nodes: int
    global_model: ModelParams
    horizon: int
    cutoff: int | None = 50  # None means no cutoff
    history_size: int = 3  # buffered global models, current one included
    global_lr: float = 1.0
    round_idx: int = 0
    rounds_waiting: np.ndarray = field(init=False)  # per node, since last event
    event_counts: np.ndarray = field(init=False)  # recorded intervals so far
    weights: np.ndarray = field(init=False)  # running mean interval length
    history: deque = field(init=False)  # globals strictly older than current
    cached_updates: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.cutoff is not None and self.cutoff < 1:
            raise ValueError("cutoff must be >= 1 (or None for no cutoff)")
        if self.history_size < 0:
            raise ValueError("history_size must be >= 0")
        if self.history_size > 1 and self.horizon < 2:
            raise ValueError(
                "history smoothing needs horizon >= 2 (the mixing coefficient "
                "is undefined for shorter runs)"
            )
        if self.global_lr <= 0:
            raise ValueError("global_lr must be > 0")
        self.rounds_waiting = np.zeros(self.num_nodes, dtype=np.int64)
        self.event_counts = np.zeros(self.num_nodes, dtype=np.int64)
        self.weights = np.ones(self.num_nodes)
        self.history = deque(maxlen=max(self.history_size - 1, 0))

    @property
    def num_params(self) -> int:
        return self.global_model.num_params


def update_weights(state: AggregatorState, indicators: np.ndarray) -> None:
    """Advance every node's interval bookkeeping for the current round.

    A node's waiting counter grows each round; participation or hitting the
    cutoff closes the interval and folds its length into the node's running
    mean.  Weights of untouched nodes are left as they are.
    """
    a = np.asarray(indicators)
    if a.shape != (state.num_nodes,):
        raise ValueError(f"indicators must have shape ({state.num_nodes},)")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("indicators must be 0/1")

    state.rounds_waiting += 1
    event = a == 1
    if state.cutoff is not None:
        event = event | (state.rounds_waiting == state.cutoff)
    closed = state.rounds_waiting[event].astype(np.float64)
    first = state.event_counts[event] == 0
    seen = state.event_counts[event].astype(np.float64)
    prev = state.weights[event]
    state.weights[event] = np.where(
        first, closed, (seen * prev + closed) / (seen + 1.0)
    )
    state.event_counts[event] += 1
    state.rounds_waiting[event] = 0


def _stack_updates(state: AggregatorState, updates: dict[int, np.ndarray]) -> np.ndarray:
    """Updates as a (num_nodes, dim) matrix in node-id order."""
    if sorted(updates) != list(range(state.num_nodes)):
        raise ValueError("updates must contain every node id exactly once")
    dim = state.num_params
    rows = []
    for k in range(state.num_nodes):
        u = np.asarray(updates[k], dtype=np.float64)
        if u.shape != (dim,):
            raise ValueError(f"update for node {k} has shape {u.shape}, want ({dim},)")
        rows.append(u)
    return np.stack(rows)


def _advance(state: AggregatorState, new_flat: np.ndarray) -> ModelParams:
    """Adopt the new global model, sliding the old one into the history."""
    new_global = unflatten(state.global_model.spec(), new_flat)
    if state.history.maxlen:
        state.history.append(state.global_model)
    state.global_model = new_global
    state.round_idx += 1
    return new_global


def _smooth(state: AggregatorState, candidate: np.ndarray) -> np.ndarray:
    """Blend the candidate with the mean of the buffered older globals."""
    if state.history_size <= 1 or len(state.history) == 0:
        return candidate
    psi = history_coefficient(state.round_idx, state.horizon)
    hist = np.stack([flatten(m) for m in state.history])
    return (1.0 - psi) * candidate + psi * hist.mean(axis=0)


def aggregate(
    state: AggregatorState,
    updates: dict[int, np.ndarray],
    mode: str = "corrected",
    weights_override: np.ndarray | None = None,
) -> ModelParams:
    """One full aggregation round; returns (and installs) the next global model.

    ``weights_override`` replaces the adaptive weights (the all-ones vector
    gives the no-reweighting ablation).  Non-participants must appear in
    ``updates`` with zero vectors; they contribute nothing.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {mode!r}")
    u = _stack_updates(state, updates)
    w = state.weights if weights_override is None else np.asarray(weights_override)
    if w.shape != (state.num_nodes,):
        raise ValueError("weights must have one entry per node")
    weighted = w @ u
    base = flatten(state.global_model)
    if mode == "corrected":
        candidate = base + (state.global_lr / state.num_nodes) * weighted
    else:
        candidate = base - state.global_lr * weighted
    return _advance(state, _smooth(state, candidate))


def baseline_aggregate(
    kind: str,
    state: AggregatorState,
    updates: dict[int, np.ndarray],
    indicators: np.ndarray,
    mode: str = "corrected",
) -> ModelParams:
    """Reference aggregators the full scheme is compared against.

    ``uniform_average``: mean of the participants' updates, no reweighting, no
    smoothing.  ``cached_update``: every node's most recent update (zero until
    it first participates) averaged over all nodes each round.  ``awc_only``:
    adaptive weights without the historical smoothing.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"kind must be one of {BASELINE_KINDS}, got {kind!r}")
    a = np.asarray(indicators)
    if a.shape != (state.num_nodes,):
        raise ValueError(f"indicators must have shape ({state.num_nodes},)")
    u = _stack_updates(state, updates)
    base = flatten(state.global_model)

    if kind == "uniform_average":
        part = np.flatnonzero(a == 1)
        if part.size == 0:
            return _advance(state, base.copy())
        weighted = np.ones(part.size) @ u[part]
        candidate = base + (state.global_lr / part.size) * weighted
        return _advance(state, candidate)

    if kind == "cached_update":
        if state.cached_updates is None:
            state.cached_updates = np.zeros((state.num_nodes, state.num_params))
        part = np.flatnonzero(a == 1)
        state.cached_updates[part] = u[part]
        weighted = np.ones(state.num_nodes) @ state.cached_updates
        candidate = base + (state.global_lr / state.num_nodes) * weighted
        return _advance(state, candidate)

    # awc_only: adaptive weights, smoothing disabled
    weighted = state.weights @ u
    if mode == "corrected":
        candidate = base + (state.global_lr / state.num_nodes) * weighted
    elif mode == "literal":
        candidate = base - state.global_lr * weighted
    else:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}, got {mode!r}")
    return _advance(state, candidate)
