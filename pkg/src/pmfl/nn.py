"""Dense feedforward model split into encoder, projection and classifier blocks.

The representation fed to the contrastive loss is the projection output
``z = projection(encoder(x))``; the classifier maps ``z`` to logits.  The three
blocks are disjoint parameter sets and their flattened layout is contiguous, so
block-level comparisons and whole-model vector arithmetic are both cheap.

All arithmetic is float64.  Rectifier activations follow every layer except the
final classifier layer, whose raw outputs are the logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

BLOCKS = ("encoder", "projection", "classifier")


class Layer(NamedTuple):
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)


def _as_layer(weight, bias) -> Layer:
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
        raise ValueError(f"bad layer shapes: weight {w.shape}, bias {b.shape}")
    return Layer(w, b)


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths for the three blocks.

    ``encoder`` and ``projection`` may be empty (the representation then falls
    back to the previous block's output); the classifier needs at least one
    layer and its last width is the number of classes.
    """

    input_dim: int
    encoder: tuple[int, ...]
    projection: tuple[int, ...]
    classifier: tuple[int, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.classifier) < 1:
            raise ValueError("classifier needs at least one layer")
        for block in BLOCKS:
            if any(int(w) < 1 for w in getattr(self, block)):
                raise ValueError(f"{block} widths must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.classifier[-1]

    @property
    def representation_dim(self) -> int:
        for dims in (self.projection, self.encoder):
            if dims:
                return dims[-1]
        return self.input_dim

    def block_shapes(self, block: str) -> list[tuple[int, int]]:
        """(fan_out, fan_in) pairs for every layer of ``block``."""
        fan_in = self.input_dim
        for name in BLOCKS:
            shapes = []
            for width in getattr(self, name):
                shapes.append((int(width), fan_in))
                fan_in = int(width)
            if name == block:
                return shapes
        raise ValueError(f"unknown block {block!r}")

    @property
    def num_params(self) -> int:
        return sum(
            out * fin + out for b in BLOCKS for out, fin in self.block_shapes(b)
        )


@dataclass
class ModelParams:
    """Concrete weights for one model; see :class:`ModelSpec` for the layout."""

    encoder: list[Layer]
    projection: list[Layer]
    classifier: list[Layer]

    def spec(self) -> ModelSpec:
        if not self.classifier:
            raise ValueError("classifier block is empty")
        first = (self.encoder + self.projection + self.classifier)[0]
        return ModelSpec(
            input_dim=first.weight.shape[1],
            encoder=tuple(l.weight.shape[0] for l in self.encoder),
            projection=tuple(l.weight.shape[0] for l in self.projection),
            classifier=tuple(l.weight.shape[0] for l in self.classifier),
        )

    def layers(self) -> list[Layer]:
        return self.encoder + self.projection + self.classifier

    @property
    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers())

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=[Layer(l.weight.copy(), l.bias.copy()) for l in self.encoder],
            projection=[Layer(l.weight.copy(), l.bias.copy()) for l in self.projection],
            classifier=[Layer(l.weight.copy(), l.bias.copy()) for l in self.classifier],
        )


@dataclass
class Gradient:
    """Loss gradient, shape-congruent with :class:`ModelParams`."""

    encoder: list[Layer]
    projection: list[Layer]
    classifier: list[Layer]

    loss: float = 0.0

    def layers(self) -> list[Layer]:
        return self.encoder + self.projection + self.classifier


@dataclass
class Minibatch:
    """A batch of rows: ``features`` (batch, input_dim), integer ``labels``."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D (batch, input_dim)")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must be 1-D and match the batch size")
        if self.features.shape[0] < 1:
            raise ValueError("batch must hold at least one row")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform [-s, s] weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    blocks = {}
    for block in BLOCKS:
        layers = []
        for fan_out, fan_in in spec.block_shapes(block):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-s, s, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out)))
        blocks[block] = layers
    return ModelParams(**blocks)


def flatten(obj: ModelParams | Gradient) -> np.ndarray:
    """Concatenate every weight matrix and bias vector into one float64 vector.

    Layout: encoder, projection, classifier; within a layer the weight comes
    before the bias.  Exact inverse of :func:`unflatten`.
    """
    parts: list[np.ndarray] = []
    for layer in obj.layers():
        parts.append(layer.weight.ravel())
        parts.append(layer.bias.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(spec: ModelSpec, flat: np.ndarray) -> ModelParams:
    """Rebuild structured parameters from a flat vector (see :func:`flatten`)."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.shape[0] != spec.num_params:
        raise ValueError(
            f"flat vector has {flat.shape} entries, spec needs {spec.num_params}"
        )
    pos = 0
    blocks = {}
    for block in BLOCKS:
        layers = []
        for fan_out, fan_in in spec.block_shapes(block):
            w = flat[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in).copy()
            pos += fan_out * fan_in
            b = flat[pos : pos + fan_out].copy()
            pos += fan_out
            layers.append(Layer(w, b))
        blocks[block] = layers
    return ModelParams(**blocks)


def partition_slices(spec: ModelSpec) -> dict[str, slice]:
    """Index ranges of each block inside the flat layout; disjoint and covering."""
    out = {}
    pos = 0
    for block in BLOCKS:
        size = sum(o * i + o for o, i in spec.block_shapes(block))
        out[block] = slice(pos, pos + size)
        pos += size
    return out


def _atleast_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError("x must be a feature vector or a (batch, input_dim) matrix")


def _forward_cached(params: ModelParams, X: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    layers = params.layers()
    n_rep = len(params.encoder) + len(params.projection)
    h = X
    inputs, pres = [], []
    z = X
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        pre = h @ w.T + b
        pres.append(pre)
        h = pre if i == len(layers) - 1 else np.maximum(pre, 0.0)
        if i == n_rep - 1:
            z = h
    return h, z, inputs, pres


def _backward_cached(
    params: ModelParams,
    inputs: list[np.ndarray],
    pres: list[np.ndarray],
    dlogits: np.ndarray,
    dz_extra: np.ndarray | None = None,
) -> list[Layer]:
    """Backprop from logit gradients (plus an optional representation gradient).

    ``dz_extra`` is added where the representation leaves the projection block,
    which is how a loss term that reads ``z`` directly joins the chain.
    """
    layers = params.layers()
    n_rep = len(params.encoder) + len(params.projection)
    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    d = dlogits
    for i in range(len(layers) - 1, -1, -1):
        if dz_extra is not None and i == n_rep - 1:
            d = d + dz_extra
        dpre = d if i == len(layers) - 1 else d * (pres[i] > 0.0)
        grads[i] = Layer(dpre.T @ inputs[i], dpre.sum(axis=0))
        d = dpre @ layers[i].weight
    return grads


def _split_layer_grads(params: ModelParams, grads: list[Layer], loss: float) -> Gradient:
    ne, np_ = len(params.encoder), len(params.projection)
    return Gradient(
        encoder=grads[:ne],
        projection=grads[ne : ne + np_],
        classifier=grads[ne + np_ :],
        loss=float(loss),
    )


def forward_representation(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Representation z = projection(encoder(x)); accepts a vector or a batch."""
    X, single = _atleast_batch(x)
    _, z, _, _ = _forward_cached(params, X)
    return z[0] if single else z


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class logits for a feature vector or a batch of rows."""
    X, single = _atleast_batch(x)
    logits, _, _, _ = _forward_cached(params, X)
    return logits[0] if single else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _check_labels(labels, logits.shape[-1])
    lp = log_softmax(logits)
    return float(-lp[np.arange(labels.shape[0]), labels].mean())


def cross_entropy_and_grad(params: ModelParams, batch: Minibatch) -> tuple[float, Gradient]:
    """Mean cross-entropy over the batch and its gradient in all three blocks."""
    logits, _, inputs, pres = _forward_cached(params, batch.features)
    _check_labels(batch.labels, logits.shape[-1])
    n = batch.labels.shape[0]
    lp = log_softmax(logits)
    loss = float(-lp[np.arange(n), batch.labels].mean())
    dlogits = np.exp(lp)
    dlogits[np.arange(n), batch.labels] -= 1.0
    dlogits /= n
    grads = _backward_cached(params, inputs, pres, dlogits)
    return loss, _split_layer_grads(params, grads, loss)


def sgd_step(params: ModelParams, grad: Gradient, lr: float) -> ModelParams:
    """One descent step ``p - lr * g``; returns fresh parameters."""
    blocks = {}
    for block in BLOCKS:
        blocks[block] = [
            Layer(p.weight - lr * g.weight, p.bias - lr * g.bias)
            for p, g in zip(getattr(params, block), getattr(grad, block))
        ]
    return ModelParams(**blocks)


def param_delta(after: ModelParams, before: ModelParams) -> np.ndarray:
    """Flat update vector ``after - before``."""
    return flatten(after) - flatten(before)


def zeros_like_flat(params: ModelParams) -> np.ndarray:
    return np.zeros(params.num_params)
