"""Dense MLP core: flat parameter vectors, forward/backward, SGD with momentum.

Models are plain float64 vectors plus shape metadata, so aggregation, control
variates and gradient checks can treat a network as ordinary linear algebra.
Hidden layers use ReLU, the output layer is linear (logits), and the loss is
softmax cross-entropy. All functions here are pure: inputs are never mutated
and identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError


def _shape_size(shape) -> int:
    return shape[0] * shape[1] if isinstance(shape, tuple) else int(shape)


@dataclass(frozen=True)
class MlpArch:
    """Layer widths of a fully connected ReLU net, input through output."""

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError(f"architecture needs at least [in, out], got {list(dims)}")
        if any(d < 1 for d in dims):
            raise ConfigError(f"layer dims must all be >= 1, got {list(dims)}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_shapes(self) -> tuple:
        """Interleaved (rows, cols) weight shapes and int bias lengths."""
        shapes = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append(fan_out)
        return tuple(shapes)

    def n_params(self) -> int:
        return sum(_shape_size(s) for s in self.param_shapes())


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus the layer shapes packed into it.

    ``shapes`` holds (rows, cols) tuples for weight matrices and plain ints
    for bias lengths. The backing array is copied on construction and frozen
    read-only, so vectors can be shared freely across threads. Construction
    rejects non-finite entries.
    """

    values: np.ndarray
    shapes: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        shapes = tuple(
            (int(s[0]), int(s[1])) if isinstance(s, (tuple, list)) else int(s)
            for s in self.shapes
        )
        expected = sum(_shape_size(s) for s in shapes)
        if values.size != expected:
            raise ShapeError(
                f"flat length {values.size} does not match shapes total {expected}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("parameter vector contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", shapes)

    def __len__(self) -> int:
        return self.values.size

    def split(self) -> list[np.ndarray]:
        """Read-only views of the flat vector, reshaped per layer."""
        out, offset = [], 0
        for shape in self.shapes:
            size = _shape_size(shape)
            chunk = self.values[offset : offset + size]
            out.append(chunk.reshape(shape) if isinstance(shape, tuple) else chunk)
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    @staticmethod
    def zeros(shapes) -> "ParamVector":
        total = sum(_shape_size(s) for s in shapes)
        return ParamVector(np.zeros(total), shapes)


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector.zeros(params.shapes)


@dataclass(frozen=True)
class Batch:
    """A minibatch: (m, d) feature matrix and m integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise ShapeError(f"batch features must be 2-d, got shape {features.shape}")
        if features.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if features.shape[0] < 1:
            raise DataError("batch must contain at least one sample")
        if labels.size and labels.min() < 0:
            raise DataError("labels must be non-negative class ids")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]


def init_mlp(arch: MlpArch, seed: int) -> ParamVector:
    """Initialize weights uniformly in the Glorot range, biases at zero.

    Per layer the range is +-sqrt(6 / (fan_in + fan_out)). Deterministic for
    a given seed.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(arch.layer_dims[:-1], arch.layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).reshape(-1))
        parts.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(parts), arch.param_shapes())


def _check_model_inputs(params: ParamVector, arch: MlpArch, features: np.ndarray):
    if params.shapes != arch.param_shapes():
        raise ShapeError("parameter shapes do not match the architecture")
    if features.shape[1] != arch.in_dim:
        raise ShapeError(
            f"feature width {features.shape[1]} != architecture input {arch.in_dim}"
        )


def forward(params: ParamVector, arch: MlpArch, batch: Batch) -> np.ndarray:
    """Logits (m, out) for a batch; ReLU hidden layers, linear output."""
    _check_model_inputs(params, arch, batch.features)
    layers = params.split()
    a = batch.features
    for layer in range(arch.n_layers):
        weight, bias = layers[2 * layer], layers[2 * layer + 1]
        z = a @ weight + bias
        a = np.maximum(z, 0.0) if layer < arch.n_layers - 1 else z
    return a


def _log_softmax_terms(logits: np.ndarray):
    # Row max is subtracted before exponentiation so huge logits cannot overflow.
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return shifted, log_norm


def cross_entropy_loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy of logits against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"logits shape {logits.shape} incompatible with {labels.shape[0]} labels"
        )
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(
            f"label out of range [0, {logits.shape[1]}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    shifted, log_norm = _log_softmax_terms(logits)
    picked = shifted[np.arange(labels.shape[0]), labels]
    return float(np.mean(log_norm - picked))


def backward(
    params: ParamVector,
    arch: MlpArch,
    batch: Batch,
    prox_mu: float = 0.0,
    prox_anchor: ParamVector | None = None,
) -> tuple[float, ParamVector]:
    """Mean loss and its gradient, optionally with a proximal penalty.

    With prox_mu > 0 the objective gains (mu/2) * ||w - anchor||^2, whose
    gradient contribution is mu * (w - anchor). prox_mu == 0 takes a branch
    that never touches the anchor, so it is bit-identical to the plain loss.
    """
    if prox_mu < 0:
        raise ConfigError(f"prox_mu must be >= 0, got {prox_mu}")
    if prox_mu > 0:
        if prox_anchor is None:
            raise ShapeError("prox_mu > 0 requires a proximal anchor")
        if prox_anchor.shapes != params.shapes:
            raise ShapeError("proximal anchor shapes do not match parameters")
    _check_model_inputs(params, arch, batch.features)

    layers = params.split()
    m = batch.size
    activations = [batch.features]
    pre_acts = []
    a = batch.features
    for layer in range(arch.n_layers):
        weight, bias = layers[2 * layer], layers[2 * layer + 1]
        z = a @ weight + bias
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if layer < arch.n_layers - 1 else z
        activations.append(a)

    logits = activations[-1]
    loss = cross_entropy_loss(logits, batch.labels)

    shifted, log_norm = _log_softmax_terms(logits)
    delta = np.exp(shifted - log_norm[:, None])
    delta[np.arange(m), batch.labels] -= 1.0
    delta /= m

    grads: list[np.ndarray] = [np.empty(0)] * (2 * arch.n_layers)
    for layer in reversed(range(arch.n_layers)):
        weight = layers[2 * layer]
        grads[2 * layer] = (activations[layer].T @ delta).reshape(-1)
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weight.T) * (pre_acts[layer - 1] > 0.0)

    flat = np.concatenate(grads)
    if prox_mu > 0:
        diff = params.values - prox_anchor.values
        loss += 0.5 * prox_mu * float(diff @ diff)
        flat = flat + prox_mu * diff
    return loss, ParamVector(flat, params.shapes)


def sgd_momentum_step(
    params: ParamVector,
    grad: ParamVector,
    velocity: ParamVector,
    lr: float,
    momentum: float,
) -> tuple[ParamVector, ParamVector]:
    """One step of v' = momentum*v + g; w' = w - lr*v'."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    if not (np.isfinite(lr) and np.isfinite(momentum)):
        raise NumericError("non-finite learning rate or momentum")
    if grad.shapes != params.shapes or velocity.shapes != params.shapes:
        raise ShapeError("gradient/velocity shapes do not match parameters")
    new_velocity = momentum * velocity.values + grad.values
    new_params = params.values - lr * new_velocity
    return ParamVector(new_params, params.shapes), ParamVector(new_velocity, params.shapes)


def predict_accuracy(params: ParamVector, arch: MlpArch, dataset) -> float:
    """Top-1 accuracy on a dataset; argmax ties go to the lowest class id."""
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise DataError("cannot evaluate accuracy on an empty dataset")
    hits = 0
    chunk = 4096
    for start in range(0, features.shape[0], chunk):
        stop = min(start + chunk, features.shape[0])
        logits = forward(params, arch, Batch(features[start:stop], labels[start:stop]))
        # np.argmax returns the first maximum, i.e. the lowest class index.
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start:stop]))
    return hits / features.shape[0]


def finite_diff_grad(
    params: ParamVector, arch: MlpArch, batch: Batch, h: float
) -> ParamVector:
    """Central-difference gradient of the plain cross-entropy loss.

    Test oracle only: it evaluates the loss 2*len(params) times and never
    shares code with backward's chain rule.
    """
    if not h > 0:
        raise ConfigError(f"finite-difference step must be > 0, got {h}")
    base = params.values
    grad = np.empty(base.size)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        loss_plus = cross_entropy_loss(
            forward(ParamVector(plus, params.shapes), arch, batch), batch.labels
        )
        loss_minus = cross_entropy_loss(
            forward(ParamVector(minus, params.shapes), arch, batch), batch.labels
        )
        grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return ParamVector(grad, params.shapes)
