"""Small dense network: MLP feature extractor plus a linear classifier head.

Weights are stored as (out, in) matrices so a layer computes ``x @ W.T + b``.
Activation is applied between extractor layers, not after the last one, so
the extractor output (the feature vector) is unconstrained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


class DivergenceError(ArithmeticError):
    """Raised when a training loss becomes non-finite."""


class Layer(NamedTuple):
    weight: np.ndarray
    bias: np.ndarray


class Classifier(NamedTuple):
    weight: np.ndarray  # (C, d_feat)
    bias: np.ndarray  # (C,)


@dataclass(frozen=True)
class ModelParams:
    extractor_layers: tuple[Layer, ...]
    classifier: Classifier
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for prev, nxt in zip(self.extractor_layers, self.extractor_layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("extractor layer dimensions are not chain-compatible")
        w, b = self.classifier
        if w.shape != (b.shape[0], self.d_feat):
            raise ValueError(
                f"classifier weight {w.shape} does not match d_feat={self.d_feat}, C={b.shape[0]}"
            )

    @property
    def num_classes(self) -> int:
        return self.classifier.bias.shape[0]

    @property
    def d_feat(self) -> int:
        if self.extractor_layers:
            return self.extractor_layers[-1].weight.shape[0]
        return self.classifier.weight.shape[1]

    @property
    def d_in(self) -> int:
        if self.extractor_layers:
            return self.extractor_layers[0].weight.shape[1]
        return self.d_feat

    @property
    def layer_dims(self) -> list[int]:
        return [self.d_in] + [layer.weight.shape[0] for layer in self.extractor_layers]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (extractor layers, then classifier)."""
        out = []
        for layer in self.extractor_layers:
            out.extend(layer)
        out.extend(self.classifier)
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != len(self.labels):
            raise ValueError("inputs rows must equal label count")


def _he_matrix(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


def init_classifier(d_feat: int, num_classes: int, seed: int) -> Classifier:
    if d_feat < 1 or num_classes < 1:
        raise ValueError("d_feat and num_classes must be positive")
    rng = np.random.default_rng([seed, 1])
    return Classifier(_he_matrix(rng, num_classes, d_feat), np.zeros(num_classes))


def init_params(
    layer_dims: Sequence[int], num_classes: int, seed: int, activation: str = "relu"
) -> ModelParams:
    """He-initialised extractor over ``layer_dims`` (input dim first, d_feat last)."""
    dims = [int(d) for d in layer_dims]
    if not dims:
        raise ValueError("layer_dims must be non-empty")
    if any(d < 1 for d in dims) or num_classes < 1:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng([seed, 0])
    layers = tuple(
        Layer(_he_matrix(rng, d_out, d_in), np.zeros(d_out))
        for d_in, d_out in zip(dims, dims[1:])
    )
    return ModelParams(layers, init_classifier(dims[-1], num_classes, seed), activation)


def _act(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if params.activation == "relu" else x


def _extract(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError(f"expected inputs of width {params.d_in}, got shape {x.shape}")
    # cache holds the input to each layer, then the last pre-activation
    cache = [x]
    n = len(params.extractor_layers)
    for i, (w, b) in enumerate(params.extractor_layers):
        z = x @ w.T + b
        x = _act(params, z) if i < n - 1 else z
        cache.append(z)
    return x, cache


def extract(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    return _extract(params, inputs)[0]


def forward(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = extract(params, inputs)
    w, b = params.classifier
    return features, features @ w.T + b


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(labels)), labels]))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels out of range")
    return labels


def _dlogits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def classifier_gradients(
    classifier: Classifier, features: np.ndarray, labels: np.ndarray
) -> tuple[float, Classifier, np.ndarray]:
    """Loss, classifier gradient and gradient w.r.t. the features."""
    w, b = classifier
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != w.shape[1]:
        raise ValueError(f"features must have width {w.shape[1]}")
    labels = _check_labels(labels, w.shape[0])
    logits = features @ w.T + b
    loss = cross_entropy(logits, labels)
    g = _dlogits(logits, labels)
    return loss, Classifier(g.T @ features, g.sum(axis=0)), g @ w


def gradients(params: ModelParams, batch: Batch) -> tuple[float, ModelParams]:
    """Mean cross-entropy and its gradient for every parameter, by backprop."""
    features, cache = _extract(params, batch.inputs)
    loss, cls_grad, g = classifier_gradients(params.classifier, features, batch.labels)
    layer_grads = []
    n = len(params.extractor_layers)
    for i in range(n - 1, -1, -1):
        w, _ = params.extractor_layers[i]
        z = cache[i + 1]
        if i < n - 1 and params.activation == "relu":
            g = g * (z > 0)
        x_in = cache[0] if i == 0 else _act(params, cache[i])
        layer_grads.append(Layer(g.T @ x_in, g.sum(axis=0)))
        g = g @ w
    return loss, ModelParams(tuple(reversed(layer_grads)), cls_grad, params.activation)


def _raise_if_diverged(loss: float) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")


def train_step(params: ModelParams, batch: Batch, lr: float) -> tuple[ModelParams, float]:
    """One plain SGD step; returns the new parameters and the pre-step loss."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    loss, grad = gradients(params, batch)
    _raise_if_diverged(loss)
    layers = tuple(
        Layer(w - lr * gw, b - lr * gb)
        for (w, b), (gw, gb) in zip(params.extractor_layers, grad.extractor_layers)
    )
    w, b = params.classifier
    gw, gb = grad.classifier
    return ModelParams(layers, Classifier(w - lr * gw, b - lr * gb), params.activation), loss


def retrain_classifier_step(
    classifier: Classifier, features: np.ndarray, labels: np.ndarray, lr: float
) -> tuple[Classifier, float]:
    """SGD step on the classifier alone, features held fixed."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    loss, grad, _ = classifier_gradients(classifier, features, labels)
    _raise_if_diverged(loss)
    return Classifier(classifier.weight - lr * grad.weight, classifier.bias - lr * grad.bias), loss


def with_classifier(params: ModelParams, classifier: Classifier) -> ModelParams:
    return replace(params, classifier=classifier)


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    return forward(params, inputs)[1].argmax(axis=1)


def params_to_dict(params: ModelParams) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": params.layer_dims,
        "num_classes": params.num_classes,
        "d_feat": params.d_feat,
        "activation": params.activation,
        "extractor": [
            {"weight": w.tolist(), "bias": b.tolist()} for w, b in params.extractor_layers
        ],
        "classifier": {
            "weight": params.classifier.weight.tolist(),
            "bias": params.classifier.bias.tolist(),
        },
    }


def params_from_dict(data: dict) -> ModelParams:
    if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {data.get('format_version')!r}")
    d_feat = int(data["d_feat"])
    layers = tuple(
        Layer(
            np.asarray(layer["weight"], dtype=np.float64).reshape(len(layer["bias"]), -1),
            np.asarray(layer["bias"], dtype=np.float64),
        )
        for layer in data["extractor"]
    )
    cls = Classifier(
        np.asarray(data["classifier"]["weight"], dtype=np.float64).reshape(-1, d_feat),
        np.asarray(data["classifier"]["bias"], dtype=np.float64),
    )
    params = ModelParams(layers, cls, data.get("activation", "relu"))
    if params.layer_dims != list(data["layer_dims"]) or params.num_classes != data["num_classes"]:
        raise ValueError("checkpoint header does not match the stored arrays")
    return params


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
