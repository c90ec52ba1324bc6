"""Independent oracles shared by the unit tests and the acceptance suite."""

import math

import numpy as np

from dflfs.nn_core import Classifier, Layer, ModelParams, init_params


def reference_loss(params: ModelParams, x, y) -> float:
    h = np.array(x, dtype=np.float64)
    n = len(params.extractor_layers)
    for i, (w, b) in enumerate(params.extractor_layers):
        h = h @ w.T + b
        if i < n - 1 and params.activation == "relu":
            h = np.where(h > 0, h, 0.0)
    logits = h @ params.classifier.weight.T + params.classifier.bias
    total = 0.0
    for row, label in zip(logits, y):
        m = max(row)
        total += m + math.log(sum(math.exp(v - m) for v in row)) - row[label]
    return total / len(y)


def finite_difference(params: ModelParams, x, y, eps=1e-4) -> list[np.ndarray]:
    arrays = [a.copy() for a in params.arrays()]

    def rebuild(arrs):
        layers = tuple(Layer(arrs[2 * i], arrs[2 * i + 1]) for i in range(len(params.extractor_layers)))
        return ModelParams(layers, Classifier(arrs[-2], arrs[-1]), params.activation)

    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            up = reference_loss(rebuild(arrays), x, y)
            a[idx] = old - eps
            down = reference_loss(rebuild(arrays), x, y)
            a[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-7)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_instance(seed):
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(1, 11))
    depth = int(rng.integers(0, 3))
    dims = [d_in] + [int(rng.integers(1, 7)) for _ in range(depth)] + [int(rng.integers(1, 4))]
    c = int(rng.integers(2, 6))
    b = int(rng.integers(1, 9))
    params = init_params(dims, c, seed)
    # nonzero biases so the check is not limited to the initial state
    params = ModelParams(
        tuple(Layer(w, rng.normal(0, 0.3, len(bias))) for w, bias in params.extractor_layers),
        Classifier(params.classifier.weight, rng.normal(0, 0.3, c)),
    )
    return params, rng.normal(size=(b, d_in)), rng.integers(0, c, size=b)


def brute_force_moments(samples):
    """Mean and unbiased covariance of the concatenated raw samples."""
    allx = np.concatenate(samples)
    return allx.mean(axis=0), np.cov(allx, rowvar=False, ddof=1).reshape(allx.shape[1], -1)
