"""Classifier calibration on federated features regenerated from pooled Gaussians."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .feature_stats import GlobalClassStats
from .nn_core import ModelParams, init_classifier, retrain_classifier_step, with_classifier

STRATEGIES = ("balanced", "re_sample", "weighted_cov")
JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)
FULL_BATCH_LIMIT = 4096
MINIBATCH = 256


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassOrder:
    """``index_of_class[c]`` is the sequence index of class ``c`` (0 = head)."""

    index_of_class: np.ndarray

    def __len__(self) -> int:
        return len(self.index_of_class)


@dataclass(frozen=True)
class CalibrationPlan:
    strategy: str = "re_sample"
    n_b: int = 500
    n_k: int = 150
    w_b: float = 0.5
    w_k: float = 0.1
    retrain_epochs: int = 100
    retrain_lr: float = 0.01

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n_b < 1 or self.n_k < 0 or self.w_b <= 0 or self.w_k < 0:
            raise ValueError("need n_b >= 1, n_k >= 0, w_b > 0, w_k >= 0")
        if self.retrain_epochs < 0 or self.retrain_lr < 0:
            raise ValueError("retrain_epochs and retrain_lr must be non-negative")


@dataclass(frozen=True)
class FederatedFeatures:
    features: np.ndarray
    labels: np.ndarray
    skipped: tuple[int, ...]  # classes with no pooled statistics


def class_order(estimated_counts: Sequence[float]) -> ClassOrder:
    """Stable descending sort by count: the rarer the class, the larger its index."""
    counts = np.asarray(estimated_counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 1:
        raise ValueError("need at least one class count")
    ranked = np.argsort(-counts, kind="stable")
    index = np.empty(len(counts), dtype=np.int64)
    index[ranked] = np.arange(len(counts))
    return ClassOrder(index)


def rs_counts(plan: CalibrationPlan, order: ClassOrder) -> np.ndarray:
    """Samples per class for re-sampling: n_b + n_k * index."""
    return plan.n_b + plan.n_k * order.index_of_class


def wc_weights(plan: CalibrationPlan, order: ClassOrder) -> np.ndarray:
    """Covariance multiplier per class: w_b + w_k * index."""
    return plan.w_b + plan.w_k * order.index_of_class.astype(np.float64)


def planned_counts(plan: CalibrationPlan, order: ClassOrder) -> np.ndarray:
    if plan.strategy == "re_sample":
        return rs_counts(plan, order)
    return np.full(len(order), plan.n_b, dtype=np.int64)


def sample_gaussian(mean: np.ndarray, cov: np.ndarray, n: int, seed) -> np.ndarray:
    """Draw ``n`` rows from N(mean, cov) through a jittered Cholesky factor.

    The smallest jitter on the ladder 0, 1e-8, 1e-6, 1e-4, 1e-2 that makes
    ``cov + jitter * I`` factorizable is used.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = len(mean)
    if n < 0:
        raise ValueError("n must be non-negative")
    if cov.shape != (d, d) or not np.allclose(cov, cov.T, atol=1e-9):
        raise ValueError("covariance must be a symmetric d x d matrix")
    for eps in JITTER_LADDER:
        try:
            chol = np.linalg.cholesky(cov + eps * np.eye(d))
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise CalibrationError("covariance not factorizable even with jitter 1e-2")
    rng = np.random.default_rng(seed)
    return mean + rng.standard_normal((n, d)) @ chol.T


def build_federated_features(
    stats: GlobalClassStats, plan: CalibrationPlan, order: ClassOrder, seed: int
) -> FederatedFeatures:
    counts = planned_counts(plan, order)
    scale = wc_weights(plan, order) if plan.strategy == "weighted_cov" else np.ones(len(order))
    feats, labels, skipped = [], [], []
    for c in range(stats.num_classes):
        if not stats.covered[c]:
            skipped.append(c)
            continue
        z = sample_gaussian(stats.means[c], scale[c] * stats.covs[c], int(counts[c]), [seed, c])
        feats.append(z)
        labels.append(np.full(len(z), c, dtype=np.int64))
    if not feats:
        raise CalibrationError("no class has pooled statistics")
    return FederatedFeatures(np.concatenate(feats), np.concatenate(labels), tuple(skipped))


def calibrate(
    global_model: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    plan: CalibrationPlan,
    seed: int,
) -> ModelParams:
    """Train a fresh classifier on federated features and swap it into the model."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != global_model.d_feat:
        raise ValueError(f"features must have width {global_model.d_feat}")
    classifier = init_classifier(global_model.d_feat, global_model.num_classes, seed)
    rng = np.random.default_rng([seed, 5])
    n = len(labels)
    for _ in range(plan.retrain_epochs):
        if n <= FULL_BATCH_LIMIT:
            classifier, _ = retrain_classifier_step(classifier, features, labels, plan.retrain_lr)
            continue
        perm = rng.permutation(n)
        for start in range(0, n, MINIBATCH):
            idx = perm[start : start + MINIBATCH]
            classifier, _ = retrain_classifier_step(classifier, features[idx], labels[idx], plan.retrain_lr)
    return with_classifier(global_model, classifier)


def write_features_csv(ff: FederatedFeatures, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{i}" for i in range(ff.features.shape[1])] + ["label"])
        for row, y in zip(ff.features, ff.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])
