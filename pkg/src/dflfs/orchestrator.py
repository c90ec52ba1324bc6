"""Two-stage federated protocol: stage-1 feature learning, stage-2 classifier calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calibration import (
    CalibrationPlan,
    ClassOrder,
    FederatedFeatures,
    build_federated_features,
    calibrate,
    class_order,
)
from .data import ClientShard, LabeledDataset
from .feature_stats import (
    MASK_RADIUS_FACTOR,
    GlobalClassStats,
    MaskedStatsUpload,
    default_mask_radius,
    extract_features,
    local_class_stats,
    mask_stats,
    pool_global_stats,
    strip_presence,
)
from .mfsc import CoverageMatrix, StatsCache, estimate_coverage, select_clients, update_cache
from .nn_core import Batch, DivergenceError, Layer, ModelParams, Classifier, forward, init_params, train_step

log = logging.getLogger(__name__)

METHODS = ("fedavg", "ccvr", "dflfs_rs", "dflfs_wc")
SELECTIONS = ("random", "mfsc")
_METHOD_DEFAULTS = {
    "fedavg": ("random", None),
    "ccvr": ("random", "balanced"),
    "dflfs_rs": ("mfsc", "re_sample"),
    "dflfs_wc": ("mfsc", "weighted_cov"),
}

# RNG stream tags, so streams for different purposes never collide
_SELECT, _TRAIN, _MASK1, _MASK2, _CALIB, _INIT = range(6)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 100
    clients_per_round: int = 20
    rounds: int = 200
    local_epochs: int = 10
    local_lr: float = 0.1
    batch_size: int = 32
    method: str = "dflfs_rs"
    selection: str | None = None  # None: the method's default
    plan: CalibrationPlan = field(default_factory=CalibrationPlan)
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32,)
    d_feat: int = 2
    mad_threshold: float = 3.0
    explore_fraction: float = 0.5  # share of the MFSC budget filled at random
    mask_radius_factor: float = MASK_RADIUS_FACTOR

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.selection is not None and self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("need 1 <= clients_per_round <= num_clients")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        if not 0 <= self.explore_fraction <= 1:
            raise ValueError("explore_fraction must lie in [0, 1]")
        if self.mask_radius_factor <= 0:
            raise ValueError("mask_radius_factor must be positive")
        if self.local_lr < 0:
            raise ValueError("local_lr must be non-negative")

    @property
    def selection_rule(self) -> str:
        return self.selection or _METHOD_DEFAULTS[self.method][0]

    @property
    def random_slots(self) -> int:
        return int(self.clients_per_round * self.explore_fraction)

    @property
    def calibration_plan(self) -> CalibrationPlan | None:
        """The plan stage 2 runs with, or None when the method skips stage 2."""
        strategy = _METHOD_DEFAULTS[self.method][1]
        if strategy is None:
            return None
        return CalibrationPlan(strategy, self.plan.n_b, self.plan.n_k, self.plan.w_b,
                               self.plan.w_k, self.plan.retrain_epochs, self.plan.retrain_lr)


@dataclass
class RoundMetrics:
    round: int
    selected: list[int]
    overall_acc: float
    per_class_acc: np.ndarray  # NaN where the class is absent from the test set
    loss: float


@dataclass
class Stage1Result:
    model: ModelParams
    cache: StatsCache
    metrics: list[RoundMetrics]
    coverages: list[CoverageMatrix | None]  # per round; None when selection was random


@dataclass
class Stage2Result:
    model: ModelParams
    coverage: CoverageMatrix | None = None
    global_stats: GlobalClassStats | None = None
    order: ClassOrder | None = None
    federated: FederatedFeatures | None = None


def evaluate(model: ModelParams, test: LabeledDataset) -> tuple[float, np.ndarray]:
    """Overall accuracy and per-class accuracy (NaN for classes absent from ``test``)."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = forward(model, test.inputs)[1].argmax(axis=1)
    hit = pred == test.labels
    counts = np.bincount(test.labels, minlength=test.num_classes)
    correct = np.bincount(test.labels, weights=hit, minlength=test.num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)
    return float(hit.mean()), per_class


def fedavg_aggregate(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Parameter-wise average with weights normalised to sum to one."""
    if not models:
        raise ValueError("need at least one model")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(models) or np.any(w <= 0):
        raise ValueError("need one positive weight per model")
    w = w / w.sum()
    ref = models[0]
    for m in models[1:]:
        if [a.shape for a in m.arrays()] != [a.shape for a in ref.arrays()]:
            raise ValueError("models have mismatched shapes")

    def avg(get):
        return sum(wi * get(m) for wi, m in zip(w, models))

    layers = tuple(
        Layer(avg(lambda m, i=i: m.extractor_layers[i].weight), avg(lambda m, i=i: m.extractor_layers[i].bias))
        for i in range(len(ref.extractor_layers))
    )
    cls = Classifier(avg(lambda m: m.classifier.weight), avg(lambda m: m.classifier.bias))
    return ModelParams(layers, cls, ref.activation)


def local_train(
    global_params: ModelParams,
    shard: ClientShard,
    dataset: LabeledDataset,
    epochs: int,
    lr: float,
    seed,
    batch_size: int = 32,
    round: int = 0,
    mask_radius_factor: float = MASK_RADIUS_FACTOR,
) -> tuple[ModelParams, MaskedStatsUpload, float]:
    """Local SGD from the global model, then a masked means-only upload.

    Returns the local parameters, the upload and the mean minibatch loss of
    the last epoch.
    """
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    rng = np.random.default_rng(seed)
    x = dataset.inputs[shard.indices]
    y = dataset.labels[shard.indices]
    params = global_params
    losses: list[float] = []
    for _ in range(epochs):
        perm = rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), batch_size):
            idx = perm[start : start + batch_size]
            try:
                params, loss = train_step(params, Batch(x[idx], y[idx]), lr)
            except DivergenceError as exc:
                raise DivergenceError(f"client {shard.client_id}, round {round}: {exc}") from exc
            losses.append(loss)
    grouped = extract_features(params, shard, dataset)
    stats = local_class_stats(grouped, with_cov=False)
    upload = mask_stats(stats, default_mask_radius(grouped, mask_radius_factor), rng.integers(2**63),
                        shard.client_id, round)
    return params, upload, float(np.mean(losses))


def _client_seed(seed: int, round: int, client_id: int, tag: int) -> list[int]:
    return [seed, round, client_id, tag]


def run_stage1(
    config: FederationConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    shards: Sequence[ClientShard],
    on_round: Callable[[RoundMetrics, CoverageMatrix | None], None] | None = None,
) -> Stage1Result:
    """Federated feature learning with random or coverage-driven client selection."""
    dims = [train.inputs.shape[1], *config.hidden_dims, config.d_feat]
    model = init_params(dims, train.num_classes, config.seed)
    cache = StatsCache()
    population = [s.client_id for s in shards]
    by_id = {s.client_id: s for s in shards}
    m = config.clients_per_round
    metrics, coverages = [], []
    for r in range(1, config.rounds + 1):
        sel_seed = [config.seed, r, _SELECT]
        coverage = None
        if config.selection_rule == "mfsc" and len(cache):
            coverage = estimate_coverage(cache.snapshot(), config.mad_threshold)
            selected = select_clients(coverage, m, sel_seed, population, config.random_slots)
        else:
            rng = np.random.default_rng(sel_seed)
            selected = [int(k) for k in rng.choice(population, size=m, replace=False)]
        locals_, weights, uploads, losses = [], [], [], []
        for k in selected:
            shard = by_id[k]
            if len(shard) == 0:
                continue
            p, up, loss = local_train(
                model, shard, train, config.local_epochs, config.local_lr,
                _client_seed(config.seed, r, k, _TRAIN), config.batch_size, r, config.mask_radius_factor,
            )
            locals_.append(p)
            weights.append(len(shard))
            uploads.append(strip_presence(up))
            losses.append(loss)
        if locals_:
            model = fedavg_aggregate(locals_, weights)
        cache = update_cache(cache, uploads)
        acc, per_class = evaluate(model, test)
        rm = RoundMetrics(r, list(selected), acc, per_class, float(np.mean(losses)) if losses else float("nan"))
        metrics.append(rm)
        coverages.append(coverage)
        if on_round is not None:
            on_round(rm, coverage)
        log.debug("round %d acc %.4f loss %.4f", r, acc, rm.loss)
    return Stage1Result(model, cache, metrics, coverages)


def stage2_uploads(
    model: ModelParams,
    train: LabeledDataset,
    shards: Sequence[ClientShard],
    seed: int,
    round: int,
    mask_radius_factor: float = MASK_RADIUS_FACTOR,
) -> list[MaskedStatsUpload]:
    """Every non-empty client's masked (mean, cov, count) under the frozen extractor."""
    uploads = []
    for s in shards:
        if len(s) == 0:
            continue
        grouped = extract_features(model, s, train)
        stats = local_class_stats(grouped, with_cov=True)
        radius = default_mask_radius(grouped, mask_radius_factor)
        up = mask_stats(stats, radius, _client_seed(seed, round, s.client_id, _MASK2), s.client_id, round)
        uploads.append(strip_presence(up))
    return uploads


def run_stage2(
    model: ModelParams,
    cache: StatsCache,
    config: FederationConfig,
    train: LabeledDataset,
    shards: Sequence[ClientShard],
) -> Stage2Result:
    """One statistics round-trip, Gaussian regeneration, and classifier retraining."""
    plan = config.calibration_plan
    if plan is None:
        return Stage2Result(model)
    round_ = config.rounds + 1
    cache = update_cache(cache, stage2_uploads(model, train, shards, config.seed, round_, config.mask_radius_factor))
    fresh = [u for u in cache.records.values() if u.round == round_]
    coverage = estimate_coverage(fresh, config.mad_threshold)
    gstats = pool_global_stats(fresh, coverage.as_dict())
    order = class_order(gstats.counts)
    ff = build_federated_features(gstats, plan, order, config.seed)
    if ff.skipped:
        log.info("classes without pooled statistics: %s", list(ff.skipped))
    calibrated = calibrate(model, ff.features, ff.labels, plan, config.seed)
    return Stage2Result(calibrated, coverage, gstats, order, ff)
