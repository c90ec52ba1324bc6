"""Per-class feature statistics: local computation, masking, and global pooling."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClientShard, LabeledDataset
from .nn_core import ModelParams, extract

MASK_RADIUS_FACTOR = 10.0


class UncoveredClassError(ValueError):
    """No client was judged to hold the class, so it cannot be pooled."""


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray | None  # None for means-only uploads
    count: int | None
    present: bool


@dataclass(frozen=True)
class MaskedStatsUpload:
    client_id: int
    round: int
    per_class: tuple[ClassStats, ...]

    @property
    def num_classes(self) -> int:
        return len(self.per_class)


@dataclass(frozen=True)
class GlobalClassStats:
    means: np.ndarray  # (C, d)
    covs: np.ndarray  # (C, d, d)
    counts: np.ndarray  # (C,) pooled N_g, 0 where uncovered
    covered: np.ndarray  # (C,) bool

    @property
    def num_classes(self) -> int:
        return len(self.counts)


def extract_features(
    extractor: ModelParams, shard: ClientShard, dataset: LabeledDataset
) -> list[np.ndarray]:
    """Features of the shard's samples, grouped by label (one array per class)."""
    d = extractor.d_feat
    if len(shard) == 0:
        return [np.zeros((0, d)) for _ in range(dataset.num_classes)]
    feats = extract(extractor, dataset.inputs[shard.indices])
    labels = dataset.labels[shard.indices]
    return [feats[labels == c] for c in range(dataset.num_classes)]


def local_class_stats(grouped: Sequence[np.ndarray], with_cov: bool = True) -> list[ClassStats]:
    out = []
    for c, z in enumerate(grouped):
        z = np.asarray(z, dtype=np.float64)
        n, d = z.shape
        mean = z.mean(axis=0) if n else np.zeros(d)
        cov = None
        if with_cov:
            cov = np.cov(z, rowvar=False, ddof=1).reshape(d, d) if n >= 2 else np.zeros((d, d))
        out.append(ClassStats(c, mean, cov, n if with_cov else None, n >= 1))
    return out


def default_mask_radius(grouped: Sequence[np.ndarray], factor: float = MASK_RADIUS_FACTOR) -> float:
    """``factor`` times the mean feature norm of the local samples (norm 1 if there are none)."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    norms = [np.linalg.norm(z, axis=1) for z in grouped if len(z)]
    scale = float(np.mean(np.concatenate(norms))) if norms else 0.0
    return factor * scale if scale > 0 else factor


def sample_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(d)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.eye(d)[0]
    return direction * radius * rng.random() ** (1.0 / d)


def mask_stats(
    stats: Sequence[ClassStats],
    mask_radius: float,
    seed,
    client_id: int = 0,
    round: int = 0,
) -> MaskedStatsUpload:
    """Replace statistics of locally absent classes with random decoys.

    Decoy means are uniform in the ball of ``mask_radius`` around the origin;
    decoy covariances are a randomly scaled identity and decoy counts are
    drawn from the range of the real counts, so a zero count never reveals
    absence.
    """
    if mask_radius <= 0:
        raise ValueError("mask_radius must be positive")
    rng = np.random.default_rng(seed)
    present = [s for s in stats if s.present]
    counts = [s.count for s in present if s.count is not None]
    lo, hi = (min(counts), max(counts)) if counts else (1, 1)
    variances = [np.trace(s.cov) / len(s.mean) for s in present
                 if s.cov is not None and s.count is not None and s.count >= 2]
    var_scale = float(np.mean(variances)) if variances and np.mean(variances) > 0 else 1.0
    out = []
    for s in stats:
        if s.present:
            out.append(s)
            continue
        d = len(s.mean)
        mean = sample_ball(rng, d, mask_radius)
        cov = None if s.cov is None else var_scale * rng.uniform(0.5, 2.0) * np.eye(d)
        count = None if s.count is None else int(rng.integers(lo, hi + 1))
        out.append(ClassStats(s.class_id, mean, cov, count, False))
    return MaskedStatsUpload(client_id, round, tuple(out))


def pool_means(means: Sequence[np.ndarray], counts: Sequence[int]) -> np.ndarray:
    """Count-weighted mean of per-client means."""
    if len(means) == 0:
        raise UncoveredClassError("no contributing clients")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("every contributing client needs count >= 1")
    weights = counts / counts.sum()
    return weights @ np.asarray(means, dtype=np.float64)


def pool_covariances(
    means: Sequence[np.ndarray],
    covs: Sequence[np.ndarray],
    counts: Sequence[int],
    global_mean: np.ndarray,
) -> np.ndarray:
    """Unbiased covariance of the union from per-client unbiased covariances."""
    counts = np.asarray(counts, dtype=np.float64)
    n_g = counts.sum()
    if n_g < 2:
        raise ValueError(f"pooled covariance undefined for N_g={n_g:g}")
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    within = np.einsum("k,kij->ij", (counts - 1) / (n_g - 1), covs)
    between = np.einsum("k,ki,kj->ij", counts / (n_g - 1), means, means)
    sigma = within + between - n_g / (n_g - 1) * np.outer(global_mean, global_mean)
    return (sigma + sigma.T) / 2


def pool_global_stats(
    uploads: Sequence[MaskedStatsUpload], coverage: dict[int, np.ndarray]
) -> GlobalClassStats:
    """Pool every class over the uploads judged to hold it.

    ``coverage`` maps client id to its boolean class-coverage row. Classes
    with no judged holder are marked uncovered; a single contributing sample
    gives a zero covariance.
    """
    num_classes = uploads[0].num_classes
    d = len(uploads[0].per_class[0].mean)
    means = np.zeros((num_classes, d))
    covs = np.zeros((num_classes, d, d))
    counts = np.zeros(num_classes, dtype=np.int64)
    covered = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        entries = [u.per_class[c] for u in uploads if coverage[u.client_id][c]]
        entries = [e for e in entries if e.count]
        if not entries:
            continue
        mu = pool_means([e.mean for e in entries], [e.count for e in entries])
        n_g = sum(e.count for e in entries)
        means[c] = mu
        counts[c] = n_g
        covered[c] = True
        if n_g >= 2:
            covs[c] = pool_covariances(
                [e.mean for e in entries], [e.cov for e in entries], [e.count for e in entries], mu
            )
    return GlobalClassStats(means, covs, counts, covered)


def upload_to_dict(upload: MaskedStatsUpload) -> dict:
    """Wire form of an upload; the internal present flag is never written."""
    return {
        "client_id": upload.client_id,
        "round": upload.round,
        "per_class": [
            {
                "mean": s.mean.tolist(),
                "cov": None if s.cov is None else s.cov.ravel().tolist(),
                "count": s.count,
            }
            for s in upload.per_class
        ],
    }


def upload_from_dict(data: dict) -> MaskedStatsUpload:
    """Parse a wire upload. Every entry is taken at face value (present=True)."""
    per_class = []
    for c, entry in enumerate(data["per_class"]):
        mean = np.asarray(entry["mean"], dtype=np.float64)
        cov = entry.get("cov")
        if cov is not None:
            cov = np.asarray(cov, dtype=np.float64).reshape(len(mean), len(mean))
        per_class.append(ClassStats(c, mean, cov, entry.get("count"), True))
    return MaskedStatsUpload(int(data["client_id"]), int(data["round"]), tuple(per_class))


def save_snapshot(upload: MaskedStatsUpload, path: str | Path) -> None:
    Path(path).write_text(json.dumps(upload_to_dict(upload)))


def load_snapshot(path: str | Path) -> MaskedStatsUpload:
    return upload_from_dict(json.loads(Path(path).read_text()))


def strip_presence(upload: MaskedStatsUpload) -> MaskedStatsUpload:
    """What the server actually sees: every entry looks present."""
    return replace(upload, per_class=tuple(replace(s, present=True) for s in upload.per_class))
