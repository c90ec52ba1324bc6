"""Server-side masked-statistics clustering: coverage estimation and client selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import poisson

from .feature_stats import MaskedStatsUpload

DEFAULT_MAD_THRESHOLD = 3.0
MAD_EPS = 1e-9
MIN_SCAN_SCORE = 3.0
MIN_Z_SCORE = 6.0
GAP_FACTOR = 3.0
FAR_FACTOR = 16.0
SHELL_FRACTION = 0.25


@dataclass(frozen=True)
class CoverageMatrix:
    client_ids: tuple[int, ...]
    entries: np.ndarray  # (K_known, C) bool

    @property
    def holder_counts(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    @property
    def num_classes(self) -> int:
        return self.entries.shape[1]

    def row(self, client_id: int) -> np.ndarray:
        return self.entries[self.client_ids.index(client_id)]

    def as_dict(self) -> dict[int, np.ndarray]:
        return {k: self.entries[i] for i, k in enumerate(self.client_ids)}


@dataclass
class StatsCache:
    """Latest upload per client. Single writer; readers take ``snapshot()``."""

    records: dict[int, MaskedStatsUpload] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def snapshot(self) -> "StatsCache":
        return StatsCache(dict(self.records))


def update_cache(cache: StatsCache, uploads: Iterable[MaskedStatsUpload]) -> StatsCache:
    """New cache with each upload replacing its client's record; stale rounds are dropped."""
    records = dict(cache.records)
    for up in uploads:
        old = records.get(up.client_id)
        if old is not None and up.round < old.round:
            continue
        records[up.client_id] = up
    return StatsCache(records)


def _limit(dist: np.ndarray, mad_threshold: float) -> float:
    med = np.median(dist)
    mad = np.median(np.abs(dist - med))
    return med + (mad_threshold * mad if mad > 0 else MAD_EPS)


def _mad_keep(dist: np.ndarray, mad_threshold: float) -> np.ndarray:
    return dist <= _limit(dist, mad_threshold)


def _neighbour_log_distances(pair: np.ndarray) -> np.ndarray:
    """(point, neighbour rank) log distances, rank 1 = nearest other point."""
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(np.sort(pair, axis=1)[:, 1:]), np.log(MAD_EPS))


def _poisson_scores(x: np.ndarray, logd: np.ndarray) -> np.ndarray:
    """Tightest neighbourhood against a radially varying background.

    Decoys are spread around the origin, so the background density near a
    point is estimated from the points whose norm lies within ``h`` of that
    point's norm (``h`` = SHELL_FRACTION of the median norm), spread evenly
    over that shell. A ball around ``i`` reaching its ``j``-th neighbour at
    distance ``r <= h`` expects ``mu`` background points; the score is
    -log P(Poisson(mu) >= j). Wider neighbourhoods are not scored.
    """
    n, dim = x.shape
    norms = np.linalg.norm(x, axis=1)
    h = SHELL_FRACTION * float(np.median(norms))
    if h <= 0:
        return np.zeros_like(logd)
    sorted_norms = np.sort(norms)
    lo, hi = np.maximum(norms - h, 0.0), norms + h
    inside = np.searchsorted(sorted_norms, hi, side="right") - np.searchsorted(sorted_norms, lo, side="left")
    shell = (hi / h) ** dim - (lo / h) ** dim  # in units of the volume of a radius-h ball
    r = np.exp(logd)  # (n, n-1)
    mu = (inside / shell)[:, None] * (r / h) ** dim
    j = np.arange(1, n)
    return np.where(r <= h, -poisson.logsf(j - 1, np.maximum(mu, 1e-300)), 0.0)


def _robust_z_scores(logd: np.ndarray) -> np.ndarray:
    """Tightest neighbourhood by robust z-score of log distance per rank.

    Insensitive to how distances concentrate in high dimension, so it finds
    small clusters there that the Poisson scan misses.
    """
    med = np.median(logd, axis=0)
    mad = np.median(np.abs(logd - med), axis=0)
    return (med - logd) / np.maximum(mad, MAD_EPS)


def _candidates(score: np.ndarray, floor: float) -> list[tuple[int, int]]:
    """(centre, member count incl. centre) of each point's best neighbourhood
    scoring at least ``floor``, best first (ties by centre index)."""
    best_rank = np.argmax(score, axis=1)
    best = score[np.arange(len(score)), best_rank]
    order = np.argsort(-best, kind="stable")
    return [(int(i), int(best_rank[i]) + 2) for i in order if best[i] >= floor]


def _grow(pair: np.ndarray, centre: int, size: int) -> np.ndarray:
    """Nearest ``size`` points to ``centre``, grown while points lie within
    GAP_FACTOR times the members' median distance."""
    dense = np.zeros(len(pair), dtype=bool)
    dense[np.argsort(pair[centre], kind="stable")[:size]] = True
    others = np.arange(len(pair)) != centre
    while True:
        scale = float(np.median(pair[centre, dense & others]))
        grown = dense | (pair[centre] <= GAP_FACTOR * scale)
        if grown.sum() == dense.sum():
            return dense
        dense = grown


def cluster_coverage(
    class_means: Mapping[int, np.ndarray],
    mad_threshold: float = DEFAULT_MAD_THRESHOLD,
    min_scan_score: float = MIN_SCAN_SCORE,
    min_z_score: float = MIN_Z_SCORE,
) -> dict[int, bool]:
    """Judge which uploads of one class belong to the real feature cluster.

    Base rule: distances to the medoid beyond median + mad_threshold * MAD
    are absent. That rule assumes real holders are the majority. When decoys
    dominate, the MAD statistics describe the decoys instead, so tight
    neighbourhoods are searched for directly (two scans, see
    ``_poisson_scores`` and ``_robust_z_scores``) and grown while points sit
    within GAP_FACTOR times the members' median distance. A grown cluster
    replaces the base verdict when it is isolated: the points it drops lie
    more than FAR_FACTOR times its own scale away, further than the cluster
    sits from the origin, and further out from the origin than the cluster.
    Decoys are spread over a ball well beyond real feature norms, so among
    several isolated clusters the innermost wins, merged with any isolated
    cluster overlapping it.
    """
    if not class_means:
        raise ValueError("need at least one upload")
    if mad_threshold <= 0:
        raise ValueError("mad_threshold must be positive")
    ids = list(class_means)
    if len(ids) <= 2:
        return {k: True for k in ids}
    x = np.stack([np.asarray(class_means[k], dtype=np.float64) for k in ids])
    pair = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    medoid = int(np.argmin(pair.sum(axis=1)))
    keep = _mad_keep(pair[medoid], mad_threshold)

    if pair.max() > 0:
        logd = _neighbour_log_distances(pair)
        others = ~np.eye(len(ids), dtype=bool)
        norms = np.linalg.norm(x, axis=1)
        candidates = (_candidates(_poisson_scores(x, logd), min_scan_score)
                      + _candidates(_robust_z_scores(logd), min_z_score))
        passing, seen = [], set()
        for centre, size in candidates:
            dense = _grow(pair, centre, size)
            key = dense.tobytes()
            if key in seen or dense.sum() >= keep.sum():
                continue
            seen.add(key)
            dropped = keep & ~dense
            scale = float(np.median(pair[centre, dense & others[centre]]))
            far = np.median(pair[centre, dropped])
            if far > max(FAR_FACTOR * scale, norms[centre]) and np.median(norms[dropped]) > norms[centre]:
                passing.append((norms[centre], dense))
        if passing:
            # real means sit well inside the decoy ball: start from the
            # innermost isolated cluster and merge the ones overlapping it
            chosen = min(passing, key=lambda p: p[0])[1].copy()
            for _, dense in passing:
                if (dense & chosen).any():
                    chosen |= dense
            keep = chosen
    return {k: bool(keep[i]) for i, k in enumerate(ids)}


def estimate_coverage(
    cache: StatsCache | Sequence[MaskedStatsUpload], mad_threshold: float = DEFAULT_MAD_THRESHOLD
) -> CoverageMatrix:
    """Coverage over every cached client, one clustering per class."""
    uploads = list(cache.records.values()) if isinstance(cache, StatsCache) else list(cache)
    if not uploads:
        return CoverageMatrix((), np.zeros((0, 0), dtype=bool))
    uploads.sort(key=lambda u: u.client_id)
    ids = tuple(u.client_id for u in uploads)
    num_classes = uploads[0].num_classes
    entries = np.zeros((len(ids), num_classes), dtype=bool)
    for c in range(num_classes):
        verdict = cluster_coverage({u.client_id: u.per_class[c].mean for u in uploads}, mad_threshold)
        entries[:, c] = [verdict[k] for k in ids]
    return CoverageMatrix(ids, entries)


def select_clients(
    coverage: CoverageMatrix,
    budget: int,
    seed,
    population: Sequence[int] | None = None,
    random_slots: int = 0,
) -> list[int]:
    """Tail-first greedy selection over the estimated coverage.

    Classes are visited rarest first (fewest judged holders, ties by class
    id). In pass ``p`` a class that has fewer than ``p`` selected holders gets
    the unselected holder covering the most classes that are still short in
    this pass (ties to the lowest id). Passes repeat until nothing changes or
    ``budget - random_slots`` is reached; the rest is filled uniformly at
    random from ``population`` (default: the known clients), preferring
    clients the server has never heard from.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not coverage.client_ids and not population:
        raise ValueError("empty coverage matrix and no population to draw from")
    population = sorted(population) if population is not None else list(coverage.client_ids)
    budget = min(budget, len(population))
    greedy_budget = max(0, budget - random_slots)
    known = list(coverage.client_ids)
    entries = coverage.entries
    holders = entries.sum(axis=0) if len(known) else np.zeros(0, dtype=int)
    class_order = sorted((c for c in range(coverage.num_classes) if holders[c] > 0),
                         key=lambda c: (holders[c], c))
    selected: list[int] = []
    chosen = np.zeros(len(known), dtype=bool)
    p = 0
    while len(selected) < greedy_budget:
        p += 1
        added = False
        for c in class_order:
            if len(selected) >= greedy_budget:
                break
            have = np.count_nonzero(entries[chosen, c])
            if have >= p:
                continue
            cand = np.flatnonzero(entries[:, c] & ~chosen)
            if not len(cand):
                continue
            short = entries[chosen].sum(axis=0) < p
            scores = entries[cand][:, short].sum(axis=1)
            best = cand[np.argmax(scores)]  # argmax picks the lowest index on ties
            chosen[best] = True
            selected.append(known[best])
            added = True
        if not added:
            break
    rng = np.random.default_rng(seed)
    rest = [k for k in population if k not in set(selected)]
    unseen = [k for k in rest if k not in set(known)]
    seen = [k for k in rest if k in set(known)]
    need = budget - len(selected)
    pick_unseen = min(need, len(unseen))
    if pick_unseen:
        selected.extend(int(k) for k in rng.choice(unseen, size=pick_unseen, replace=False))
    need -= pick_unseen
    if need:
        selected.extend(int(k) for k in rng.choice(seen, size=need, replace=False))
    return selected


def write_coverage_csv(coverage: CoverageMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id"] + [f"class_{c}" for c in range(coverage.num_classes)])
        for k, row in zip(coverage.client_ids, coverage.entries):
            w.writerow([k] + [int(v) for v in row])
