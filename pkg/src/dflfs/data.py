"""Datasets, long-tail subsampling and Dirichlet label-skew partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Bad magic number or malformed header in an IDX file."""


class IdxTruncatedError(IdxFormatError):
    """IDX payload shorter than its header declares."""


class IdxCountMismatchError(ValueError):
    """Image and label files disagree on the record count."""


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != len(self.labels):
            raise ValueError("inputs rows must equal label count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class LongTailProfile:
    imbalance_factor: float
    per_class_counts: tuple[int, ...]


def make_blobs(
    num_classes: int,
    d_in: int,
    per_class_counts: Sequence[int],
    class_center_spread: float,
    within_class_std: float,
    seed: int,
    split: int = 0,
) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class.

    Class centres depend on ``seed`` only; ``split`` selects an independent
    sample stream, so a train (split 0) and a test set (split 1) share
    centres but not samples.
    """
    counts = [int(c) for c in per_class_counts]
    if len(counts) != num_classes:
        raise ValueError("need one count per class")
    if any(c < 1 for c in counts):
        raise ValueError("every class needs at least one sample")
    if class_center_spread <= 0 or within_class_std < 0:
        raise ValueError("spread must be positive and std non-negative")
    centers = class_centers(num_classes, d_in, class_center_spread, seed)
    rng = np.random.default_rng([seed, 11, split])
    inputs = np.concatenate(
        [centers[c] + within_class_std * rng.standard_normal((n, d_in)) for c, n in enumerate(counts)]
    )
    labels = np.repeat(np.arange(num_classes), counts)
    return LabeledDataset(inputs, labels, num_classes)


def class_centers(num_classes: int, d_in: int, spread: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return spread * rng.standard_normal((num_classes, d_in))


def _read_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    if len(buf) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Read an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    img_buf = Path(images_path).read_bytes()
    lbl_buf = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(img_buf, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lbl,) = _read_header(lbl_buf, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lbl:
        raise IdxCountMismatchError(f"{n_img} images but {n_lbl} labels")
    pixels = np.frombuffer(img_buf, dtype=np.uint8, offset=16)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, offset=8)
    if pixels.size < n_img * rows * cols:
        raise IdxTruncatedError(f"{images_path}: expected {n_img * rows * cols} pixels, got {pixels.size}")
    if labels.size < n_lbl:
        raise IdxTruncatedError(f"{labels_path}: expected {n_lbl} labels, got {labels.size}")
    inputs = pixels[: n_img * rows * cols].reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = labels[:n_lbl].astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(inputs, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, rows, cols) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


def longtail_counts(n_max: int, num_classes: int, imbalance_factor: float) -> list[int]:
    """Exponential profile: position j keeps round(n_max * IF^(-j/(C-1)))."""
    if num_classes == 1:
        return [n_max]
    return [
        int(round(n_max * imbalance_factor ** (-j / (num_classes - 1)))) for j in range(num_classes)
    ]


def apply_longtail(
    dataset: LabeledDataset, imbalance_factor: float, seed: int, n_max: int | None = None
) -> tuple[LabeledDataset, LongTailProfile]:
    """Subsample classes to an exponential long-tail profile.

    Classes are ranked by available count (descending, ties by class id); the
    head keeps ``n_max`` samples (its full count unless capped).
    """
    if imbalance_factor < 1:
        raise ValueError("imbalance_factor must be >= 1 (max/min ratio)")
    available = dataset.class_counts()
    order = sorted(range(dataset.num_classes), key=lambda c: (-available[c], c))
    head = int(available[order[0]]) if n_max is None else int(n_max)
    targets = longtail_counts(head, dataset.num_classes, imbalance_factor)
    rng = np.random.default_rng([seed, 23])
    keep = []
    per_class = [0] * dataset.num_classes
    for j, c in enumerate(order):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < targets[j]:
            raise InsufficientSamplesError(
                f"class {c} has {len(idx)} samples, profile needs {targets[j]}"
            )
        keep.append(np.sort(rng.choice(idx, size=targets[j], replace=False)))
        per_class[c] = targets[j]
    kept = np.sort(np.concatenate(keep))
    return dataset.subset(kept), LongTailProfile(float(imbalance_factor), tuple(per_class))


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quotas).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = quotas - base
        # stable: ties go to the lower client id
        winners = np.argsort(-frac, kind="stable")[:short]
        base[winners] += 1
    return base


def dirichlet_partition(
    dataset: LabeledDataset, num_clients: int, alpha: float, block_size: int, seed: int
) -> list[ClientShard]:
    """Split each class across clients by a Dirichlet(alpha) draw, in whole blocks.

    Every class is cut into blocks of ``block_size`` samples (the last block
    may be short). Block quotas ``p_k * n_blocks`` are rounded with the
    largest-remainder rule, so allocations stay proportional to the draw.
    Clients may end up with an empty shard.
    """
    if num_clients < 1 or alpha <= 0 or block_size < 1:
        raise ValueError("need num_clients >= 1, alpha > 0, block_size >= 1")
    if num_clients > len(dataset):
        raise ValueError(f"{num_clients} clients exceed {len(dataset)} samples")
    rng = np.random.default_rng([seed, 31])
    owned: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        n_blocks = -(-len(idx) // block_size)
        blocks_per_client = _largest_remainder(props * n_blocks, n_blocks)
        blocks = [idx[i * block_size : (i + 1) * block_size] for i in range(n_blocks)]
        # the short tail block goes to the receiving client with the largest
        # fractional quota; full blocks are handed out in client-id order
        quotas = props * n_blocks
        frac = np.where(blocks_per_client > 0, quotas - np.floor(quotas), -1.0)
        short_owner = int(np.argmax(frac))
        order = [k for k in range(num_clients) for _ in range(blocks_per_client[k])]
        order.remove(short_owner)
        order.append(short_owner)
        for k, block in zip(order, blocks):
            owned[k].append(block)
    return [
        ClientShard(k, np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64))
        for k, parts in enumerate(owned)
    ]


def label_histograms(dataset: LabeledDataset, shards: Sequence[ClientShard]) -> np.ndarray:
    """(K, C) matrix of per-client label counts."""
    return np.stack([np.bincount(dataset.labels[s.indices], minlength=dataset.num_classes) for s in shards])


def partition_manifest(shards: Sequence[ClientShard]) -> dict[str, list[int]]:
    return {str(s.client_id): [int(i) for i in np.sort(s.indices)] for s in shards}


def write_partition_manifest(shards: Sequence[ClientShard], path: str | Path) -> None:
    Path(path).write_text(json.dumps(partition_manifest(shards), sort_keys=False))
