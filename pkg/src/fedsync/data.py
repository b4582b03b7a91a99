"""Dataset construction: IDX loading, synthetic clusters, label sharding.

The label-shard partitioner sorts samples by class, cuts the sorted order
into ``K * s`` equal shards, and deals ``s`` shards to each of ``K``
clients, which controls statistical heterogeneity: small ``s`` gives each
client very few distinct labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "IdxFormatError",
    "LabeledDataset",
    "PartitionStats",
    "ShardPartition",
    "label_shard_partition",
    "load_idx",
    "partition_stats",
    "synthesize_clusters",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed structural validation."""


@dataclass(frozen=True)
class LabeledDataset:
    """Dense feature matrix with integer class labels."""

    features: np.ndarray  # (N, d_in) float64
    labels: np.ndarray    # (N,) int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx],
                              self.num_classes)


def _read_be32(data: bytes, offset: int, path: str) -> int:
    if len(data) < offset + 4:
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load a paired IDX image/label file set, scaling pixels to [0, 1]."""
    images_path = str(images_path)
    labels_path = str(labels_path)

    with open(images_path, "rb") as fh:
        img_data = fh.read()
    magic = _read_be32(img_data, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count = _read_be32(img_data, 4, images_path)
    rows = _read_be32(img_data, 8, images_path)
    cols = _read_be32(img_data, 12, images_path)
    payload = count * rows * cols
    if len(img_data) < 16 + payload:
        raise IdxFormatError(
            f"{images_path}: truncated payload at offset {len(img_data)}, "
            f"expected {16 + payload} bytes"
        )
    pixels = np.frombuffer(img_data, dtype=np.uint8, count=payload, offset=16)
    features = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0

    with open(labels_path, "rb") as fh:
        lab_data = fh.read()
    magic = _read_be32(lab_data, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    lab_count = _read_be32(lab_data, 4, labels_path)
    if lab_count != count:
        raise IdxFormatError(
            f"{labels_path}: label count {lab_count} does not match "
            f"image count {count} in {images_path}"
        )
    if len(lab_data) < 8 + lab_count:
        raise IdxFormatError(
            f"{labels_path}: truncated payload at offset {len(lab_data)}, "
            f"expected {8 + lab_count} bytes"
        )
    labels = np.frombuffer(lab_data, dtype=np.uint8, count=lab_count,
                           offset=8).astype(np.int64)

    return LabeledDataset(features, labels, int(labels.max()) + 1)


def synthesize_clusters(num_classes: int, per_class: int, dim: int,
                        spread: float, seed) -> LabeledDataset:
    """Isotropic Gaussian clusters around seeded unit-direction centers.

    Each class center is a random unit-norm vector scaled to length 2.0;
    samples are drawn with per-coordinate std ``spread``.  Deterministic
    for a fixed seed.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if spread <= 0.0:
        raise ValueError("spread must be > 0")
    rng = np.random.default_rng(seed)
    features = np.empty((num_classes * per_class, dim), dtype=np.float64)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        center = rng.standard_normal(dim)
        center *= 2.0 / np.linalg.norm(center)
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = center + spread * rng.standard_normal((per_class, dim))
        labels[block] = c
    return LabeledDataset(features, labels, num_classes)


@dataclass(frozen=True)
class ShardPartition:
    """Per-client ordered sample indices produced by label sharding."""

    assignments: tuple  # tuple of int64 arrays, one per client
    num_clients: int
    shards_per_client: int
    shard_size: int

    def client_indices(self, client_id: int) -> np.ndarray:
        return self.assignments[client_id]


def label_shard_partition(ds: LabeledDataset, num_clients: int,
                          shards_per_client: int, seed) -> ShardPartition:
    """Sort by label, cut into ``K * s`` equal shards, deal ``s`` per client.

    The sort is stable (ties keep original order) and any tail left over
    when ``K * s`` does not divide N is dropped, so every client ends up
    with exactly ``s * shard_size`` samples.
    """
    if num_clients < 1 or shards_per_client < 1:
        raise ValueError("num_clients and shards_per_client must be >= 1")
    total_shards = num_clients * shards_per_client
    n = len(ds)
    if total_shards > n:
        raise ValueError(
            f"K*s = {total_shards} shards exceed the {n} available samples"
        )
    order = np.argsort(ds.labels, kind="stable")
    shard_size = n // total_shards
    usable = shard_size * total_shards
    shards = order[:usable].reshape(total_shards, shard_size)
    perm = np.random.default_rng(seed).permutation(total_shards)
    assignments = tuple(
        np.concatenate([shards[j] for j in
                        perm[k * shards_per_client:(k + 1) * shards_per_client]])
        for k in range(num_clients)
    )
    return ShardPartition(assignments, num_clients, shards_per_client,
                          shard_size)


@dataclass(frozen=True)
class PartitionStats:
    """Per-client label histogram plus a heterogeneity summary."""

    label_counts: np.ndarray  # (K, C) int64
    mean_distinct_labels: float
    client_sizes: tuple = field(default=())


def partition_stats(partition: ShardPartition, ds: LabeledDataset) -> PartitionStats:
    counts = np.zeros((partition.num_clients, ds.num_classes), dtype=np.int64)
    for k, idx in enumerate(partition.assignments):
        binc = np.bincount(ds.labels[idx], minlength=ds.num_classes)
        counts[k] = binc
    distinct = (counts > 0).sum(axis=1)
    sizes = tuple(int(len(idx)) for idx in partition.assignments)
    return PartitionStats(counts, float(distinct.mean()), sizes)
