"""Datasets, non-IID partitioners and the on-disk dataset format.

Binary dataset file (all integers little-endian unsigned 32-bit)::

    offset  size        field
    0       4           magic  b"FRCD"
    4       4           version (= 1)
    8       4           num_samples N
    12      4           ndim R (rank of one sample's feature tensor)
    16      4*R         dims d_1 .. d_R
    16+4R   4           num_classes
    20+4R   4*N*prod(d) features, float32 little-endian, sample-major, C order
    ...     4*N         labels, uint32 little-endian

Nothing follows the labels; trailing bytes are an error.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InfeasibleAssignment, TooFewSamples

MAGIC = b"FRCD"
VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


Partition = list[np.ndarray]


def make_synthetic_classification(d: int, classes: int, n: int, separation: float,
                                  rng: np.random.Generator, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs whose class means are ``separation`` apart.

    With ``d >= classes`` the means sit on scaled orthonormal directions so every
    pair is exactly ``separation`` apart; otherwise random unit directions are used.
    Labels are balanced to within one sample.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    if d >= classes:
        q, _ = np.linalg.qr(rng.normal(size=(d, classes)))
        dirs = q.T
    else:
        dirs = rng.normal(size=(classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (separation / math.sqrt(2.0))
    labels = rng.permutation(np.arange(n) % classes)
    x = means[labels] + noise * rng.normal(size=(n, d))
    return Dataset(x, labels, classes)


def train_test_split(ds: Dataset, n_test: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    perm = rng.permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _repair_empty(parts: list[list[int]]) -> None:
    for i, part in enumerate(parts):
        if part:
            continue
        donor = max(range(len(parts)), key=lambda j: len(parts[j]))
        if len(parts[donor]) < 2:
            raise TooFewSamples("not enough samples to give every client one")
        part.append(parts[donor].pop())


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, rng: np.random.Generator,
                        repair: bool = True) -> Partition:
    """Split each class among clients in proportions drawn from Dir(alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    counts = ds.class_counts()
    if np.any(counts < 1):
        raise TooFewSamples(f"classes without samples: {np.flatnonzero(counts < 1).tolist()}")
    if repair and len(ds) < num_clients:
        raise TooFewSamples("fewer samples than clients")
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        q = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(q)[:-1] * len(idx)).astype(np.int64)
        for c, chunk in enumerate(np.split(idx, cuts)):
            parts[c].extend(chunk.tolist())
    if repair:
        _repair_empty(parts)
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def _assign_labels(num_clients: int, num_classes: int, lpc: int,
                   rng: np.random.Generator) -> list[list[int]]:
    # every class appears ceil(C*lpc/K) times in the pool; clients draw the
    # least-used classes first so the pool is spread evenly and all classes are hit
    copies = math.ceil(num_clients * lpc / num_classes)
    remaining = np.full(num_classes, copies)
    order = rng.permutation(num_classes)
    assigned = []
    for _ in range(num_clients):
        ranked = sorted(order, key=lambda k: -remaining[k])
        pick = ranked[:lpc]
        for k in pick:
            remaining[k] -= 1
        assigned.append(sorted(int(k) for k in pick))
        order = rng.permutation(num_classes)
    return assigned


def pathological_partition(ds: Dataset, num_clients: int, labels_per_client: int,
                           rng: np.random.Generator) -> Partition:
    """Give each client exactly ``labels_per_client`` classes; split each class evenly
    among the clients holding it."""
    k = ds.num_classes
    if not 1 <= labels_per_client <= k:
        raise ValueError(f"labels_per_client must lie in [1, {k}]")
    if num_clients * labels_per_client < k:
        raise InfeasibleAssignment(
            f"{num_clients} clients x {labels_per_client} labels cannot cover {k} classes")
    assigned = _assign_labels(num_clients, k, labels_per_client, rng)
    holders: list[list[int]] = [[] for _ in range(k)]
    for c, labs in enumerate(assigned):
        for lab in labs:
            holders[lab].append(c)
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for lab in range(k):
        idx = rng.permutation(np.flatnonzero(ds.labels == lab))
        for c, chunk in zip(holders[lab], np.array_split(idx, len(holders[lab]))):
            parts[c].extend(chunk.tolist())
    if any(not p for p in parts):
        raise TooFewSamples("some client received no samples")
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def iid_partition(ds: Dataset, num_clients: int, rng: np.random.Generator) -> Partition:
    if len(ds) < num_clients:
        raise TooFewSamples("fewer samples than clients")
    return [np.sort(c) for c in np.array_split(rng.permutation(len(ds)), num_clients)]


def label_entropy(ds: Dataset, part: np.ndarray) -> float:
    counts = np.bincount(ds.labels[part], minlength=ds.num_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def save_dataset(path, ds: Dataset) -> None:
    feats = np.ascontiguousarray(ds.features, dtype="<f4")
    dims = feats.shape[1:]
    header = MAGIC + struct.pack(f"<III{len(dims)}II", VERSION, len(ds), len(dims), *dims,
                                 ds.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes(order="C"))
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 16)
    (num_classes,) = struct.unpack_from("<I", raw, 16 + 4 * ndim)
    off = 20 + 4 * ndim
    size = n * int(np.prod(dims, dtype=np.int64))
    expected = off + 4 * size + 4 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape((n, *dims))
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * size)
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), int(num_classes))
