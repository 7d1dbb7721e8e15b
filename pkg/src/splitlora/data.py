"""Deterministic synthetic classification data and device partitioning.

A Gaussian mixture with one unit-variance component per class; the class
means sit on mutually orthogonal directions scaled so every pair of means
is exactly ``margin`` apart. Generation, the 80/20 train/test split and
the per-device shards are all pure functions of their seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, orthonormal_rows


@dataclass(frozen=True)
class Dataset:
    """One split of examples; features rows align with labels."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int64 class ids
    split: str            # "train" or "test"

    def __post_init__(self):
        # copy so freezing never mutates the caller's array flags
        f = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {f.shape}, {y.shape}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def generate(seed: int, n: int, d_x: int, classes: int, margin: float,
             ) -> tuple[Dataset, Dataset]:
    """Synthesize (train, test) with every class present in both splits."""
    if classes < 2 or n < 2 * classes:
        raise ValueError("need at least two classes and two examples per class")
    if d_x < classes:
        raise ValueError("feature dimension must be at least the class count")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    root = RngStream(seed).child("synthetic-data")
    # orthonormal directions scaled so pairwise mean distance is margin exactly
    means = orthonormal_rows(root.child("class-means"), classes, d_x, 1.0)
    means = means * (margin / np.sqrt(2.0))
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    train_feats, train_labels, test_feats, test_labels = [], [], [], []
    for c in range(classes):
        gen = root.child("features", c).generator()
        feats = means[c] + gen.normal(0.0, 1.0, size=(counts[c], d_x))
        n_test = max(1, min(counts[c] - 1, round(0.2 * counts[c])))
        test_feats.append(feats[:n_test])
        test_labels.append(np.full(n_test, c, dtype=np.int64))
        train_feats.append(feats[n_test:])
        train_labels.append(np.full(counts[c] - n_test, c, dtype=np.int64))
    train = _shuffled(np.concatenate(train_feats), np.concatenate(train_labels),
                      "train", root.child("shuffle-train"))
    test = _shuffled(np.concatenate(test_feats), np.concatenate(test_labels),
                     "test", root.child("shuffle-test"))
    return train, test


def _shuffled(feats, labels, split, rng: RngStream) -> Dataset:
    order = rng.generator().permutation(feats.shape[0])
    return Dataset(features=feats[order], labels=labels[order], split=split)


def partition(ds: Dataset, k_devices: int, fraction: float, seed: int) -> list[Dataset]:
    """Per-device shards, class-balanced to within one example.

    Each device samples floor(fraction * len(ds)) examples, evenly across
    classes, without replacement within the device; devices sample
    independently so shards may overlap.
    """
    if k_devices < 1:
        raise ValueError("need at least one device")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    shard_size = int(fraction * len(ds))
    if shard_size < 1:
        raise ValueError("fraction too small: shards would be empty")
    classes = sorted(set(int(y) for y in ds.labels))
    pools = {c: np.flatnonzero(ds.labels == c) for c in classes}
    root = RngStream(seed).child("partition")
    shards = []
    for k in range(k_devices):
        gen = root.child("device", k).generator()
        base, rem = divmod(shard_size, len(classes))
        bonus = set(gen.choice(len(classes), size=rem, replace=False).tolist()) if rem else set()
        picks = []
        for idx, c in enumerate(classes):
            quota = base + (1 if idx in bonus else 0)
            if quota > len(pools[c]):
                raise ValueError(f"class {c} has too few examples for quota {quota}")
            if quota:
                picks.append(gen.choice(pools[c], size=quota, replace=False))
        chosen = np.sort(np.concatenate(picks))
        shards.append(Dataset(features=ds.features[chosen], labels=ds.labels[chosen],
                              split=ds.split))
    return shards


def save_csv(ds: Dataset, path) -> None:
    """Write features and labels with a feature_0..feature_{d-1},label header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, split: str = "train") -> Dataset:
    """Read a dataset written by save_csv; floats round-trip exactly."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label" or any(
                name != f"feature_{i}" for i, name in enumerate(header[:-1])):
            raise ValueError("unexpected CSV header")
        feats, labels = [], []
        for row in reader:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    return Dataset(features=np.array(feats, dtype=np.float64),
                   labels=np.array(labels, dtype=np.int64), split=split)
