"""Per-class adaptive thresholds and confident / non-confident batch split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ThresholdVector:
    """T_c for every class that occurs in the batch."""

    entries: dict[int, float]

    def __getitem__(self, c: int) -> float:
        return self.entries[c]

    def __contains__(self, c: int) -> bool:
        return c in self.entries

    def classes(self) -> list[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class BatchPartition:
    confident: np.ndarray  # sorted sample indices
    non_confident: np.ndarray

    @property
    def size(self) -> int:
        return len(self.confident) + len(self.non_confident)

    @classmethod
    def everything_confident(cls, n: int) -> "BatchPartition":
        return cls(np.arange(n), np.arange(0))


def label_probabilities(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """p^{y_i}(x_i) for every row."""
    labels = np.asarray(labels)
    return probs[np.arange(len(labels)), labels]


def compute_thresholds(probs: np.ndarray, labels) -> ThresholdVector:
    """Mean labelled-class probability within each labelled class group."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = probs.shape[1]
    p = label_probabilities(probs, labels).astype(np.float64)
    counts = np.bincount(labels, minlength=num_classes)
    sums = np.bincount(labels, weights=p, minlength=num_classes)
    lo = np.full(num_classes, np.inf)
    hi = np.full(num_classes, -np.inf)
    np.minimum.at(lo, labels, p)
    np.maximum.at(hi, labels, p)
    present = np.flatnonzero(counts)
    means = sums[present] / counts[present]
    # summation rounding can push the mean of equal values just past the max
    means = np.minimum(np.maximum(means, lo[present]), hi[present])
    return ThresholdVector({int(c): float(m) for c, m in zip(present, means)})


def partition_batch(probs: np.ndarray, labels, thresholds: ThresholdVector) -> BatchPartition:
    """Confident iff p^{y_i}(x_i) >= T_{y_i}."""
    labels = np.asarray(labels, dtype=np.int64)
    missing = set(np.unique(labels).tolist()) - set(thresholds.entries)
    if missing:
        raise RuntimeError(f"no threshold for classes present in batch: {sorted(missing)}")
    t = np.array([thresholds[int(c)] for c in labels], dtype=np.float64)
    keep = label_probabilities(probs, labels).astype(np.float64) >= t
    return BatchPartition(np.flatnonzero(keep), np.flatnonzero(~keep))


def select_confident(probs: np.ndarray, labels) -> tuple[ThresholdVector, BatchPartition]:
    t = compute_thresholds(probs, labels)
    return t, partition_batch(probs, labels, t)
