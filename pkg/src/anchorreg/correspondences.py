"""Index-pair correspondence sets with an inlier/outlier/unclassified partition."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, NamedTuple

import numpy as np


class Label(IntEnum):
    UNCLASSIFIED = 0
    INLIER = 1
    OUTLIER = 2


class Correspondence(NamedTuple):
    i: int
    j: int
    label: Label


@dataclass(eq=False)
class CorrespondenceSet:
    """Pairs ``(i, j)`` linking point ``i`` of a source cloud to point ``j`` of a target.

    Stored column-wise: ``pairs`` is an ``(M, 2)`` integer array and ``labels``
    an ``(M,)`` array of :class:`Label` codes. Duplicate pairs are rejected.
    """

    pairs: np.ndarray
    labels: np.ndarray | None = None
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self) -> None:
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.size == 0:
            pairs = pairs.reshape(0, 2)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError(f"pairs must have shape (M, 2), got {pairs.shape}")
        if np.any(pairs < 0):
            raise ValueError("correspondence indices must be non-negative")
        if self.labels is None:
            labels = np.full(len(pairs), Label.UNCLASSIFIED, dtype=np.int8)
        else:
            labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
            if len(labels) != len(pairs):
                raise ValueError("labels length must match pairs length")
            if not np.isin(labels, [int(v) for v in Label]).all():
                raise ValueError("unknown label code")
        if len(pairs) and len(np.unique(pairs, axis=0)) != len(pairs):
            raise ValueError("duplicate (i, j) pairs in correspondence set")
        self.pairs = pairs
        self.labels = labels

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Correspondence]:
        for (i, j), lab in zip(self.pairs.tolist(), self.labels.tolist()):
            yield Correspondence(i, j, Label(lab))

    @property
    def i(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def j(self) -> np.ndarray:
        return self.pairs[:, 1]

    def select(self, mask_or_index) -> "CorrespondenceSet":
        idx = np.asarray(mask_or_index)
        return CorrespondenceSet(
            self.pairs[idx], self.labels[idx], self.source_id, self.target_id
        )

    def with_labels(self, labels) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs, labels, self.source_id, self.target_id)

    def with_flags(self, inlier_flags) -> "CorrespondenceSet":
        """Relabel from a boolean inlier mask: True -> inlier, False -> outlier."""
        flags = np.asarray(inlier_flags, dtype=bool)
        labels = np.where(flags, Label.INLIER, Label.OUTLIER).astype(np.int8)
        return self.with_labels(labels)

    @property
    def inliers(self) -> "CorrespondenceSet":
        return self.select(self.labels == Label.INLIER)

    @property
    def outliers(self) -> "CorrespondenceSet":
        return self.select(self.labels == Label.OUTLIER)

    @property
    def unclassified(self) -> "CorrespondenceSet":
        return self.select(self.labels == Label.UNCLASSIFIED)

    def keys(self, n_target: int | None = None) -> np.ndarray:
        """Scalar key per pair, for fast set operations."""
        base = int(n_target) if n_target is not None else _key_base(self.pairs)
        return self.pairs[:, 0] * base + self.pairs[:, 1]

    def pair_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.pairs.tolist()))

    def union(self, other: "CorrespondenceSet") -> "CorrespondenceSet":
        """Concatenate, keeping the first occurrence (and label) of each pair."""
        pairs = np.concatenate([self.pairs, other.pairs])
        labels = np.concatenate([self.labels, other.labels])
        if len(pairs) == 0:
            return CorrespondenceSet.empty()
        _, first = np.unique(pairs, axis=0, return_index=True)
        keep = np.sort(first)
        return CorrespondenceSet(pairs[keep], labels[keep], self.source_id, self.target_id)

    def check_bounds(self, n_source: int, n_target: int) -> None:
        if len(self) == 0:
            return
        if self.pairs[:, 0].max() >= n_source or self.pairs[:, 1].max() >= n_target:
            raise IndexError(
                f"correspondence index out of bounds for clouds of size "
                f"{n_source} and {n_target}"
            )


def _key_base(pairs: np.ndarray) -> int:
    return int(pairs[:, 1].max()) + 1 if len(pairs) else 1
