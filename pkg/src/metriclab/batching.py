"""PK batch sampling and exhaustive triplet / positive-pair enumeration.

A PK batch holds N classes with K samples each.  Enumeration is always
exhaustive ("batch all"): every ordered (anchor, positive) pair combined
with every sample of a different class.  Order is lexicographic in
(anchor, positive, negative) row index so downstream reductions are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, InvalidConfigError, NoNegativesError


@dataclass(frozen=True)
class BatchSpec:
    """[N, K] mini-batch layout: ``n_classes`` classes, ``samples_per_class`` each."""

    n_classes: int
    samples_per_class: int

    def __post_init__(self):
        if int(self.n_classes) != self.n_classes or self.n_classes < 2:
            raise InvalidConfigError(
                f"n_classes must be an integer >= 2 (no negatives exist otherwise), got {self.n_classes}"
            )
        if int(self.samples_per_class) != self.samples_per_class or self.samples_per_class < 2:
            raise InvalidConfigError(
                f"samples_per_class must be an integer >= 2 (no positives exist otherwise), got {self.samples_per_class}"
            )
        object.__setattr__(self, "n_classes", int(self.n_classes))
        object.__setattr__(self, "samples_per_class", int(self.samples_per_class))

    @property
    def batch_size(self) -> int:
        return self.n_classes * self.samples_per_class

    @property
    def n_triplets(self) -> int:
        """N*K*(K-1) anchor/positive pairs, each against (N-1)*K negatives."""
        n, k = self.n_classes, self.samples_per_class
        return n * k * (k - 1) * (n - 1) * k


@dataclass(frozen=True)
class TripletIndexSet:
    """All (anchor, positive, negative) row-index triples of one batch.

    Stored as three parallel arrays; ``as_tuples`` gives the list view.
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if not (len(self.anchors) == len(self.positives) == len(self.negatives)):
            raise InvalidConfigError("triplet index arrays must have equal length")

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))


@dataclass(frozen=True)
class PosPairSet:
    """All ordered same-class (anchor, positive) pairs with their negative sets.

    The negatives of pair ``i`` are ``neg_rows[neg_offsets[i]:neg_offsets[i+1]]``:
    every row whose label differs from the anchor's, in ascending row order.
    """

    anchors: np.ndarray
    positives: np.ndarray
    neg_rows: np.ndarray
    neg_offsets: np.ndarray

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def negatives_of(self, i: int) -> np.ndarray:
        return self.neg_rows[self.neg_offsets[i]:self.neg_offsets[i + 1]]

    def pairs(self):
        """Yield (anchor, positive, negatives) per pair, in enumeration order."""
        for i in range(len(self)):
            yield int(self.anchors[i]), int(self.positives[i]), self.negatives_of(i)


def _canonical_key(labels: np.ndarray) -> tuple[int, ...]:
    # relabel by first appearance so the cache hits on any batch with the
    # same grouping pattern, whatever the raw label values are
    seen: dict[int, int] = {}
    out = []
    for v in labels.tolist():
        if v not in seen:
            seen[v] = len(seen)
        out.append(seen[v])
    return tuple(out)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=64)
def _enumerate_triplets_cached(key: tuple[int, ...]) -> TripletIndexSet:
    labels = np.asarray(key, dtype=np.int64)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(labels.size, dtype=bool)
    anchors_ap, positives_ap = np.nonzero(pos_mask)  # row-major: sorted by (a, p)
    neg_lists = [np.flatnonzero(~same[a]) for a in range(labels.size)]
    counts = np.array([neg_lists[a].size for a in anchors_ap], dtype=np.int64)
    if anchors_ap.size and counts.sum() == 0:
        raise NoNegativesError("batch contains a single class; no triplet has a negative")
    anchors = np.repeat(anchors_ap, counts)
    positives = np.repeat(positives_ap, counts)
    if anchors_ap.size:
        negatives = np.concatenate([neg_lists[a] for a in anchors_ap])
    else:
        negatives = np.empty(0, dtype=np.int64)
    return TripletIndexSet(_freeze(anchors), _freeze(positives), _freeze(negatives.astype(np.int64)))


def enumerate_triplets(labels) -> TripletIndexSet:
    """Every (anchor, positive, negative) index triple, lexicographically ordered.

    Raises NoNegativesError when positives exist but the batch holds only
    one class.  A batch with no same-class pair at all yields an empty set.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return _enumerate_triplets_cached(_canonical_key(labels))


@lru_cache(maxsize=64)
def _enumerate_pos_pairs_cached(key: tuple[int, ...]) -> PosPairSet:
    labels = np.asarray(key, dtype=np.int64)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(labels.size, dtype=bool)
    anchors, positives = np.nonzero(pos_mask)
    neg_lists = [np.flatnonzero(~same[a]) for a in range(labels.size)]
    counts = np.array([neg_lists[a].size for a in anchors], dtype=np.int64)
    if anchors.size and counts.sum() == 0:
        raise NoNegativesError("batch contains a single class; positive pairs have no negatives")
    offsets = np.zeros(anchors.size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    if anchors.size:
        neg_rows = np.concatenate([neg_lists[a] for a in anchors])
    else:
        neg_rows = np.empty(0, dtype=np.int64)
    return PosPairSet(
        _freeze(anchors), _freeze(positives),
        _freeze(neg_rows.astype(np.int64)), _freeze(offsets),
    )


def enumerate_pos_pairs(labels) -> PosPairSet:
    """Every ordered same-class (anchor, positive) pair with all other-class rows as negatives."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return _enumerate_pos_pairs_cached(_canonical_key(labels))


def sample_pk(labels, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a PK batch of dataset row indices, without replacement at both levels.

    Picks ``spec.n_classes`` distinct classes among those with at least
    ``spec.samples_per_class`` rows, then ``samples_per_class`` distinct rows
    from each.  The result is class-block contiguous.  Deterministic given
    the generator state.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < spec.n_classes:
        raise CapacityError(
            f"dataset has {classes.size} classes but the batch needs {spec.n_classes}"
        )
    eligible = classes[counts >= spec.samples_per_class]
    if eligible.size < spec.n_classes:
        raise CapacityError(
            f"only {eligible.size} classes have >= {spec.samples_per_class} samples; "
            f"the batch needs {spec.n_classes}"
        )
    chosen = rng.choice(eligible, size=spec.n_classes, replace=False)
    blocks = []
    for c in chosen:
        rows = np.flatnonzero(labels == c)
        blocks.append(rng.choice(rows, size=spec.samples_per_class, replace=False))
    return np.concatenate(blocks)
