"""Embedding containers and the distance / similarity kernels every loss shares."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .batching import BatchSpec
from .errors import DegenerateVectorError, DimensionMismatchError

SIM_KINDS = ("cosine", "cosine_over_max")


@dataclass(frozen=True)
class EmbeddingBatch:
    """A B x D block of embeddings with one integer class label per row.

    When ``batch_spec`` is given the rows must form a full PK layout:
    B = N*K with every label occurring exactly K times.  Without a spec any
    labelled collection of rows is accepted, which keeps small hand-built
    batches (and non-rectangular evaluation sets) legal.
    """

    data: np.ndarray
    labels: np.ndarray
    batch_spec: BatchSpec | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatchError(f"embedding data must be 2-D, got shape {data.shape}")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != data.shape[0]:
            raise DimensionMismatchError(
                f"{labels.shape[0]} labels for {data.shape[0]} embedding rows"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding batch contains non-finite entries")
        if self.batch_spec is not None:
            spec = self.batch_spec
            if data.shape[0] != spec.batch_size:
                raise DimensionMismatchError(
                    f"batch has {data.shape[0]} rows, spec wants {spec.batch_size}"
                )
            _, counts = np.unique(labels, return_counts=True)
            if counts.size != spec.n_classes or not np.all(counts == spec.samples_per_class):
                raise DimensionMismatchError(
                    f"labels do not form a [{spec.n_classes}, {spec.samples_per_class}] layout"
                )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TripletView:
    """One (anchor, positive, negative) triple of row indices into a batch."""

    batch: EmbeddingBatch
    anchor_idx: int
    pos_idx: int
    neg_idx: int

    def __post_init__(self):
        labels = self.batch.labels
        if self.anchor_idx == self.pos_idx:
            raise ValueError("anchor and positive must be distinct rows")
        if labels[self.anchor_idx] != labels[self.pos_idx]:
            raise ValueError("positive must carry the anchor's label")
        if labels[self.anchor_idx] == labels[self.neg_idx]:
            raise ValueError("negative must carry a different label")

    @property
    def anchor(self) -> np.ndarray:
        return self.batch.data[self.anchor_idx]

    @property
    def positive(self) -> np.ndarray:
        return self.batch.data[self.pos_idx]

    @property
    def negative(self) -> np.ndarray:
        return self.batch.data[self.neg_idx]

    @property
    def u(self) -> np.ndarray:
        """Anchor minus positive."""
        return self.anchor - self.positive

    @property
    def v(self) -> np.ndarray:
        """Anchor minus negative."""
        return self.anchor - self.negative


@dataclass(frozen=True)
class SimMatrix:
    """Symmetric B x B similarity matrix tagged with the kind that produced it."""

    values: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise DimensionMismatchError(f"similarity matrix must be square, got {vals.shape}")
        if self.kind not in SIM_KINDS:
            raise ValueError(f"kind must be one of {SIM_KINDS}, got {self.kind!r}")
        if not np.allclose(vals, vals.T, rtol=0.0, atol=1e-12):
            raise ValueError("similarity matrix must be symmetric")
        if self.kind == "cosine":
            if vals.size and (vals.min() < -1.0 or vals.max() > 1.0):
                raise ValueError("cosine similarities must lie in [-1, 1]")
            if not np.all(np.diag(vals) == 1.0):
                raise ValueError("cosine self-similarity must equal 1")
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def euclidean_dist(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"shape {x.shape} vs {y.shape}")
    return float(np.linalg.norm(x - y))


def cosine_sim(x, y) -> float:
    """Cosine of the angle between x and y, clamped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"shape {x.shape} vs {y.shape}")
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVectorError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def similarity_matrix(batch: EmbeddingBatch, kind: str = "cosine") -> SimMatrix:
    """Pairwise cosine similarities of all batch rows.

    kind="cosine_over_max" divides every entry by the largest off-diagonal
    similarity, which stretches the scale so the closest non-identical pair
    sits at exactly 1.
    """
    if kind not in SIM_KINDS:
        raise ValueError(f"kind must be one of {SIM_KINDS}, got {kind!r}")
    X = batch.data
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {zero[0]} has zero norm; cosine is undefined")
    unit = X / norms[:, None]
    vals = unit @ unit.T
    # mirror the upper triangle so rounding cannot break symmetry
    vals = np.triu(vals) + np.triu(vals, 1).T
    np.clip(vals, -1.0, 1.0, out=vals)
    np.fill_diagonal(vals, 1.0)
    if kind == "cosine_over_max":
        if batch.size < 2:
            raise ValueError("cosine_over_max needs at least two rows")
        off = vals[~np.eye(batch.size, dtype=bool)]
        peak = float(off.max())
        if peak <= 0.0:
            raise ValueError("cosine_over_max is undefined when no off-diagonal similarity is positive")
        vals = vals / peak
    return SimMatrix(vals, kind)


def write_sim_matrix_csv(sim: SimMatrix, path) -> None:
    """Write the matrix as ``# kind=<kind> B=<n>`` plus one CSV row per matrix row.

    Floats use 17 significant digits, so a read-back reproduces every bit.
    """
    lines = [f"# kind={sim.kind} B={sim.size}"]
    for row in sim.values:
        lines.append(",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_sim_matrix_csv(path) -> SimMatrix:
    text = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not text or not text[0].startswith("# kind="):
        raise ValueError(f"{path}: missing '# kind=... B=...' header")
    fields = text[0][2:].split()
    meta = dict(f.split("=", 1) for f in fields)
    size = int(meta["B"])
    rows = [line.split(",") for line in text[1:]]
    vals = np.array(rows, dtype=np.float64)
    if vals.shape != (size, size):
        raise ValueError(f"{path}: body shape {vals.shape} does not match B={size}")
    return SimMatrix(vals, meta["kind"])
