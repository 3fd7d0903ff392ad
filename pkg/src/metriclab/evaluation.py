"""Retrieval accuracy and embedding-geometry statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .core import EmbeddingBatch, similarity_matrix, write_sim_matrix_csv
from .errors import (
    DegenerateConcentrationError,
    DegenerateVectorError,
    DimensionMismatchError,
)
from .synth import estimate_kappa

METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class GalleryProbeSplit:
    """Held-out retrieval split: probes query, the gallery answers."""

    gallery: np.ndarray
    gallery_labels: np.ndarray
    probe: np.ndarray
    probe_labels: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        gallery = np.asarray(self.gallery, dtype=np.float64)
        probe = np.asarray(self.probe, dtype=np.float64)
        g_labels = np.asarray(self.gallery_labels, dtype=np.int64).reshape(-1)
        p_labels = np.asarray(self.probe_labels, dtype=np.int64).reshape(-1)
        if gallery.ndim != 2 or probe.ndim != 2:
            raise DimensionMismatchError("gallery and probe must be 2-D")
        if gallery.shape[0] == 0 or probe.shape[0] == 0:
            raise ValueError("gallery and probe must both be non-empty")
        if gallery.shape[1] != probe.shape[1]:
            raise DimensionMismatchError(
                f"gallery dim {gallery.shape[1]} vs probe dim {probe.shape[1]}"
            )
        if g_labels.size != gallery.shape[0] or p_labels.size != probe.shape[0]:
            raise DimensionMismatchError("label counts must match row counts")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        object.__setattr__(self, "gallery", gallery)
        object.__setattr__(self, "probe", probe)
        object.__setattr__(self, "gallery_labels", g_labels)
        object.__setattr__(self, "probe_labels", p_labels)


@dataclass(frozen=True)
class GeometryReport:
    """Spread statistics of an embedded set."""

    uniformity: float
    kappa_hat: float
    intra_class_dist: float
    inter_class_dist: float
    inter_intra_ratio: float
    degenerate_classes: tuple[int, ...] = ()

    def write_json(self, path) -> None:
        payload = asdict(self)
        payload["degenerate_classes"] = list(self.degenerate_classes)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="ascii")


def rank1(split: GalleryProbeSplit) -> float:
    """Fraction of probes whose nearest gallery row shares their label.

    Ties go to the lowest gallery index, which argmin/argmax already
    guarantee; euclidean takes the closest row, cosine the most aligned.
    """
    if split.metric == "euclidean":
        diff = split.probe[:, None, :] - split.gallery[None, :, :]
        scores = np.einsum("ijk,ijk->ij", diff, diff)
        nearest = scores.argmin(axis=1)
    else:
        g_norms = np.linalg.norm(split.gallery, axis=1)
        p_norms = np.linalg.norm(split.probe, axis=1)
        if np.any(g_norms == 0.0) or np.any(p_norms == 0.0):
            raise DegenerateVectorError("cosine retrieval is undefined for zero-norm rows")
        sims = (split.probe / p_norms[:, None]) @ (split.gallery / g_norms[:, None]).T
        nearest = sims.argmax(axis=1)
    return float(np.mean(split.gallery_labels[nearest] == split.probe_labels))


def uniformity(embeddings, t: float = 2.0, block_size: int = 1024) -> float:
    """log of the mean Gaussian-kernel value over all ordered pairs i != j.

    Rows are L2-normalized first, so the statistic only sees directions.
    More negative means the directions cover the sphere more evenly;
    an antipodal pair bottoms out at -4t.  Row blocks keep the memory flat
    for tens of thousands of rows.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need at least two embedding rows, got shape {X.shape}")
    if t <= 0.0:
        raise ValueError(f"t must be > 0, got {t}")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {zero[0]} has zero norm and no direction")
    unit = X / norms[:, None]
    n = unit.shape[0]
    total = 0.0
    for start in range(0, n, block_size):
        block = unit[start:start + block_size]
        # ||zi - zj||^2 = 2 - 2 <zi, zj> on the sphere
        sq = np.clip(2.0 - 2.0 * (block @ unit.T), 0.0, None)
        total += float(np.exp(-t * sq).sum())
    total -= n  # drop the i == j kernel values, each exactly 1
    return float(np.log(total / (n * (n - 1))))


@dataclass(frozen=True)
class VarianceStats:
    """Mean pairwise distances within and across classes."""

    intra_class_dist: float
    inter_class_dist: float
    inter_intra_ratio: float
    degenerate_classes: tuple[int, ...]


def variance_ratio(embeddings, labels) -> VarianceStats:
    """Mean intra-class vs inter-class pairwise Euclidean distance.

    Classes whose members are all mutually coincident are reported as
    degenerate rather than silently shrinking the intra mean to zero first.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DimensionMismatchError("embeddings and labels disagree")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("variance ratio needs at least two classes")
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    same = y[:, None] == y[None, :]
    off_diag = ~np.eye(y.size, dtype=bool)
    intra_mask = same & off_diag
    if not intra_mask.any():
        raise ValueError("no class has two members; intra-class distance is undefined")
    intra = float(D[intra_mask].mean())
    inter = float(D[~same].mean())
    degenerate = []
    for c in classes:
        rows = y == c
        mask = intra_mask & rows[:, None] & rows[None, :]
        if mask.any() and not D[mask].any():
            degenerate.append(int(c))
    ratio = float("inf") if intra == 0.0 else inter / intra
    return VarianceStats(intra, inter, ratio, tuple(degenerate))


def build_geometry_report(embeddings, labels, t: float = 2.0) -> GeometryReport:
    """Bundle uniformity, the concentration estimate, and the distance ratio."""
    X = np.asarray(embeddings, dtype=np.float64)
    stats = variance_ratio(X, labels)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {zero[0]} has zero norm and no direction")
    try:
        kappa = estimate_kappa(X / norms[:, None])
    except DegenerateConcentrationError:
        kappa = float("inf")  # fully collapsed embeddings
    return GeometryReport(
        uniformity=uniformity(X, t),
        kappa_hat=kappa,
        intra_class_dist=stats.intra_class_dist,
        inter_class_dist=stats.inter_class_dist,
        inter_intra_ratio=stats.inter_intra_ratio,
        degenerate_classes=stats.degenerate_classes,
    )


def snapshot_sim_matrix(batch: EmbeddingBatch, path, kind: str = "cosine"):
    """Write the batch's similarity matrix with rows grouped by class.

    The row order inside each class keeps the original relative order, so a
    PK-sampled batch lands as contiguous K x K diagonal blocks.
    """
    order = np.argsort(batch.labels, kind="stable")
    grouped = EmbeddingBatch(batch.data[order], batch.labels[order], batch.batch_spec)
    sim = similarity_matrix(grouped, kind)
    try:
        write_sim_matrix_csv(sim, path)
    except OSError as exc:
        raise OSError(f"could not write similarity snapshot to {path}: {exc}") from exc
    return sim
