"""Forward values and hand-derived gradients for the loss family.

Every loss maps an :class:`~metriclab.core.EmbeddingBatch` to a
:class:`LossResult` whose ``grad`` is the exact derivative of the reduced
scalar with respect to the batch matrix.  No autodiff anywhere: each
gradient is assembled from per-triplet coefficients scattered into a B x B
matrix and pushed through one of three closed-form chain rules (distance,
raw inner product, cosine).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .batching import enumerate_pos_pairs, enumerate_triplets
from .core import EmbeddingBatch, similarity_matrix
from .errors import (
    DegenerateVectorError,
    DimensionMismatchError,
    InvalidConfigError,
    InvalidLabelError,
)

REDUCTIONS = ("mean_over_nonzero", "mean_over_all")
COMBINED_VARIANTS = ("simce", "m_simce")


@dataclass(frozen=True)
class LossConfig:
    """Shared knobs for the loss family.

    reduction applies to the hinge losses: mean_over_nonzero divides by the
    number of triplets with a strictly positive hinge (the batch-all
    convention), mean_over_all by the full triplet count.
    normalize_for_simce switches the contrastive losses from raw inner
    products to cosine scores.  detach_similarity freezes the similarity
    weights of the weighted triplet loss, so no gradient flows through them.
    """

    margin: float = 0.2
    temperature: float = 1.0
    reduction: str = "mean_over_nonzero"
    normalize_for_simce: bool = False
    detach_similarity: bool = False

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0.0:
            raise InvalidConfigError(f"margin must be finite and >= 0, got {self.margin}")
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise InvalidConfigError(f"temperature must be finite and > 0, got {self.temperature}")
        if self.reduction not in REDUCTIONS:
            raise InvalidConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss, its gradient, and the active-triplet counters.

    n_non counts triplets with a strictly positive hinge; losses without a
    hinge report n_non == n_total.  Classifier-head gradients ride along
    when the loss touches a head.
    """

    value: float
    grad: np.ndarray
    n_non: int
    n_total: int
    head_grad_weight: np.ndarray | None = None
    head_grad_bias: np.ndarray | None = None

    def __post_init__(self):
        if not (0 <= self.n_non <= self.n_total):
            raise ValueError(f"n_non={self.n_non} outside [0, n_total={self.n_total}]")
        if not np.isfinite(self.value):
            raise ValueError("loss value is non-finite")
        if not np.all(np.isfinite(self.grad)):
            raise ValueError("loss gradient contains non-finite entries")


@dataclass
class ClassifierHead:
    """Affine map from the embedding space onto class logits."""

    weight: np.ndarray  # (n_classes, dim)
    bias: np.ndarray    # (n_classes,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2:
            raise DimensionMismatchError(f"head weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise DimensionMismatchError(
                f"{self.bias.shape[0]} biases for {self.weight.shape[0]} classes"
            )

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, n_classes: int, dim: int, scale: float = 0.1):
        return cls(rng.standard_normal((n_classes, dim)) * scale, np.zeros(n_classes))

    def logits(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-1] != self.dim:
            raise DimensionMismatchError(
                f"embeddings have dim {data.shape[-1]}, head expects {self.dim}"
            )
        return data @ self.weight.T + self.bias


def weight_from_sim(s):
    """Map similarity s in [-1, 1] to the weight (1 - s) / 2 in [0, 1]."""
    arr = np.asarray(s, dtype=np.float64)
    if np.any(arr < -1.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"similarity outside [-1, 1]: {s!r}")
    out = (1.0 - arr) / 2.0
    return float(out) if np.isscalar(s) or arr.ndim == 0 else out


# ---------------------------------------------------------------------------
# gradient assembly helpers


def _pairwise_dist(X: np.ndarray) -> np.ndarray:
    # explicit differences, not the Gram shortcut: near-identical rows would
    # otherwise lose half the mantissa to cancellation and spoil the
    # finite-difference agreement the analysis layer checks for
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _scatter(size: int, rows: np.ndarray, cols: np.ndarray, weights: np.ndarray) -> np.ndarray:
    flat = rows.astype(np.int64) * size + cols.astype(np.int64)
    return np.bincount(flat, weights=weights, minlength=size * size).reshape(size, size)


def _grad_from_dist(C: np.ndarray, X: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Gradient of sum_ij C_ij * D_ij with D the pairwise-distance matrix.

    Coincident pairs (D_ij == 0) contribute nothing: the subgradient there
    is pinned to zero.
    """
    R = C + C.T
    M = np.divide(R, D, out=np.zeros_like(R), where=D > 0.0)
    return M.sum(axis=1)[:, None] * X - M @ X


def _grad_from_gram(C: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gradient of sum_ij C_ij * <x_i, x_j>."""
    return (C + C.T) @ X


def _grad_from_cos(C: np.ndarray, unit: np.ndarray, S: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Gradient of sum_ij C_ij * S_ij with S the cosine matrix (C diagonal must be zero)."""
    R = C + C.T
    return (R @ unit - (R * S).sum(axis=1)[:, None] * unit) / norms[:, None]


def _denom(reduction: str, n_non: int, n_total: int) -> float:
    if reduction == "mean_over_nonzero":
        return float(max(n_non, 1))
    return float(max(n_total, 1))


def _unit_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {zero[0]} has zero norm; cosine scores are undefined")
    return X / norms[:, None], norms


# ---------------------------------------------------------------------------
# losses


def triplet_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossResult:
    """Batch-all margin triplet loss on Euclidean distances.

    Per triplet: relu(margin + d(a, p) - d(a, n)).
    """
    tri = enumerate_triplets(batch.labels)
    X = batch.data
    D = _pairwise_dist(X)
    a, p, n = tri.anchors, tri.positives, tri.negatives
    h = cfg.margin + D[a, p] - D[a, n]
    active = h > 0.0
    n_non = int(np.count_nonzero(active))
    n_total = len(tri)
    denom = _denom(cfg.reduction, n_non, n_total)
    value = float(h[active].sum() / denom)
    lam = active.astype(np.float64) / denom
    C = _scatter(batch.size, a, p, lam) - _scatter(batch.size, a, n, lam)
    grad = _grad_from_dist(C, X, D)
    return LossResult(value=value, grad=grad, n_non=n_non, n_total=n_total)


def s_triplet_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossResult:
    """Similarity-weighted triplet loss.

    Each distance is scaled by (1 - cos) / 2 of its pair before entering the
    hinge, so nearly-parallel positives stop pulling and nearly-parallel
    negatives push hardest.  Unless cfg.detach_similarity is set, the
    gradient also flows through the cosine weights themselves.
    """
    tri = enumerate_triplets(batch.labels)
    X = batch.data
    D = _pairwise_dist(X)
    S = similarity_matrix(batch).values
    unit, norms = _unit_rows(X)
    a, p, n = tri.anchors, tri.positives, tri.negatives
    w_ap = weight_from_sim(S[a, p])
    w_an = weight_from_sim(S[a, n])
    h = cfg.margin + w_ap * D[a, p] - w_an * D[a, n]
    active = h > 0.0
    n_non = int(np.count_nonzero(active))
    n_total = len(tri)
    denom = _denom(cfg.reduction, n_non, n_total)
    value = float(h[active].sum() / denom)
    lam = active.astype(np.float64) / denom
    Cd = _scatter(batch.size, a, p, lam * w_ap) - _scatter(batch.size, a, n, lam * w_an)
    grad = _grad_from_dist(Cd, X, D)
    if not cfg.detach_similarity:
        # dw/dS = -1/2, with the distances held as multipliers
        Cs = _scatter(batch.size, a, n, 0.5 * lam * D[a, n]) - _scatter(batch.size, a, p, 0.5 * lam * D[a, p])
        grad = grad + _grad_from_cos(Cs, unit, S, norms)
    return LossResult(value=value, grad=grad, n_non=n_non, n_total=n_total)


def _scores(batch: EmbeddingBatch, cfg: LossConfig):
    """Score matrix for the contrastive losses plus what the chain rule needs."""
    X = batch.data
    if cfg.normalize_for_simce:
        unit, norms = _unit_rows(X)
        return unit @ unit.T, unit, norms
    return X @ X.T, None, None


def _score_grad(C, batch, cfg, G, unit, norms):
    if cfg.normalize_for_simce:
        return _grad_from_cos(C, unit, G, norms)
    return _grad_from_gram(C, batch.data)


def simce_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossResult:
    """Two-way softmax cross entropy per triplet on anchor inner products.

    Per triplet: -log(e^{<a,p>/T} / (e^{<a,p>/T} + e^{<a,n>/T})), which is
    softplus((<a,n> - <a,p>) / T), averaged over all triplets.  Every
    triplet contributes, so n_non == n_total.
    """
    tri = enumerate_triplets(batch.labels)
    G, unit, norms = _scores(batch, cfg)
    a, p, n = tri.anchors, tri.positives, tri.negatives
    n_total = len(tri)
    z = (G[a, n] - G[a, p]) / cfg.temperature
    value = float(np.logaddexp(0.0, z).sum() / max(n_total, 1))
    lam = expit(z) / (cfg.temperature * max(n_total, 1))
    C = _scatter(batch.size, a, n, lam) - _scatter(batch.size, a, p, lam)
    grad = _score_grad(C, batch, cfg, G, unit, norms)
    return LossResult(value=value, grad=grad, n_non=n_total, n_total=n_total)


def m_simce_loss(batch: EmbeddingBatch, cfg: LossConfig) -> LossResult:
    """Multi-negative softmax cross entropy per positive pair.

    Per ordered pair (a, p): -log(e^{<a,p>/T} / (e^{<a,p>/T} +
    sum_k e^{<a,n_k>/T})) with every other-class row of the batch as a
    negative, averaged over pairs.  Log-sum-exp is max-shifted, so scores up
    to about 700 in magnitude stay finite.
    """
    pairs = enumerate_pos_pairs(batch.labels)
    G, unit, norms = _scores(batch, cfg)
    n_pairs = len(pairs)
    if n_pairs == 0:
        return LossResult(0.0, np.zeros_like(batch.data), 0, 0)
    counts = np.diff(pairs.neg_offsets)
    flat_anchor = np.repeat(pairs.anchors, counts)
    sp = G[pairs.anchors, pairs.positives] / cfg.temperature
    sn = G[flat_anchor, pairs.neg_rows] / cfg.temperature
    starts = pairs.neg_offsets[:-1]
    shift = np.maximum(sp, np.maximum.reduceat(sn, starts))
    e_sp = np.exp(sp - shift)
    e_sn = np.exp(sn - np.repeat(shift, counts))
    total = e_sp + np.add.reduceat(e_sn, starts)
    value = float((np.log(total) + shift - sp).sum() / n_pairs)
    alpha_p = e_sp / total
    alpha_n = e_sn / np.repeat(total, counts)
    lam_p = (alpha_p - 1.0) / (cfg.temperature * n_pairs)
    lam_n = alpha_n / (cfg.temperature * n_pairs)
    C = _scatter(batch.size, pairs.anchors, pairs.positives, lam_p)
    C += _scatter(batch.size, flat_anchor, pairs.neg_rows, lam_n)
    grad = _score_grad(C, batch, cfg, G, unit, norms)
    return LossResult(value=value, grad=grad, n_non=n_pairs, n_total=n_pairs)


def ce_loss(batch: EmbeddingBatch, head: ClassifierHead) -> LossResult:
    """Softmax cross entropy on head logits, with gradients for the head too."""
    if batch.dim != head.dim:
        raise DimensionMismatchError(f"embeddings have dim {batch.dim}, head expects {head.dim}")
    y = batch.labels
    if np.any(y < 0) or np.any(y >= head.n_classes):
        bad = y[(y < 0) | (y >= head.n_classes)][0]
        raise InvalidLabelError(f"label {bad} outside [0, {head.n_classes})")
    X = batch.data
    logits = head.logits(X)
    shift = logits.max(axis=1, keepdims=True)
    log_z = shift + np.log(np.exp(logits - shift).sum(axis=1, keepdims=True))
    log_prob = logits - log_z
    b = batch.size
    value = float(-log_prob[np.arange(b), y].mean())
    dlogits = np.exp(log_prob)
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    return LossResult(
        value=value,
        grad=dlogits @ head.weight,
        n_non=b,
        n_total=b,
        head_grad_weight=dlogits.T @ X,
        head_grad_bias=dlogits.sum(axis=0),
    )


def combined_loss(batch: EmbeddingBatch, head: ClassifierHead, cfg: LossConfig,
                  variant: str = "simce") -> LossResult:
    """Weighted triplet + classifier cross entropy + one contrastive term.

    variant picks the contrastive term: "simce" (one negative per triplet)
    or "m_simce" (all negatives per positive pair).  All three terms enter
    with unit coefficients; the triplet counters are taken from the hinge
    term, which is the one that goes quiet as training converges.
    """
    if variant not in COMBINED_VARIANTS:
        raise InvalidConfigError(f"variant must be one of {COMBINED_VARIANTS}, got {variant!r}")
    hinge = s_triplet_loss(batch, cfg)
    ce = ce_loss(batch, head)
    contrastive = simce_loss(batch, cfg) if variant == "simce" else m_simce_loss(batch, cfg)
    return LossResult(
        value=hinge.value + ce.value + contrastive.value,
        grad=hinge.grad + ce.grad + contrastive.grad,
        n_non=hinge.n_non,
        n_total=hinge.n_total,
        head_grad_weight=ce.head_grad_weight,
        head_grad_bias=ce.head_grad_bias,
    )
