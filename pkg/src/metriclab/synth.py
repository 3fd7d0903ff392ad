"""Synthetic datasets on the unit sphere via von Mises-Fisher draws.

Classes get uniformly drawn mean directions; each class spreads into a few
subclusters (vMF around the class mean) and samples concentrate around
their subcluster.  A noise fraction re-draws samples around a wrong class
while keeping the original label, which is what keeps hinge losses from
ever emptying out during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import (
    DegenerateConcentrationError,
    DimensionMismatchError,
    InvalidSpecError,
)


@dataclass(frozen=True)
class VmfParams:
    """Mean direction and concentration of one von Mises-Fisher component."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if mu.size < 2:
            raise DimensionMismatchError(f"direction must have dim >= 2, got {mu.size}")
        if abs(float(np.linalg.norm(mu)) - 1.0) > 1e-9:
            raise ValueError("mu must be a unit vector")
        if not np.isfinite(self.kappa) or self.kappa < 0.0:
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", mu)

    @property
    def dim(self) -> int:
        return self.mu.size


def vmf_density(x, params: VmfParams) -> float:
    """Density C_d(kappa) * exp(kappa * <mu, x>) on the unit sphere.

    C_d(kappa) = kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa)), evaluated
    through the exponentially scaled Bessel function so large kappa cannot
    overflow.  kappa = 0 collapses to the uniform density, the reciprocal
    sphere area.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != params.mu.shape:
        raise DimensionMismatchError(f"x has shape {x.shape}, mu has {params.mu.shape}")
    if abs(float(np.linalg.norm(x)) - 1.0) > 1e-9:
        raise ValueError("x must lie on the unit sphere")
    d = params.dim
    if params.kappa == 0.0:
        return float(math.gamma(d / 2.0) / (2.0 * math.pi ** (d / 2.0)))
    nu = d / 2.0 - 1.0
    # I_nu(k) = ive(nu, k) * e^k, so log C_d absorbs the e^{-k} factor
    log_norm = (
        nu * math.log(params.kappa)
        - (d / 2.0) * math.log(2.0 * math.pi)
        - math.log(float(special.ive(nu, params.kappa)))
        - params.kappa
    )
    return float(math.exp(log_norm + params.kappa * float(params.mu @ x)))


def _uniform_sphere(rng: np.random.Generator, dim: int) -> np.ndarray:
    while True:
        g = rng.standard_normal(dim)
        norm = float(np.linalg.norm(g))
        if norm > 1e-12:
            return g / norm


def _sample_radial(kappa: float, dim: int, rng: np.random.Generator) -> float:
    # rejection scheme with Beta((d-1)/2, (d-1)/2) proposals; the envelope
    # constant b is written in its cancellation-free form
    m = dim - 1
    b = m / (math.sqrt(4.0 * kappa * kappa + m * m) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * math.log(1.0 - x0 * x0)
    while True:
        z = rng.beta(m / 2.0, m / 2.0)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = 1.0 - rng.uniform()  # (0, 1], keeps the log finite
        if kappa * w + m * math.log(1.0 - x0 * w) - c >= math.log(u):
            return w


def sample_vmf(params: VmfParams, rng: np.random.Generator) -> np.ndarray:
    """One draw from the distribution; always returned with unit norm."""
    d = params.dim
    if params.kappa == 0.0:
        return _uniform_sphere(rng, d)
    w = _sample_radial(params.kappa, d, rng)
    while True:
        g = rng.standard_normal(d)
        g -= float(g @ params.mu) * params.mu
        norm = float(np.linalg.norm(g))
        if norm > 1e-12:
            tangent = g / norm
            break
    x = math.sqrt(max(0.0, 1.0 - w * w)) * tangent + w * params.mu
    return x / float(np.linalg.norm(x))


@dataclass(frozen=True)
class DatasetSpec:
    """Layout and concentrations of one synthetic dataset."""

    n_classes: int
    subclusters_per_class: int
    samples_per_subcluster: int
    input_dim: int
    class_kappa: float
    subcluster_kappa: float
    noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "subclusters_per_class", "samples_per_subcluster"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidSpecError(f"{name} must be an integer >= 1, got {v}")
            object.__setattr__(self, name, int(v))
        if int(self.input_dim) != self.input_dim or self.input_dim < 2:
            raise InvalidSpecError(f"input_dim must be an integer >= 2, got {self.input_dim}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        for name in ("class_kappa", "subcluster_kappa"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise InvalidSpecError(f"{name} must be finite and >= 0, got {v}")
        if self.subcluster_kappa < self.class_kappa:
            raise InvalidSpecError(
                "subcluster_kappa must be >= class_kappa (subclusters sit inside classes)"
            )
        if not 0.0 <= self.noise_fraction < 1.0:
            raise InvalidSpecError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}")
        if self.noise_fraction > 0.0 and self.n_classes < 2:
            raise InvalidSpecError("noise needs at least 2 classes to borrow a wrong one from")

    @property
    def n_samples(self) -> int:
        return self.n_classes * self.subclusters_per_class * self.samples_per_subcluster


@dataclass(frozen=True)
class SynthDataset:
    """Feature rows with class labels, subcluster ids, and noise flags."""

    features: np.ndarray
    labels: np.ndarray
    subclusters: np.ndarray
    noise_flags: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionMismatchError(f"features must be 2-D, got {feats.shape}")
        n = feats.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        subs = np.asarray(self.subclusters, dtype=np.int64).reshape(-1)
        flags = np.asarray(self.noise_flags, dtype=bool).reshape(-1)
        if not (labels.size == subs.size == flags.size == n):
            raise DimensionMismatchError("per-row columns must all match the feature count")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subclusters", subs)
        object.__setattr__(self, "noise_flags", flags)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gen_dataset(spec: DatasetSpec) -> SynthDataset:
    """Generate the dataset a spec describes; identical spec, identical bytes.

    Noisy samples are re-drawn around a uniformly chosen *other* class's
    subcluster but keep their original label row, so exactly
    round(noise_fraction * n) rows are mislabelled on purpose.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    class_means = np.stack([_uniform_sphere(rng, d) for _ in range(spec.n_classes)])
    sub_means = np.empty((spec.n_classes, spec.subclusters_per_class, d))
    for c in range(spec.n_classes):
        for j in range(spec.subclusters_per_class):
            sub_means[c, j] = sample_vmf(VmfParams(class_means[c], spec.class_kappa), rng)
    total = spec.n_samples
    features = np.empty((total, d))
    labels = np.empty(total, dtype=np.int64)
    subclusters = np.empty(total, dtype=np.int64)
    row = 0
    for c in range(spec.n_classes):
        for j in range(spec.subclusters_per_class):
            params = VmfParams(sub_means[c, j], spec.subcluster_kappa)
            for _ in range(spec.samples_per_subcluster):
                features[row] = sample_vmf(params, rng)
                labels[row] = c
                subclusters[row] = j
                row += 1
    noise_flags = np.zeros(total, dtype=bool)
    n_noise = int(round(spec.noise_fraction * total))
    if n_noise:
        chosen = rng.choice(total, size=n_noise, replace=False)
        for i in np.sort(chosen):
            wrong = int(rng.integers(spec.n_classes - 1))
            if wrong >= labels[i]:
                wrong += 1
            j = int(rng.integers(spec.subclusters_per_class))
            features[i] = sample_vmf(VmfParams(sub_means[wrong, j], spec.subcluster_kappa), rng)
            noise_flags[i] = True
    return SynthDataset(features, labels, subclusters, noise_flags)


def estimate_kappa(samples) -> float:
    """Concentration estimate kappa = rbar (d - rbar^2) / (1 - rbar^2).

    rbar is the norm of the mean of the unit-norm sample rows.  rbar at the
    numerical floor means no preferred direction (returns 0); rbar
    indistinguishable from 1 means zero dispersion, which has no finite
    estimate.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a 2-D array with at least 2 rows, got shape {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("samples must have unit norm")
    d = X.shape[1]
    rbar = float(np.linalg.norm(X.mean(axis=0)))
    if rbar <= 1e-12:
        return 0.0
    if rbar >= 1.0 - 1e-12:
        raise DegenerateConcentrationError("samples are all but identical; kappa diverges")
    return rbar * (d - rbar * rbar) / (1.0 - rbar * rbar)


def write_dataset_csv(dataset: SynthDataset, path) -> None:
    """CSV with header label,subcluster,noise,f0..f{D-1}; floats keep 17 digits."""
    cols = ",".join(f"f{i}" for i in range(dataset.dim))
    lines = [f"label,subcluster,noise,{cols}"]
    for i in range(dataset.n_samples):
        feats = ",".join(f"{v:.17g}" for v in dataset.features[i])
        lines.append(f"{dataset.labels[i]},{dataset.subclusters[i]},{int(dataset.noise_flags[i])},{feats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_dataset_csv(path) -> SynthDataset:
    text = Path(path).read_text(encoding="ascii").strip().splitlines()
    if not text or not text[0].startswith("label,subcluster,noise,"):
        raise ValueError(f"{path}: missing dataset header")
    rows = [line.split(",") for line in text[1:]]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    subclusters = np.array([int(r[1]) for r in rows], dtype=np.int64)
    flags = np.array([bool(int(r[2])) for r in rows])
    features = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float64)
    return SynthDataset(features, labels, subclusters, flags)
