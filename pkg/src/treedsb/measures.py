"""Sample generators and Gaussian helpers for the leaf marginals.

Toy datasets are scaled to fit inside ``[-2, 2]^2``:

* ``circle``: uniform angle on a circle of radius 1.5.
* ``moons``: two interleaved half circles, centred and scaled by 1.2.
* ``swiss_roll``: spiral ``t (cos t, sin t)`` for ``t`` in ``[1.5 pi, 4.5 pi]``,
  scaled by 0.125.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadDimension,
    DimensionMismatch,
    NotPositiveDefinite,
    TooFewSamples,
    UnknownKind,
    ZeroVariance,
)

CIRCLE_RADIUS = 1.5
MOONS_SCALE = 1.2
SWISS_ROLL_SCALE = 0.125
TOY_KINDS = ("swiss_roll", "circle", "moons")


@dataclass(frozen=True, eq=False)
class SampleSet:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise BadDimension(f"sample array must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sample set contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.count


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        d = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (d, d):
            raise DimensionMismatch(f"mean shape {mean.shape} incompatible with cov shape {cov.shape}")
        if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise NotPositiveDefinite("covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise NotPositiveDefinite("covariance has a non-positive eigenvalue")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gen_toy2d(kind: str, count: int, noise: float = 0.0, seed: int = 0) -> SampleSet:
    if kind not in TOY_KINDS:
        raise UnknownKind(f"unknown toy dataset {kind!r}; expected one of {TOY_KINDS}")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    if kind == "circle":
        theta = rng.uniform(0.0, 2 * np.pi, count)
        x = CIRCLE_RADIUS * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    elif kind == "moons":
        n_outer = count // 2
        t = rng.uniform(0.0, np.pi, count)
        outer = np.stack([np.cos(t[:n_outer]), np.sin(t[:n_outer])], axis=1)
        inner = np.stack([1.0 - np.cos(t[n_outer:]), 0.5 - np.sin(t[n_outer:])], axis=1)
        x = MOONS_SCALE * (np.concatenate([outer, inner]) - np.array([0.5, 0.25]))
    else:
        t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(0.0, 1.0, count))
        x = SWISS_ROLL_SCALE * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return SampleSet(x.reshape(count, 2))


def gen_random_spd(dim: int, cond_max: float = 10.0, scale: float = 1.0, seed: int = 0) -> GaussianMeasure:
    """Zero-mean Gaussian with a random rotation of log-uniform eigenvalues.

    Eigenvalues lie in ``[scale, cond_max * scale]`` so the condition number
    never exceeds ``cond_max``.
    """
    if int(dim) != dim or dim < 1:
        raise BadDimension(f"dimension must be a positive integer, got {dim}")
    if cond_max < 1:
        raise ValueError(f"cond_max must be >= 1, got {cond_max}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    dim = int(dim)
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    lam = scale * np.exp(rng.uniform(0.0, np.log(cond_max), dim))
    cov = (q * lam) @ q.T
    cov = 0.5 * (cov + cov.T)
    return GaussianMeasure(np.zeros(dim), cov)


def sample_gaussian(g: GaussianMeasure, count: int, seed: int = 0) -> SampleSet:
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    try:
        chol = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    z = np.random.default_rng(seed).standard_normal((count, g.dim))
    return SampleSet(g.mean + z @ chol.T)


def reference_gaussian_design(leaf_measures, alpha: float) -> GaussianMeasure:
    """Diagonal Gaussian prior for an internal root.

    Mean is the average of the leaf means; the variance is ``alpha`` times the
    coordinatewise harmonic mean of the leaf variances.
    """
    leaf_measures = list(leaf_measures)
    if not leaf_measures:
        raise ValueError("need at least one leaf measure")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    dims = {g.dim for g in leaf_measures}
    if len(dims) != 1:
        raise DimensionMismatch(f"leaf measures have dimensions {sorted(dims)}")
    means = np.stack([g.mean for g in leaf_measures])
    variances = np.stack([np.diag(g.cov) for g in leaf_measures])
    if np.any(variances <= 0):
        raise ZeroVariance("a leaf measure has zero variance in some coordinate")
    harmonic = 1.0 / np.mean(1.0 / variances, axis=0)
    return GaussianMeasure(means.mean(axis=0), np.diag(alpha * harmonic))


def empirical_moments(s: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (divisor ``M - 1``) covariance."""
    if s.count < 2:
        raise TooFewSamples(f"need at least 2 samples, got {s.count}")
    x = s.data
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (s.count - 1)
    return mean, 0.5 * (cov + cov.T)


def fit_gaussian(s: SampleSet, jitter: float = 0.0) -> GaussianMeasure:
    mean, cov = empirical_moments(s)
    if jitter:
        cov = cov + jitter * np.eye(s.dim)
    return GaussianMeasure(mean, cov)
