"""Closed forms for Gaussians: Bures-Wasserstein distance, UVP and the W2 barycenter."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch, NoConvergence, NotPositiveDefinite
from ..measures import GaussianMeasure, SampleSet, fit_gaussian


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root through an eigendecomposition; tiny negative eigenvalues are clipped."""
    a = 0.5 * (a + a.T)
    lam, q = np.linalg.eigh(a)
    scale = max(1.0, float(np.max(np.abs(lam))))
    if lam.min() < -1e-10 * scale:
        raise NotPositiveDefinite(f"matrix has eigenvalue {lam.min():.3e}")
    return (q * np.sqrt(np.clip(lam, 0.0, None))) @ q.T


def bures_sq(s1: np.ndarray, s2: np.ndarray) -> float:
    r2 = sqrtm_psd(s2)
    cross = sqrtm_psd(r2 @ s1 @ r2)
    return float(max(np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross), 0.0))


def gaussian_w2sq(g1: GaussianMeasure, g2: GaussianMeasure) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    if g1.dim != g2.dim:
        raise DimensionMismatch(f"dimensions differ: {g1.dim} vs {g2.dim}")
    return float(np.sum((g1.mean - g2.mean) ** 2)) + bures_sq(g1.cov, g2.cov)


def uvp_between(fitted: GaussianMeasure, target: GaussianMeasure) -> float:
    return 100.0 * 2.0 * gaussian_w2sq(fitted, target) / float(np.trace(target.cov))


def bw2_uvp(candidate: SampleSet, target: GaussianMeasure) -> float:
    """BW2-UVP in percent: ``100 * 2 * W2^2(fit(candidate), target) / tr(cov_target)``.

    Moments of the candidate use the unbiased covariance estimator.
    """
    if candidate.dim != target.dim:
        raise DimensionMismatch(f"sample dimension {candidate.dim} vs target {target.dim}")
    return uvp_between(fit_gaussian(candidate), target)


def barycenter_residual(cov: np.ndarray, covs, weights) -> float:
    r = sqrtm_psd(cov)
    mapped = sum(w * sqrtm_psd(r @ c @ r) for c, w in zip(covs, weights))
    return float(np.linalg.norm(cov - mapped))


def gaussian_barycenter_fixed_point(gaussians, weights=None, tol: float = 1e-10, max_iter: int = 1000) -> GaussianMeasure:
    """Unregularized W2 barycenter by the fixed-point covariance iteration.

    ``S <- S^{-1/2} (sum_i w_i (S^{1/2} C_i S^{1/2})^{1/2})^2 S^{-1/2}``, started
    from the weighted mean covariance.  Stops when the fixed-point residual
    ``||S - sum_i w_i (S^{1/2} C_i S^{1/2})^{1/2}||_F`` drops below ``tol``.
    The step is undamped; it falls back to half steps if the residual grows.
    """
    gaussians = list(gaussians)
    if not gaussians:
        raise ValueError("need at least one Gaussian")
    k = len(gaussians)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (k,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be non-negative and sum to 1")
    dims = {g.dim for g in gaussians}
    if len(dims) != 1:
        raise DimensionMismatch(f"Gaussians have dimensions {sorted(dims)}")
    covs = [g.cov for g in gaussians]
    mean = sum(wi * g.mean for wi, g in zip(w, gaussians))
    s = sum(wi * c for wi, c in zip(w, covs))
    damping = 1.0
    res = barycenter_residual(s, covs, w)
    for _ in range(max_iter):
        if res <= tol:
            break
        r = sqrtm_psd(s)
        r_inv = np.linalg.inv(r)
        t = sum(wi * sqrtm_psd(r @ c @ r) for c, wi in zip(covs, w))
        proposal = r_inv @ t @ t @ r_inv
        proposal = 0.5 * (proposal + proposal.T)
        new = (1.0 - damping) * s + damping * proposal
        new_res = barycenter_residual(new, covs, w)
        if new_res > res and damping == 1.0:
            damping = 0.5
            continue
        s, res = new, new_res
    else:
        if res > tol:
            raise NoConvergence(f"fixed point residual {res:.3e} after {max_iter} iterations")
    if res > tol:
        raise NoConvergence(f"fixed point residual {res:.3e} after {max_iter} iterations")
    return GaussianMeasure(mean, 0.5 * (s + s.T))
