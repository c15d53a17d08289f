"""Metrics computed on engine outputs: barycenter UVP, cross-leaf consistency, leaf recovery."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .engine import EdgeModels, IpfState, barycenter_samples, derive_seed, sample_tree
from .errors import NotStarTree
from .measures import fit_gaussian
from .oracle.gaussian import bw2_uvp, gaussian_barycenter_fixed_point, uvp_between


def oracle_barycenter(tree, leaf_gaussians):
    """Fixed-point barycenter of the exact leaf Gaussians with the tree's edge weights."""
    center = tree.star_center
    if center is None:
        raise NotStarTree("barycenter oracle needs a star-shaped tree")
    leaves = sorted(tree.leaves)
    gs = [leaf_gaussians.get(i) for i in leaves]
    if any(g is None for g in gs):
        raise ValueError("all leaves must be Gaussian")
    w = np.array([tree.weight(center, i) for i in leaves])
    return gaussian_barycenter_fixed_point(gs, w / w.sum())


def barycenter_uvp_evaluator(state: IpfState, count: int = 4000):
    """Callback for :func:`run_cycles` adding ``uvp`` of center samples from the leaf just fitted."""
    target = oracle_barycenter(state.tree, state.leaf_gaussians)

    def evaluate(models: EdgeModels, st: IpfState) -> dict:
        n = st.n - 1
        leaf = st.target_leaf(n)
        samples = barycenter_samples(models, st, leaf, count, derive_seed(st.config.seed, 23, n))
        return {"uvp": bw2_uvp(samples, target)}

    return evaluate


def best_uvp(metrics) -> float:
    vals = [r["uvp"] for r in metrics if r.get("uvp") is not None]
    return min(vals) if vals else float("nan")


def center_consistency(models: EdgeModels, state: IpfState, count: int, seed: int) -> dict:
    """Pairwise UVP between Gaussian fits of center samples diffused from different leaves.

    The pair's second fit serves as the reference in the UVP normalization;
    the largest of both orders is reported.
    """
    center = state.tree.star_center
    if center is None:
        raise NotStarTree("consistency check needs a star-shaped tree")
    fits = {
        leaf: fit_gaussian(barycenter_samples(models, state, leaf, count, derive_seed(seed, leaf)))
        for leaf in sorted(state.tree.leaves)
    }
    out = {}
    for a, b in combinations(sorted(fits), 2):
        out[(a, b)] = max(uvp_between(fits[a], fits[b]), uvp_between(fits[b], fits[a]))
    return out


def leaf_recovery(models: EdgeModels, state: IpfState, count: int, seed: int) -> dict:
    """UVP of each leaf reconstructed from every other start leaf, against that leaf's data moments."""
    out = {}
    leaves = sorted(state.tree.leaves)
    data_fit = {i: fit_gaussian(state.leaf_data[i]) for i in leaves}
    for start in leaves:
        samples = sample_tree(models, state, start, count, derive_seed(seed, start))
        for i in leaves:
            if i != start:
                out[(start, i)] = bw2_uvp(samples[i], data_fit[i])
    return out
