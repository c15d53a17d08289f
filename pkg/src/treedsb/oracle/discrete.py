"""Tree-structured multi-marginal Sinkhorn on a finite grid.

The reference coupling on ``grid^|V|`` is

    pi0(x) = phi_r(x_r) * prod_{edges (u, v)} exp(-w_uv |x_u - x_v|^2 / eps) / Z

and mIPF rescales it by one leaf marginal at a time.  :class:`TreeSinkhorn`
does this with per-leaf log potentials and sum-product messages, so the full
tensor is never formed.  :func:`dense_mipf` forms it and serves as a brute
force cross-check for small instances.  Everything runs in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import (
    GridMismatch,
    InstanceTooLarge,
    NoConvergence,
    NotTreeFactorized,
    NumericalUnderflow,
)
from ..tree import UndirectedTree, root_at

DENSE_MAX_ENTRIES = 12**5


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridMeasure:
    grid: np.ndarray  # (G,) or (G, D)
    weights: np.ndarray  # (G,)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or grid.shape[0] != w.shape[0]:
            raise GridMismatch(f"{grid.shape[0]} grid points but {w.shape} weights")
        if np.any(w < 0):
            raise ValueError("grid weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"grid weights sum to {w.sum()!r}, not 1")
        grid.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def points(self) -> np.ndarray:
        """Grid points as a ``(G, D)`` array."""
        return self.grid if self.grid.ndim == 2 else self.grid[:, None]


def uniform_grid(low: float, high: float, size: int) -> np.ndarray:
    return np.linspace(low, high, size)


def grid_measure_from_density(grid: np.ndarray, density) -> GridMeasure:
    """Evaluate an unnormalized density on the grid and renormalize."""
    grid = np.asarray(grid, dtype=float)
    vals = np.asarray(density(grid), dtype=float)
    if np.any(vals < 0) or not vals.sum() > 0:
        raise ValueError("density must be non-negative with positive total mass")
    return GridMeasure(grid, vals / vals.sum())


def discretized_gaussian(grid: np.ndarray, mean, cov) -> GridMeasure:
    pts = np.asarray(grid, dtype=float)
    pts2 = pts if pts.ndim == 2 else pts[:, None]
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    diff = pts2 - np.atleast_1d(mean)
    logp = -0.5 * np.einsum("gi,ij,gj->g", diff, np.linalg.inv(cov), diff)
    p = np.exp(logp - logp.max())
    return GridMeasure(pts, p / p.sum())


def _same_grid(a: GridMeasure, b: GridMeasure) -> None:
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise GridMismatch("measures live on different grids")


def discrete_tv(a: GridMeasure, b: GridMeasure) -> float:
    _same_grid(a, b)
    return 0.5 * float(np.abs(a.weights - b.weights).sum())


def discrete_kl(a: GridMeasure, b: GridMeasure) -> float:
    """KL(a | b) with ``0 log 0 = 0``; ``inf`` when ``a`` charges a point ``b`` does not."""
    _same_grid(a, b)
    p, q = a.weights, b.weights
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_log(logp: np.ndarray, logq: np.ndarray) -> float:
    """KL between two normalized log-probability arrays of the same shape."""
    p = np.exp(logp)
    mask = p > 0
    return float(np.sum(p[mask] * (logp[mask] - logq[mask])))


def _entropy_log(logp: np.ndarray) -> float:
    p = np.exp(logp)
    mask = p > 0
    return float(-np.sum(p[mask] * logp[mask]))


# --------------------------------------------------------------------------
# kernels and potentials
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TreeKernelSet:
    """Log kernels ``-w |x - y|^2 / eps`` per directed edge and the root reference."""

    grid: np.ndarray
    epsilon: float
    tree: UndirectedTree
    root: int
    log_kernels: dict  # (u, v) -> (G, G), rows indexed by x_u
    log_phi_root: np.ndarray  # (G,), normalized

    @property
    def size(self) -> int:
        return self.log_phi_root.shape[0]

    def kernel(self, u: int, v: int) -> np.ndarray:
        return np.exp(self.log_kernels[(u, v)])


def build_kernels(grid, tree: UndirectedTree, epsilon: float, root: int, phi_root) -> TreeKernelSet:
    """``phi_root`` is a :class:`GridMeasure` or a non-negative vector on the grid."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    grid = np.asarray(grid, dtype=float)
    pts = grid if grid.ndim == 2 else grid[:, None]
    sq = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    logk = {}
    for u, v, w in tree.edges:
        mat = -w * sq / epsilon
        logk[(u, v)] = mat
        logk[(v, u)] = mat.T
    if isinstance(phi_root, GridMeasure):
        if phi_root.grid.shape != grid.shape or not np.array_equal(phi_root.grid, grid):
            raise GridMismatch("root reference lives on another grid")
        phi = phi_root.weights
    else:
        phi = np.asarray(phi_root, dtype=float)
    if phi.shape != (pts.shape[0],) or np.any(phi < 0) or not phi.sum() > 0:
        raise ValueError("root reference must be a non-negative vector on the grid")
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi / phi.sum())
    tree._check_node(root)
    return TreeKernelSet(grid, float(epsilon), tree, int(root), logk, log_phi)


@dataclass
class PotentialSet:
    """Per-leaf log potentials ``psi_i``; iteration count ``n`` and last leaf ``q_n``."""

    psi: dict[int, np.ndarray]
    n: int = 0
    q_n: Optional[int] = None

    def copy(self) -> "PotentialSet":
        return PotentialSet({k: v.copy() for k, v in self.psi.items()}, self.n, self.q_n)


def default_order(tree: UndirectedTree, root: int) -> tuple[int, ...]:
    """Leaves in ascending id with the root (when it is a leaf) moved last."""
    leaves = [v for v in tree.leaves if v != root]
    if root in tree.leaves:
        leaves.append(root)
    return tuple(leaves)


def _check_marginals(kernels: TreeKernelSet, tree: UndirectedTree, leaf_marginals) -> dict[int, np.ndarray]:
    if set(leaf_marginals) != set(tree.leaves):
        raise ValueError(f"need marginals for leaves {sorted(tree.leaves)}, got {sorted(leaf_marginals)}")
    out = {}
    for leaf, m in leaf_marginals.items():
        if m.grid.shape != kernels.grid.shape or not np.array_equal(m.grid, kernels.grid):
            raise GridMismatch(f"leaf {leaf} lives on another grid")
        out[leaf] = m.weights
    return out


# --------------------------------------------------------------------------
# message passing
# --------------------------------------------------------------------------


class TreeSinkhorn:
    """mIPF with potentials; node marginals come from two-pass sum-product."""

    def __init__(self, kernels: TreeKernelSet, tree: UndirectedTree, leaf_marginals, order=None):
        self.kernels = kernels
        self.tree = tree
        self.targets = _check_marginals(kernels, tree, leaf_marginals)
        with np.errstate(divide="ignore"):
            self.log_targets = {k: np.log(v) for k, v in self.targets.items()}
        self.grid = kernels.grid
        self.order = tuple(order) if order is not None else default_order(tree, kernels.root)
        if sorted(self.order) != sorted(tree.leaves):
            raise ValueError("order must be a permutation of the leaves")
        G = kernels.size
        self.potentials = PotentialSet({leaf: np.zeros(G) for leaf in tree.leaves})
        self._dtree = root_at(tree, kernels.root)

    # unary log factors: root reference and leaf potentials
    def _unary(self, v: int) -> np.ndarray:
        h = np.zeros(self.kernels.size)
        if v == self.kernels.root:
            h = h + self.kernels.log_phi_root
        if v in self.potentials.psi:
            h = h + self.potentials.psi[v]
        return h

    def _messages(self):
        dt = self._dtree
        logk = self.kernels.log_kernels
        up: dict[int, np.ndarray] = {}  # child -> message to its parent, over x_parent
        for p, c in reversed(dt.directed_edges):
            belief = self._unary(c) + sum((up[g] for g in dt.children(c)), np.zeros(self.kernels.size))
            up[c] = logsumexp(logk[(p, c)] + belief[None, :], axis=1)
        down: dict[int, np.ndarray] = {}  # child -> message from its parent, over x_child
        for p, c in dt.directed_edges:
            belief = self._unary(p) + sum((up[s] for s in dt.children(p) if s != c), np.zeros(self.kernels.size))
            if p != dt.root:
                belief = belief + down[p]
            down[c] = logsumexp(logk[(c, p)] + belief[None, :], axis=1)
        return up, down

    def log_node_marginals(self) -> dict[int, np.ndarray]:
        up, down = self._messages()
        dt = self._dtree
        out = {}
        for v in range(self.tree.node_count):
            b = self._unary(v) + sum((up[c] for c in dt.children(v)), np.zeros(self.kernels.size))
            if v != dt.root:
                b = b + down[v]
            out[v] = b - logsumexp(b)
        return out

    def log_edge_marginal(self, u: int, v: int) -> np.ndarray:
        """Joint log marginal of ``(x_u, x_v)`` for an edge, rows indexed by ``x_u``."""
        up, down = self._messages()
        dt = self._dtree
        p, c = (u, v) if dt.parent(v) == u else (v, u)
        if dt.parent(c) != p:
            raise ValueError(f"{{{u},{v}}} is not an edge")
        bp = self._unary(p) + sum((up[s] for s in dt.children(p) if s != c), np.zeros(self.kernels.size))
        if p != dt.root:
            bp = bp + down[p]
        bc = self._unary(c) + sum((up[g] for g in dt.children(c)), np.zeros(self.kernels.size))
        joint = bp[:, None] + self.kernels.log_kernels[(p, c)] + bc[None, :]
        joint = joint - logsumexp(joint)
        return joint if (p, c) == (u, v) else joint.T

    def node_marginals(self) -> dict[int, GridMeasure]:
        return {v: GridMeasure(self.grid, _normalized(np.exp(lm))) for v, lm in self.log_node_marginals().items()}

    def step(self) -> int:
        """One mIPF iteration; returns the leaf it fitted."""
        leaf = self.order[self.potentials.n % len(self.order)]
        cur = self.log_node_marginals()[leaf]
        target = self.log_targets[leaf]
        bad = np.isfinite(target) & ~np.isfinite(cur)
        if np.any(bad):
            raise NumericalUnderflow(f"leaf {leaf} marginal vanished where the target has mass")
        with np.errstate(invalid="ignore"):
            delta = np.where(np.isfinite(target), target - cur, -np.inf)
        self.potentials.psi[leaf] = self.potentials.psi[leaf] + delta
        self.potentials.n += 1
        self.potentials.q_n = leaf
        return leaf

    def leaf_tv(self) -> float:
        lm = self.log_node_marginals()
        return max(0.5 * float(np.abs(np.exp(lm[i]) - self.targets[i]).sum()) for i in self.tree.leaves)


def _normalized(p: np.ndarray) -> np.ndarray:
    return p / p.sum()


def tree_sinkhorn_mp(kernels: TreeKernelSet, tree: UndirectedTree, leaf_marginals, tol: float = 1e-10, max_iter: int = 10000, order=None):
    """Run mIPF to convergence; returns ``(PotentialSet, node -> GridMeasure)``.

    Convergence is checked after every full cycle: the largest TV between a
    leaf marginal and its target must be at most ``tol``.  ``max_iter``
    counts single-leaf updates.
    """
    solver = TreeSinkhorn(kernels, tree, leaf_marginals, order)
    K = len(solver.order)
    tv = solver.leaf_tv()
    while tv > tol:
        if solver.potentials.n >= max_iter:
            raise NoConvergence(f"leaf TV {tv:.3e} after {solver.potentials.n} iterations")
        for _ in range(K):
            solver.step()
        tv = solver.leaf_tv()
    return solver.potentials, solver.node_marginals()


# --------------------------------------------------------------------------
# dense brute force
# --------------------------------------------------------------------------


def reference_log_tensor(kernels: TreeKernelSet, tree: UndirectedTree, max_entries: int = DENSE_MAX_ENTRIES) -> np.ndarray:
    """Normalized ``log pi0`` over ``grid^|V|``; axis ``v`` is node ``v``."""
    G, n = kernels.size, tree.node_count
    if G**n > max_entries:
        raise InstanceTooLarge(f"{G}^{n} = {G**n} entries exceeds the cap {max_entries}")
    logp = np.zeros((G,) * n)
    shape = [1] * n
    shape[kernels.root] = G
    logp = logp + kernels.log_phi_root.reshape(shape)
    for u, v, _ in tree.edges:
        shape = [1] * n
        shape[u] = G
        shape[v] = G
        mat = kernels.log_kernels[(u, v)] if u < v else kernels.log_kernels[(u, v)].T
        logp = logp + mat.reshape(shape)
    return logp - logsumexp(logp)


def log_marginal(logp: np.ndarray, axes) -> np.ndarray:
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    others = tuple(a for a in range(logp.ndim) if a not in axes)
    out = logsumexp(logp, axis=others)
    if len(axes) == 2 and axes[0] > axes[1]:
        out = out.T
    return out


@dataclass
class DenseMipfResult:
    log_reference: np.ndarray
    log_couplings: list = field(default_factory=list)  # iterates pi^1..pi^n (or only the last)
    kl_increments: list = field(default_factory=list)  # KL(pi^n | pi^{n-1})
    leaf_tv: list = field(default_factory=list)
    order: tuple = ()

    @property
    def final(self) -> np.ndarray:
        return self.log_couplings[-1] if self.log_couplings else self.log_reference

    def node_marginals(self, k: int = -1) -> dict[int, np.ndarray]:
        logp = self.log_couplings[k] if self.log_couplings else self.log_reference
        return {v: np.exp(log_marginal(logp, v)) for v in range(logp.ndim)}


def dense_mipf(kernels: TreeKernelSet, tree: UndirectedTree, leaf_marginals, n_iterations: int, order=None, keep: str = "all", max_entries: int = DENSE_MAX_ENTRIES) -> DenseMipfResult:
    """mIPF on the full coupling tensor.

    Iteration ``n`` (1-based) rescales ``pi^{n-1}`` so its marginal at leaf
    ``order[(n - 1) mod K]`` equals the target.  ``keep`` is ``"all"`` to keep
    every iterate or ``"last"`` to keep only the final one.
    """
    targets = _check_marginals(kernels, tree, leaf_marginals)
    order = tuple(order) if order is not None else default_order(tree, kernels.root)
    logp = reference_log_tensor(kernels, tree, max_entries)
    res = DenseMipfResult(logp, order=order)
    n = tree.node_count
    with np.errstate(divide="ignore"):
        log_targets = {k: np.log(v) for k, v in targets.items()}
    for it in range(n_iterations):
        leaf = order[it % len(order)]
        cur = log_marginal(logp, leaf)
        with np.errstate(invalid="ignore"):
            delta = np.where(np.isfinite(log_targets[leaf]), log_targets[leaf] - cur, -np.inf)
        shape = [1] * n
        shape[leaf] = -1
        new = logp + delta.reshape(shape)
        new = new - logsumexp(new)
        res.kl_increments.append(_kl_log(new, logp))
        logp = new
        res.leaf_tv.append(max(0.5 * float(np.abs(np.exp(log_marginal(logp, i)) - targets[i]).sum()) for i in tree.leaves))
        if keep == "all":
            res.log_couplings.append(logp)
    if keep != "all" and n_iterations:
        res.log_couplings.append(logp)
    return res


def kl_log_tensors(logp: np.ndarray, logq: np.ndarray) -> float:
    """KL between two normalized log tensors."""
    return _kl_log(logp, logq)


# --------------------------------------------------------------------------
# Wasserstein propagation decomposition
# --------------------------------------------------------------------------


def tree_factorization_residual(logp: np.ndarray, tree: UndirectedTree, root: int) -> float:
    """Max |log pi - (log pi_r + sum log pi_pc - sum card(C_v) log pi_v)| over the support."""
    dt = root_at(tree, root)
    n = logp.ndim
    recon = np.zeros_like(logp)
    node = {v: log_marginal(logp, v) for v in range(n)}

    def bcast(arr, axes):
        shape = [1] * n
        for a in axes:
            shape[a] = logp.shape[a]
        return arr.reshape(shape)

    recon = recon + bcast(node[root], [root])
    for p, c in dt.directed_edges:
        pair = log_marginal(logp, (min(p, c), max(p, c)))
        recon = recon + bcast(pair, [min(p, c), max(p, c)]) - bcast(node[p], [p])
    mask = np.isfinite(logp)
    if not np.all(np.isfinite(recon[mask])):
        return float("inf")
    return float(np.max(np.abs(logp[mask] - recon[mask])))


def wp_objective_check(coupling: np.ndarray, kernels: TreeKernelSet, tree: UndirectedTree, is_log: bool = True, factor_tol: float = 1e-8):
    """Both sides of the Wasserstein-propagation decomposition of ``eps * KL(pi | pi0)``.

    ``rhs = sum_edges [w E|X_u - X_v|^2 - eps H(pi_uv)] + eps sum_v card(C_v) H(pi_v)
    + eps KL(pi_r | phi_r) + eps log Z``, with children ``C_v`` taken in the
    tree rooted at the kernel root and ``Z`` the normalizer of ``pi0``.
    Returns ``(lhs, rhs)``.
    """
    with np.errstate(divide="ignore"):
        logp = np.asarray(coupling, dtype=float) if is_log else np.log(np.asarray(coupling, dtype=float))
    logp = logp - logsumexp(logp)
    root = kernels.root
    resid = tree_factorization_residual(logp, tree, root)
    if not resid <= factor_tol:
        raise NotTreeFactorized(f"factorization residual {resid:.3e} exceeds {factor_tol:.1e}")
    eps = kernels.epsilon
    log_ref = reference_log_tensor(kernels, tree, max_entries=logp.size)
    lhs = eps * _kl_log(logp, log_ref)

    # log Z of the unnormalized reference
    n = tree.node_count
    G = kernels.size
    raw = np.zeros((G,) * n)
    shape = [1] * n
    shape[root] = G
    raw = raw + kernels.log_phi_root.reshape(shape)
    for u, v, _ in tree.edges:
        s = [1] * n
        s[u] = G
        s[v] = G
        raw = raw + (kernels.log_kernels[(u, v)] if u < v else kernels.log_kernels[(u, v)].T).reshape(s)
    log_z = float(logsumexp(raw))

    pts = np.asarray(kernels.grid, dtype=float)
    pts = pts if pts.ndim == 2 else pts[:, None]
    sq = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    dt = root_at(tree, root)
    rhs = 0.0
    for u, v, w in tree.edges:
        pair = log_marginal(logp, (u, v))
        rhs += w * float(np.sum(np.exp(pair) * sq)) - eps * _entropy_log(pair)
    for v in range(n):
        card = len(dt.children(v))
        if card:
            rhs += eps * card * _entropy_log(log_marginal(logp, v))
    rhs += eps * _kl_log(log_marginal(logp, root), kernels.log_phi_root)
    rhs += eps * log_z
    return lhs, rhs


# --------------------------------------------------------------------------
# classical two-marginal Sinkhorn
# --------------------------------------------------------------------------


def sinkhorn_two_marginal(kernel: np.ndarray, a: np.ndarray, b: np.ndarray, tol: float = 1e-14, max_iter: int = 100000) -> np.ndarray:
    """Plain matrix scaling ``diag(u) K diag(v)`` with marginals ``a`` and ``b``."""
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(max_iter):
        u = a / (kernel @ v)
        v = b / (kernel.T @ u)
        plan = u[:, None] * kernel * v[None, :]
        if np.abs(plan.sum(axis=1) - a).sum() < tol:
            return plan
    raise NoConvergence("two-marginal Sinkhorn did not converge")
