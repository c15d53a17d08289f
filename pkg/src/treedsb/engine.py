"""TreeDSB training loop: multi-marginal IPF on a tree with one drift network per directed edge.

Iteration ``n`` walks the path from the previously constrained leaf (the root
at ``n = 0``) to the next leaf of the current cycle.  On every edge ``(a, b)``
of that path it simulates the forward dynamics of network ``(a, b)`` and fits
network ``(b, a)`` to their time reversal with the mean-matching loss.
Networks off the path are left untouched.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .drift_net import (
    AdamState,
    DriftNetParams,
    MeanMatchBatch,
    adam_step,
    backprop_grads,
    init_params,
    net_forward,
)
from .errors import (
    ConfigInvalid,
    EmptyDataset,
    NonFinite,
    NotStarTree,
    RootIsLeaf,
    TrainingDiverged,
    UnknownLeaf,
)
from .measures import (
    GaussianMeasure,
    SampleSet,
    fit_gaussian,
    gen_random_spd,
    gen_toy2d,
    reference_gaussian_design,
    sample_gaussian,
)
from .sde import TimeSchedule, em_forward, make_schedule
from .tree import UndirectedTree, horizon_time, leaf_path, root_at

log = logging.getLogger(__name__)

Edge = tuple[int, int]


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) % 2**63 for k in keys]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class LeafSpec:
    kind: str = "gaussian"  # gaussian | swiss_roll | circle | moons
    count: int = 10000
    noise: float = 0.05
    seed: int = 0
    dim: int = 2
    cond_max: float = 10.0
    scale: float = 1.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 512
    iters_per_ipf: int = 2000
    activation: str = "silu"
    refresh_every: int = 500
    n_traj: int = 4096
    beta1: float = 0.9
    beta2: float = 0.999
    dtype: str = "float32"


@dataclass
class EvalConfig:
    samples: int = 4000
    uvp: bool = False


@dataclass
class ExperimentConfig:
    tree: UndirectedTree
    leaves: dict[int, LeafSpec]
    epsilon: float = 0.1
    root_mode: str = "leaf"
    root_node: Optional[int] = None
    alpha: float = 1.0
    schedule_steps: int = 50
    gamma0: float = 1e-5
    cycles: int = 10
    seed: int = 0
    name: str = "treedsb"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def n_leaves(self) -> int:
        return len(self.tree.leaves)

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ConfigInvalid(f"epsilon must be positive, got {self.epsilon}")
        leaves = set(self.tree.leaves)
        if set(self.leaves) != leaves:
            raise ConfigInvalid(f"leaf datasets given for {sorted(self.leaves)}, tree leaves are {sorted(leaves)}")
        dims = {spec.dim if spec.kind == "gaussian" else 2 for spec in self.leaves.values()}
        if len(dims) != 1:
            raise ConfigInvalid(f"leaf datasets have mixed dimensions {sorted(dims)}")
        if self.root_mode not in ("leaf", "internal"):
            raise ConfigInvalid(f"root mode must be 'leaf' or 'internal', got {self.root_mode!r}")
        if self.root_node is None:
            raise ConfigInvalid("root node not set")
        if not 0 <= self.root_node < self.tree.node_count:
            raise ConfigInvalid(f"root node {self.root_node} is not in the tree")
        is_leaf = self.root_node in leaves
        if self.root_mode == "leaf" and not is_leaf:
            raise ConfigInvalid(f"root mode 'leaf' but node {self.root_node} is internal")
        if self.root_mode == "internal" and is_leaf:
            raise ConfigInvalid(f"root mode 'internal' but node {self.root_node} is a leaf")
        if not self.alpha > 0:
            raise ConfigInvalid(f"alpha must be positive, got {self.alpha}")
        if self.cycles < 1:
            raise ConfigInvalid("need at least one cycle")
        t = self.train
        if t.batch < 1 or t.iters_per_ipf < 0 or t.refresh_every < 1 or t.n_traj < 1:
            raise ConfigInvalid("training sizes must be positive")
        if t.dtype not in ("float32", "float64"):
            raise ConfigInvalid(f"train.dtype must be float32 or float64, got {t.dtype!r}")
        for u, v, w in self.tree.edges:
            try:
                make_schedule(self.schedule_steps, self.gamma0, horizon_time(self.epsilon, w))
            except ValueError as exc:
                raise ConfigInvalid(f"edge {{{u},{v}}}: {exc}") from None

    @property
    def dim(self) -> int:
        spec = next(iter(self.leaves.values()))
        return spec.dim if spec.kind == "gaussian" else 2


def make_leaf_data(spec: LeafSpec) -> tuple[SampleSet, Optional[GaussianMeasure]]:
    """Dataset for one leaf, plus the exact Gaussian when the leaf is Gaussian."""
    if spec.kind == "gaussian":
        g = gen_random_spd(spec.dim, spec.cond_max, spec.scale, spec.seed)
        return sample_gaussian(g, spec.count, derive_seed(spec.seed, 1)), g
    return gen_toy2d(spec.kind, spec.count, spec.noise, spec.seed), None


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class EdgeModel:
    params: DriftNetParams
    adam: AdamState


class EdgeModels(dict):
    """Map directed edge ``(u, v)`` to the network driving the diffusion from ``u`` to ``v``."""

    def check(self, tree: UndirectedTree) -> None:
        expected = {(u, v) for u, v, _ in tree.edges} | {(v, u) for u, v, _ in tree.edges}
        if set(self) != expected:
            raise ConfigInvalid("edge models do not cover both directions of every edge")


@dataclass
class IpfState:
    config: ExperimentConfig
    schedules: dict[frozenset, TimeSchedule]
    leaf_data: dict[int, SampleSet]
    leaf_gaussians: dict[int, Optional[GaussianMeasure]]
    root_samples: SampleSet
    mu0: Optional[GaussianMeasure] = None
    n: int = 0
    orders: list[tuple[int, ...]] = field(default_factory=list)
    node_cache: dict[int, SampleSet] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)

    @property
    def tree(self) -> UndirectedTree:
        return self.config.tree

    @property
    def K(self) -> int:
        return self.config.n_leaves

    def schedule(self, u: int, v: int) -> TimeSchedule:
        return self.schedules[frozenset((u, v))]

    def leaf_order(self, cycle: int) -> tuple[int, ...]:
        while len(self.orders) <= cycle:
            self.orders.append(self._draw_order(len(self.orders)))
        return self.orders[cycle]

    def _draw_order(self, cycle: int) -> tuple[int, ...]:
        cfg = self.config
        rng = np.random.default_rng(derive_seed(cfg.seed, 11, cycle))
        leaves = list(self.tree.leaves)
        if cycle == 0 and cfg.root_mode == "leaf":
            others = [v for v in leaves if v != cfg.root_node]
            return tuple(int(v) for v in rng.permutation(others)) + (cfg.root_node,)
        order = [int(v) for v in rng.permutation(leaves)]
        prev_last = self.leaf_order(cycle - 1)[-1] if cycle > 0 else cfg.root_node
        if order[0] == prev_last:
            j = int(rng.integers(1, len(order)))
            order[0], order[j] = order[j], order[0]
        return tuple(order)

    def target_leaf(self, n: int) -> int:
        """Leaf whose marginal iteration ``n`` (0-based) enforces."""
        return self.leaf_order(n // self.K)[n % self.K]

    def start_node(self, n: int) -> int:
        return self.config.root_node if n == 0 else self.target_leaf(n - 1)

    def current_path(self) -> tuple[Edge, ...]:
        return leaf_path(self.tree, self.start_node(self.n), self.target_leaf(self.n))


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def init_engine(config: ExperimentConfig) -> tuple[EdgeModels, IpfState]:
    """Zero-drift networks on every directed edge and the leaf datasets."""
    try:
        config.validate()
    except ConfigInvalid:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigInvalid(str(exc)) from None
    tc = config.train
    dtype = np.dtype(tc.dtype)
    dim = config.dim
    models = EdgeModels()
    for idx, (u, v, _) in enumerate(config.tree.edges):
        for j, edge in enumerate(((u, v), (v, u))):
            params = init_params(dim, derive_seed(config.seed, 3, idx, j), tc.activation, dtype)
            adam = AdamState.zeros_like(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2)
            models[edge] = EdgeModel(params, adam)
    schedules = {
        frozenset((u, v)): make_schedule(config.schedule_steps, config.gamma0, horizon_time(config.epsilon, w))
        for u, v, w in config.tree.edges
    }
    leaf_data, leaf_gaussians = {}, {}
    for leaf, spec in sorted(config.leaves.items()):
        data, g = make_leaf_data(spec)
        if data.count == 0:
            raise EmptyDataset(f"leaf {leaf} has an empty dataset")
        leaf_data[leaf], leaf_gaussians[leaf] = data, g
    mu0 = None
    if config.root_mode == "internal":
        fitted = [fit_gaussian(leaf_data[i]) for i in sorted(leaf_data)]
        mu0 = reference_gaussian_design(fitted, config.alpha)
        count = max(s.count for s in leaf_data.values())
        root_samples = sample_gaussian(mu0, count, derive_seed(config.seed, 5))
    else:
        root_samples = leaf_data[config.root_node]
    state = IpfState(config, schedules, leaf_data, leaf_gaussians, root_samples, mu0)
    state.leaf_order(0)
    return models, state


def _subsample(data: SampleSet, count: int, rng: np.random.Generator) -> SampleSet:
    if data.count == 0:
        raise EmptyDataset("cannot draw from an empty dataset")
    idx = rng.choice(data.count, size=count, replace=data.count < count)
    return SampleSet(data.data[idx])


def _drift_fn(params: DriftNetParams):
    if params.is_zero_output():
        return None
    return lambda t, x: net_forward(params, t, x)


def simulate_edge(models: EdgeModels, state: IpfState, edge: Edge, init: SampleSet, seed: int, keep_targets=False):
    """Euler-Maruyama trajectories along ``edge`` under its current network.

    With ``keep_targets`` also returns the mean-matching regression targets
    ``X_k + gamma_{k+1} (f(t_k, X_k) - f(t_k, X_{k+1}))`` for every pair.
    """
    params = models[edge].params
    sched = state.schedule(*edge)
    batch = em_forward(_drift_fn(params), sched, init, seed, direction=edge)
    if not keep_targets:
        return batch, None
    states = batch.states
    if params.is_zero_output():
        return batch, states[:, :-1]
    times = sched.cumulative
    diff = np.empty_like(states[:, :-1])
    for k in range(sched.n_steps):
        diff[:, k] = net_forward(params, times[k], states[:, k]) - net_forward(params, times[k], states[:, k + 1])
    return batch, states[:, :-1] + sched.steps[None, :, None] * diff


def _train_reverse(models, state, edge, start: SampleSet, n: int, j: int):
    """Fit network ``(b, a)`` on trajectories of ``(a, b)``; return terminal samples and losses."""
    a, b = edge
    cfg = state.config
    tc = cfg.train
    rev = models[(b, a)]
    sched = state.schedule(a, b)
    N = sched.n_steps
    rng = np.random.default_rng(derive_seed(cfg.seed, 7, n, j))
    n_rounds = max(1, math.ceil(tc.iters_per_ipf / tc.refresh_every))
    losses = []
    batch = None
    for r in range(n_rounds):
        init = _subsample(start, tc.n_traj, rng)
        batch, targets = simulate_edge(models, state, edge, init, derive_seed(cfg.seed, 13, n, j, r), True)
        states = batch.states
        n_steps = min(tc.refresh_every, tc.iters_per_ipf - r * tc.refresh_every)
        for _ in range(max(n_steps, 0)):
            rows = rng.integers(0, tc.n_traj, tc.batch)
            ks = rng.integers(0, N, tc.batch)
            mb = MeanMatchBatch(states[rows, ks], states[rows, ks + 1], ks, sched)
            try:
                loss, grads = backprop_grads(rev.params, None, mb, target=targets[rows, ks])
            except NonFinite:
                raise TrainingDiverged(f"loss became non-finite on edge {(b, a)} at iteration {n}") from None
            adam_step(rev.params, grads, rev.adam, inplace=True)
            losses.append(loss)
    return SampleSet(batch.states[:, -1]), losses


def _run_path(models: EdgeModels, state: IpfState, path, start_samples: SampleSet) -> dict:
    n = state.n
    record = {
        "iteration": n,
        "cycle": n // state.K,
        "leaf": state.target_leaf(n),
        "start": state.start_node(n),
        "path": [list(e) for e in path],
        "edges": [],
    }
    current = start_samples
    for j, edge in enumerate(path):
        current, losses = _train_reverse(models, state, edge, current, n, j)
        state.node_cache[edge[1]] = current
        head = losses[: min(100, len(losses))]
        tail = losses[-min(100, len(losses)):]
        record["edges"].append(
            {
                "trained": [edge[1], edge[0]],
                "steps": len(losses),
                "loss_first": float(np.mean(head)) if head else None,
                "loss_last": float(np.mean(tail)) if tail else None,
            }
        )
    state.node_cache[state.start_node(n)] = start_samples
    return record


def first_iteration_internal_root(models: EdgeModels, state: IpfState) -> EdgeModels:
    """Iteration 0 with an internal root: Brownian paths from the root prior to the first leaf."""
    if state.config.root_mode != "internal":
        raise RootIsLeaf(f"root {state.config.root_node} is a leaf; use ipf_iteration")
    if state.n != 0:
        raise ConfigInvalid("the internal-root update only applies to iteration 0")
    _iterate(models, state)
    return models


def ipf_iteration(models: EdgeModels, state: IpfState, evaluate: Optional[Callable] = None):
    """One mIPF iteration: enforce the next leaf marginal along the path to it."""
    if state.n == 0 and state.config.root_mode == "internal":
        first_iteration_internal_root(models, state)
    else:
        _iterate(models, state)
    if evaluate is not None:
        state.metrics[-1].update(evaluate(models, state))
    return models, state


def _iterate(models, state):
    t0 = time.perf_counter()
    n = state.n
    start = state.start_node(n)
    if n == 0:
        start_samples = state.root_samples
    else:
        start_samples = state.leaf_data[start]
    path = state.current_path()
    record = _run_path(models, state, path, start_samples)
    state.metrics.append(record)
    state.n += 1
    log.info(
        "iteration %d: %d -> %d, last losses %s (%.1fs)",
        n, start, record["leaf"], [e["loss_last"] for e in record["edges"]], time.perf_counter() - t0,
    )


def run_cycles(models: EdgeModels, state: IpfState, n_cycles: int, evaluate=None, on_iteration=None):
    """Run ``K * n_cycles`` iterations; a new leaf order is drawn for every cycle."""
    if n_cycles < 1:
        raise ConfigInvalid("n_cycles must be at least 1")
    for _ in range(state.K * n_cycles):
        ipf_iteration(models, state, evaluate)
        if on_iteration is not None:
            on_iteration(models, state)
    return state


def sample_tree(models: EdgeModels, state: IpfState, start_leaf: int, count: int, seed: int, nodes=None):
    """Diffuse fresh draws of ``start_leaf``'s data along the tree rooted there.

    Returns a map node -> SampleSet; ``nodes`` restricts the simulation to the
    edges needed to reach those nodes.
    """
    tree = state.tree
    if start_leaf not in tree.leaves:
        raise UnknownLeaf(f"node {start_leaf} is not a leaf")
    dtree = root_at(tree, start_leaf)
    if nodes is None:
        needed = set(dtree.directed_edges)
    else:
        needed = set()
        for v in nodes:
            if v != start_leaf:
                needed.update(leaf_path(tree, start_leaf, v))
    rng = np.random.default_rng(derive_seed(seed, 17))
    out = {start_leaf: _subsample(state.leaf_data[start_leaf], count, rng)}
    for a, b in dtree.directed_edges:
        if (a, b) not in needed:
            continue
        batch, _ = simulate_edge(models, state, (a, b), out[a], derive_seed(seed, 19, a, b))
        out[b] = SampleSet(batch.states[:, -1])
    return out


def barycenter_samples(models: EdgeModels, state: IpfState, start_leaf: int, count: int, seed: int) -> SampleSet:
    center = state.tree.star_center
    if center is None:
        raise NotStarTree("barycenter sampling needs a star-shaped tree")
    return sample_tree(models, state, start_leaf, count, seed, nodes=[center])[center]
