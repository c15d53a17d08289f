"""Flat ``section.key = value`` configuration files.

Lines starting with ``#`` are comments.  ``tree.edge = u v w`` may repeat;
every other key may appear once.  Leaf datasets live under
``leaf.<node id>.<field>``.  A star tree only needs ``tree.kind = star`` and
its leaf sections: the leaves must be numbered ``1..K`` and the center is 0.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field, fields
from typing import Any, Optional

from .engine import EvalConfig, ExperimentConfig, LeafSpec, TrainConfig
from .errors import ConfigInvalid, ConstraintViolation, ParseError, TreeError, UnknownKey
from .tree import build_undirected, star_tree

SEED_ENV = "TREEDSB_SEED"

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

# key pattern -> value type
_SCHEMA: list[tuple[re.Pattern, str]] = [
    (re.compile(p), t)
    for p, t in [
        (r"experiment\.name", "str"),
        (r"experiment\.seed", "int"),
        (r"experiment\.cycles", "int"),
        (r"experiment\.epsilon", "float"),
        (r"tree\.kind", "str"),
        (r"tree\.nodes", "int"),
        (r"tree\.weight", "float"),
        (r"tree\.edge", "edge"),
        (r"root\.mode", "str"),
        (r"root\.node", "int"),
        (r"root\.alpha", "float"),
        (r"leaf\.\d+\.kind", "str"),
        (r"leaf\.\d+\.(count|seed|dim)", "int"),
        (r"leaf\.\d+\.(noise|cond_max|scale|mean|std)", "float"),
        (r"schedule\.steps", "int"),
        (r"schedule\.gamma0", "float"),
        (r"train\.(activation|dtype)", "str"),
        (r"train\.(batch|iters_per_ipf|refresh_every|n_traj)", "int"),
        (r"train\.(lr|beta1|beta2)", "float"),
        (r"eval\.samples", "int"),
        (r"eval\.uvp", "bool"),
        (r"grid\.(low|high)", "float"),
        (r"grid\.size", "int"),
        (r"sinkhorn\.(tol)", "float"),
        (r"sinkhorn\.(max_iter)", "int"),
        (r"sinkhorn\.dense_check", "bool"),
        (r"barycenter\.tol", "float"),
        (r"barycenter\.max_iter", "int"),
        (r"dataset\.(kind)", "str"),
        (r"dataset\.(count|seed|dim)", "int"),
        (r"dataset\.(noise|cond_max|scale)", "float"),
    ]
]


def _key_type(key: str) -> Optional[str]:
    for pat, typ in _SCHEMA:
        if pat.fullmatch(key):
            return typ
    return None


def _convert(value: str, typ: str, line: int, col: int):
    try:
        if typ == "str":
            if not value:
                raise ValueError
            return value
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            return _BOOL[value.lower()]
        if typ == "edge":
            u, v, w = value.split()
            return (int(u), int(v), float(w))
    except (ValueError, KeyError):
        pass
    raise ParseError(f"cannot read {value!r} as {typ}", line, col)


@dataclass
class RawConfig:
    values: dict[str, Any] = field(default_factory=dict)
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    lines: dict[str, int] = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, prefix: str) -> dict[str, Any]:
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}


def parse_text(text: str) -> RawConfig:
    raw = RawConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno, len(line) - len(line.lstrip()) + 1)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        if not key or not re.fullmatch(r"[A-Za-z_][\w]*(\.[\w]+)+", key):
            raise ParseError(f"malformed key {key!r}", lineno, len(key_part) - len(key_part.lstrip()) + 1)
        value = value_part.split("#", 1)[0].strip()
        col = len(key_part) + 2 + (len(value_part) - len(value_part.lstrip()))
        typ = _key_type(key)
        if typ is None:
            raise UnknownKey(key, lineno)
        converted = _convert(value, typ, lineno, col)
        if typ == "edge":
            raw.edges.append(converted)
            continue
        if key in raw.values:
            raise ParseError(f"key {key!r} repeated (first on line {raw.lines[key]})", lineno, 1)
        raw.values[key] = converted
        raw.lines[key] = lineno
    return raw


def _apply(obj, section: dict[str, Any], prefix: str):
    names = {f.name for f in fields(obj)}
    for k, v in section.items():
        if k not in names:
            raise UnknownKey(prefix + k)
        setattr(obj, k, v)
    return obj


def build_tree(raw: RawConfig, leaf_ids):
    kind = raw.get("tree.kind", "star" if not raw.edges else "edges")
    try:
        if kind == "star":
            if raw.edges or "tree.nodes" in raw.values:
                raise ConstraintViolation("a star tree takes no tree.nodes or tree.edge entries")
            K = len(leaf_ids)
            if sorted(leaf_ids) != list(range(1, K + 1)) or K < 2:
                raise ConstraintViolation(f"star leaves must be numbered 1..K with K >= 2, got {sorted(leaf_ids)}")
            return star_tree(K, raw.get("tree.weight"))
        if kind == "edges":
            if "tree.weight" in raw.values:
                raise ConstraintViolation("tree.weight only applies to star trees")
            if "tree.nodes" not in raw.values:
                raise ConstraintViolation("tree.nodes is required with tree.kind = edges")
            return build_undirected(raw.get("tree.nodes"), raw.edges)
    except TreeError as exc:
        raise ConstraintViolation(f"invalid tree: {exc}") from None
    raise ConstraintViolation(f"tree.kind must be 'star' or 'edges', got {kind!r}")


def leaf_sections(raw: RawConfig) -> dict[int, dict[str, Any]]:
    out: dict[int, dict[str, Any]] = {}
    for k, v in raw.values.items():
        if k.startswith("leaf."):
            _, node, name = k.split(".")
            out.setdefault(int(node), {})[name] = v
    return out


def build_experiment(raw: RawConfig, env: Optional[dict] = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    leaves_raw = leaf_sections(raw)
    tree = build_tree(raw, list(leaves_raw))
    leaves = {}
    for node, sec in sorted(leaves_raw.items()):
        extra = set(sec) & {"mean", "std"}
        if extra:
            raise UnknownKey(f"leaf.{node}.{sorted(extra)[0]}")
        leaves[node] = _apply(LeafSpec(), sec, f"leaf.{node}.")
    mode = raw.get("root.mode", "leaf")
    if "root.node" in raw.values:
        root = raw.get("root.node")
    elif mode == "internal" and tree.star_center is not None:
        root = tree.star_center
    elif mode == "leaf" and tree.leaves:
        root = max(tree.leaves)
    else:
        raise ConstraintViolation("root.node is required for this tree")
    seed = raw.get("experiment.seed", 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConstraintViolation(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    cfg = ExperimentConfig(
        tree=tree,
        leaves=leaves,
        epsilon=raw.get("experiment.epsilon", 0.1),
        root_mode=mode,
        root_node=root,
        alpha=raw.get("root.alpha", 1.0),
        schedule_steps=raw.get("schedule.steps", 50),
        gamma0=raw.get("schedule.gamma0", 1e-5),
        cycles=raw.get("experiment.cycles", 10),
        seed=seed,
        name=raw.get("experiment.name", "treedsb"),
        train=_apply(TrainConfig(), raw.section("train."), "train."),
        eval=_apply(EvalConfig(), raw.section("eval."), "eval."),
    )
    try:
        cfg.validate()
    except ConfigInvalid as exc:
        raise ConstraintViolation(str(exc)) from None
    return cfg


def parse_config(path, env: Optional[dict] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return build_experiment(parse_text(fh.read()), env)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    """Text that :func:`parse_config` reads back to an equal config (without a seed override)."""
    lines = [
        f"experiment.name = {cfg.name}",
        f"experiment.seed = {cfg.seed}",
        f"experiment.cycles = {cfg.cycles}",
        f"experiment.epsilon = {cfg.epsilon!r}",
        "tree.kind = edges",
        f"tree.nodes = {cfg.tree.node_count}",
    ]
    lines += [f"tree.edge = {u} {v} {w!r}" for u, v, w in cfg.tree.edges]
    lines += [
        f"root.mode = {cfg.root_mode}",
        f"root.node = {cfg.root_node}",
        f"root.alpha = {cfg.alpha!r}",
        f"schedule.steps = {cfg.schedule_steps}",
        f"schedule.gamma0 = {cfg.gamma0!r}",
    ]
    for node, spec in sorted(cfg.leaves.items()):
        lines += [f"leaf.{node}.{f.name} = {_fmt(getattr(spec, f.name))}" for f in fields(spec)]
    lines += [f"train.{f.name} = {_fmt(getattr(cfg.train, f.name))}" for f in fields(cfg.train)]
    lines += [f"eval.{f.name} = {_fmt(getattr(cfg.eval, f.name))}" for f in fields(cfg.eval)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()
