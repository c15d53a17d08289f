"""Command line entry point: ``treedsb gen-data | run | oracle | eval``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Errors go to stderr as one JSON object; stdout only carries data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RawConfig, build_experiment, build_tree, config_hash, leaf_sections, parse_text, serialize
from .engine import (
    LeafSpec,
    derive_seed,
    init_engine,
    ipf_iteration,
    make_leaf_data,
    sample_tree,
)
from .errors import (
    ConfigInvalid,
    ConstraintViolation,
    ParseError,
    SchemaError,
    TreeDSBError,
    UnknownKey,
)
from .evaluate import barycenter_uvp_evaluator, best_uvp, oracle_barycenter
from .io import read_samples_csv, save_checkpoint, write_samples_csv
from .measures import GaussianMeasure, fit_gaussian
from .oracle import discrete as disc
from .oracle.gaussian import bw2_uvp, barycenter_residual, gaussian_barycenter_fixed_point

log = logging.getLogger("treedsb")

USAGE_ERRORS = (ParseError, UnknownKey, ConstraintViolation, ConfigInvalid, SchemaError, FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_raw(path) -> RawConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read())


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = LeafSpec(kind="circle", count=1000, noise=0.0, seed=0)
    if args.config:
        raw = _read_raw(args.config)
        extra = [k for k in raw.values if not k.startswith("dataset.")]
        if extra or raw.edges:
            raise UnknownKey(extra[0] if extra else "tree.edge")
        for k, v in raw.section("dataset.").items():
            setattr(spec, k, v)
    for name in ("kind", "count", "noise", "seed", "dim", "cond_max", "scale"):
        val = getattr(args, name)
        if val is not None:
            setattr(spec, name, val)
    try:
        samples, _ = make_leaf_data(spec)
    except ValueError as exc:
        raise ConstraintViolation(str(exc)) from None
    if args.out:
        write_samples_csv(args.out, samples)
    else:
        out = sys.stdout
        out.write(",".join(f"x{j}" for j in range(samples.dim)) + "\n")
        for row in samples.data:
            out.write(",".join(repr(float(v)) for v in row) + "\n")
    return 0


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = build_experiment(_read_raw(args.config))
    if args.cycles is not None:
        if args.cycles < 1:
            raise ConstraintViolation("--cycles must be at least 1")
        cfg.cycles = args.cycles
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize(cfg))
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "status": "running",
        "records": [],
        "artifacts": {"config": "config.txt", "metrics": "metrics.jsonl"},
        "version": __version__,
    }
    manifest_path = out / "manifest.json"

    def write_manifest():
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    write_manifest()
    models, state = init_engine(cfg)
    evaluate = None
    if cfg.eval.uvp:
        evaluate = barycenter_uvp_evaluator(state, cfg.eval.samples)
    metrics_path = out / "metrics.jsonl"
    try:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for _ in range(state.K * cfg.cycles):
                t0 = time.perf_counter()
                ipf_iteration(models, state, evaluate)
                rec = state.metrics[-1]
                fh.write(_dump_json(rec) + "\n")
                fh.flush()
                edges = rec["edges"]
                manifest["records"].append(
                    {
                        "iteration": rec["iteration"],
                        "leaf": rec["leaf"],
                        "final_loss": edges[-1]["loss_last"] if edges else None,
                        "wall_time": round(time.perf_counter() - t0, 3),
                        "uvp": rec.get("uvp"),
                    }
                )
                log.info("iteration %d done", rec["iteration"])
        sample_paths = []
        for leaf in sorted(state.tree.leaves):
            nodes = sample_tree(models, state, leaf, cfg.eval.samples, derive_seed(cfg.seed, 29, leaf))
            for node, samples in sorted(nodes.items()):
                rel = f"samples/node_{node}_from_{leaf}.csv"
                write_samples_csv(out / rel, samples)
                sample_paths.append(rel)
        save_checkpoint(models, out / "checkpoint", {"iterations": state.n, "config_hash": manifest["config_hash"]})
        manifest["artifacts"].update({"samples": sample_paths, "checkpoint": "checkpoint/manifest.json"})
        if cfg.eval.uvp:
            manifest["best_uvp"] = best_uvp(state.metrics)
        manifest["status"] = "complete"
    except BaseException as exc:
        manifest["status"] = "partial"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        write_manifest()
    print(_dump_json({"out_dir": str(out), "iterations": state.n, "best_uvp": manifest.get("best_uvp")}))
    return 0


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------


def _discrete_problem(raw: RawConfig):
    allowed = ("experiment.", "tree.", "root.", "leaf.", "grid.", "sinkhorn.")
    for k in raw.values:
        if not k.startswith(allowed) or k in ("root.mode", "root.alpha", "experiment.cycles"):
            raise UnknownKey(k)
    leaves_raw = leaf_sections(raw)
    tree = build_tree(raw, list(leaves_raw))
    grid = disc.uniform_grid(raw.get("grid.low", -1.0), raw.get("grid.high", 1.0), raw.get("grid.size", 10))
    marginals = {}
    for node, sec in sorted(leaves_raw.items()):
        bad = set(sec) - {"mean", "std"}
        if bad:
            raise UnknownKey(f"leaf.{node}.{sorted(bad)[0]}")
        if not sec.get("std", 1.0) > 0:
            raise ConstraintViolation(f"leaf.{node}.std must be positive")
        marginals[node] = disc.discretized_gaussian(grid, sec.get("mean", 0.0), sec.get("std", 1.0) ** 2)
    if set(marginals) != set(tree.leaves):
        raise ConstraintViolation(f"leaf sections {sorted(marginals)} do not match tree leaves {sorted(tree.leaves)}")
    root = raw.get("root.node", max(tree.leaves))
    if root not in tree.leaves:
        raise ConstraintViolation("the discrete oracle takes a leaf root")
    eps = raw.get("experiment.epsilon", 0.1)
    if not eps > 0:
        raise ConstraintViolation(f"epsilon must be positive, got {eps}")
    kernels = disc.build_kernels(grid, tree, eps, root, marginals[root])
    return tree, grid, kernels, marginals


def cmd_oracle_sinkhorn(args) -> int:
    raw = _read_raw(args.config)
    tree, grid, kernels, marginals = _discrete_problem(raw)
    tol = raw.get("sinkhorn.tol", 1e-10)
    max_iter = raw.get("sinkhorn.max_iter", 10000)
    potentials, nodes = disc.tree_sinkhorn_mp(kernels, tree, marginals, tol, max_iter)
    solver = disc.TreeSinkhorn(kernels, tree, marginals)
    solver.potentials = potentials
    report = {"iterations": potentials.n, "final_tv": solver.leaf_tv(), "order": list(solver.order)}
    if raw.get("sinkhorn.dense_check", True) and kernels.size**tree.node_count <= disc.DENSE_MAX_ENTRIES:
        n = potentials.n
        long_run = disc.dense_mipf(kernels, tree, marginals, 10 * n, keep="last")
        dense = disc.dense_mipf(kernels, tree, marginals, n, keep="last")
        star = long_run.final
        kl_total = disc.kl_log_tensors(star, dense.log_reference)
        pyth = disc.kl_log_tensors(star, dense.final) + sum(dense.kl_increments)
        lhs, rhs = disc.wp_objective_check(dense.final, kernels, tree)
        dm = dense.node_marginals()
        report.update(
            {
                "kl_trace": dense.kl_increments,
                "dense_max_abs_diff": max(float(np.abs(dm[v] - nodes[v].weights).max()) for v in nodes),
                "pythagorean_residual": abs(kl_total - pyth),
                "wp_residual": abs(lhs - rhs),
            }
        )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pts = kernels.grid if kernels.grid.ndim == 2 else kernels.grid[:, None]
    for v, m in sorted(nodes.items()):
        with open(out / f"node_{v}.csv", "w", encoding="utf-8") as fh:
            fh.write("grid_index," + ",".join(f"x{j}" for j in range(pts.shape[1])) + ",weight\n")
            for i, (p, w) in enumerate(zip(pts, m.weights)):
                fh.write(f"{i}," + ",".join(repr(float(c)) for c in p) + f",{float(w)!r}\n")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(_dump_json({k: report[k] for k in ("iterations", "final_tv")}))
    return 0


def cmd_oracle_barycenter(args) -> int:
    raw = _read_raw(args.config)
    tol = raw.values.pop("barycenter.tol", 1e-10)
    max_iter = raw.values.pop("barycenter.max_iter", 1000)
    cfg = build_experiment(raw)
    center = cfg.tree.star_center
    if center is None:
        raise ConstraintViolation("barycenter oracle needs a star tree")
    leaves = sorted(cfg.tree.leaves)
    gs = []
    for i in leaves:
        _, g = make_leaf_data(cfg.leaves[i])
        if g is None:
            raise ConstraintViolation(f"leaf {i} is not Gaussian")
        gs.append(g)
    w = np.array([cfg.tree.weight(center, i) for i in leaves])
    w = w / w.sum()
    bary = gaussian_barycenter_fixed_point(gs, w, tol, max_iter)
    report = {
        "mean": bary.mean.tolist(),
        "cov": bary.cov.tolist(),
        "weights": w.tolist(),
        "residual": barycenter_residual(bary.cov, [g.cov for g in gs], w),
    }
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "barycenter.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(_dump_json(report))
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def _load_target(args) -> GaussianMeasure:
    if args.target:
        spec = json.loads(Path(args.target).read_text())
        if "mean" not in spec or "cov" not in spec:
            raise SchemaError("target JSON needs 'mean' and 'cov'")
        return GaussianMeasure(np.asarray(spec["mean"], float), np.asarray(spec["cov"], float))
    cfg = build_experiment(_read_raw(args.barycenter_config))
    return oracle_barycenter(cfg.tree, {i: make_leaf_data(s)[1] for i, s in cfg.leaves.items()})


def cmd_eval_uvp(args) -> int:
    if bool(args.target) == bool(args.barycenter_config):
        raise UsageError("give exactly one of --target or --barycenter-config")
    samples = read_samples_csv(args.samples)
    target = _load_target(args)
    fitted = fit_gaussian(samples)
    record = {
        "uvp_percent": bw2_uvp(samples, target),
        "count": samples.count,
        "fitted_mean": fitted.mean.tolist(),
        "fitted_cov": fitted.cov.tolist(),
    }
    print(_dump_json(record))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treedsb", description="Tree-based diffusion Schrödinger bridges")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a toy or Gaussian dataset as CSV")
    g.add_argument("--config")
    g.add_argument("--out", help="output CSV (stdout when omitted)")
    g.add_argument("--kind")
    g.add_argument("--count", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--cond-max", dest="cond_max", type=float)
    g.add_argument("--scale", type=float)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train TreeDSB from a config")
    r.add_argument("--config", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--cycles", type=int, help="override experiment.cycles")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", help="reference solvers")
    osub = o.add_subparsers(dest="oracle", required=True, parser_class=_Parser)
    s = osub.add_parser("sinkhorn", help="discrete tree Sinkhorn on a grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_oracle_sinkhorn)
    b = osub.add_parser("barycenter", help="Gaussian fixed-point barycenter")
    b.add_argument("--config", required=True)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_oracle_barycenter)

    e = sub.add_parser("eval", help="evaluate samples")
    esub = e.add_subparsers(dest="metric", required=True, parser_class=_Parser)
    u = esub.add_parser("uvp", help="BW2-UVP of a sample CSV against a Gaussian")
    u.add_argument("--samples", required=True)
    u.add_argument("--target", help="JSON file with 'mean' and 'cov'")
    u.add_argument("--barycenter-config", help="config whose leaf Gaussians define the oracle barycenter")
    u.set_defaults(func=cmd_eval_uvp)
    return p


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("line", "column", "row", "key"):
        if getattr(exc, attr, None) is not None:
            err[attr] = getattr(exc, attr)
    sys.stderr.write(_dump_json(err) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        return _fail(exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError,) + USAGE_ERRORS as exc:
        return _fail(exc, 1)
    except (TreeDSBError, ValueError, FloatingPointError, OSError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
