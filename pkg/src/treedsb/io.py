"""CSV sample files and model checkpoints."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .drift_net import AdamState, DriftNetParams
from .engine import EdgeModel, EdgeModels
from .errors import SchemaError
from .measures import SampleSet


def write_samples_csv(path, samples: SampleSet) -> None:
    """Header ``x0..x{d-1}``; floats written with ``repr`` so they read back bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(f"x{j}" for j in range(samples.dim)) + "\n")
        for row in samples.data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path) -> SampleSet:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file", row=1) from None
        d = len(header)
        if d == 0 or [h.strip() for h in header] != [f"x{j}" for j in range(d)]:
            raise SchemaError(f"header must be x0..x{{d-1}}, got {header}", row=1)
        rows = []
        for i, rec in enumerate(reader, start=2):
            if len(rec) != d:
                raise SchemaError(f"expected {d} fields, got {len(rec)}", row=i)
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                raise SchemaError(f"non-numeric field in {rec}", row=i) from None
            if not np.all(np.isfinite(vals)):
                raise SchemaError("non-finite value", row=i)
            rows.append(vals)
    return SampleSet(np.array(rows, dtype=float).reshape(len(rows), d))


def _edge_tag(edge) -> str:
    return f"{edge[0]}_{edge[1]}"


def save_checkpoint(models: EdgeModels, out_dir, extra: dict | None = None) -> Path:
    """One ``edge_<u>_<v>.npz`` per directed edge plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for edge in sorted(models):
        model = models[edge]
        p, a = model.params, model.adam
        arrays = {f"w:{k}": v for k, v in p.weights.items()}
        arrays.update({f"m:{k}": v for k, v in a.m.items()})
        arrays.update({f"v:{k}": v for k, v in a.v.items()})
        fname = f"edge_{_edge_tag(edge)}.npz"
        np.savez(out / fname, **arrays)
        entries.append(
            {
                "edge": list(edge),
                "file": fname,
                "dim": p.dim,
                "activation": p.activation,
                "dtype": str(p.dtype),
                "blocks": {k: list(v.shape) for k, v in p.weights.items()},
                "adam": {"step": a.step, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps},
            }
        )
    manifest = {"models": entries, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(out_dir) -> EdgeModels:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    models = EdgeModels()
    for entry in manifest["models"]:
        with np.load(out / entry["file"]) as z:
            names = list(entry["blocks"])
            w = {k: z[f"w:{k}"] for k in names}
            m = {k: z[f"m:{k}"] for k in names}
            v = {k: z[f"v:{k}"] for k in names}
        for k in names:
            if list(w[k].shape) != entry["blocks"][k]:
                raise SchemaError(f"block {k} of edge {entry['edge']} has shape {w[k].shape}")
        params = DriftNetParams(entry["dim"], w, entry["activation"])
        adam = AdamState(m, v, **entry["adam"])
        models[tuple(entry["edge"])] = EdgeModel(params, adam)
    return models
