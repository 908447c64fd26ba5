"""JSON datasets and checkpoints, CSV metrics and field exports.

Floats go through ``json`` as their shortest round-trip repr, so every array
reads back bit-identical.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .fem import FieldSpec, LinearSystem
from .geometry import Mesh
from .graph import build_graph
from .model import ModelConfig, ModelParams
from .training import AdamState, Sample, TrainConfig, TrainState

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def _check_header(doc: dict, kind: str) -> None:
    if doc.get("kind") != kind:
        raise SchemaError(f"expected a {kind} file, got {doc.get('kind')!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {doc.get('schema_version')!r}")


def _write_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, separators=(",", ":")))
    tmp.replace(path)


# ---------------------------------------------------------------------------
# datasets


def sample_to_record(sample: Sample) -> dict:
    mesh, system, graph = sample
    spec = graph.spec
    A = system.A
    return {
        "coords": mesh.coords.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
        "boundary_normals": mesh.boundary_normals.tolist(),
        "node_kind": mesh.node_kind.tolist(),
        "degree": spec.degree if spec is not None else None,
        "f_coeffs": spec.f_coeffs.tolist() if spec is not None else None,
        "g_coeffs": spec.g_coeffs.tolist() if spec is not None else None,
        "A_indptr": A.indptr.tolist(),
        "A_indices": A.indices.tolist(),
        "A_data": A.data.tolist(),
        "B": system.B.tolist(),
        "dirichlet_nodes": system.dirichlet_nodes.tolist(),
        "dirichlet_values": system.dirichlet_values.tolist(),
    }


def sample_from_record(rec: dict) -> Sample:
    mesh = Mesh(
        coords=np.array(rec["coords"], dtype=float).reshape(-1, 2),
        triangles=np.array(rec["triangles"], dtype=np.int64).reshape(-1, 3),
        boundary_edges=np.array(rec["boundary_edges"], dtype=np.int64).reshape(-1, 2),
        boundary_normals=np.array(rec["boundary_normals"], dtype=float).reshape(-1, 2),
        node_kind=np.array(rec["node_kind"], dtype=np.int8),
    )
    n = len(mesh.coords)
    A = sp.csr_matrix((np.array(rec["A_data"], dtype=float), np.array(rec["A_indices"], dtype=np.int32),
                       np.array(rec["A_indptr"], dtype=np.int32)), shape=(n, n))
    system = LinearSystem(A, np.array(rec["B"], dtype=float), np.array(rec["dirichlet_nodes"], dtype=np.int64),
                          np.array(rec["dirichlet_values"], dtype=float))
    spec = None
    if rec.get("degree") is not None:
        spec = FieldSpec(rec["f_coeffs"], rec["g_coeffs"], rec["degree"])
    return Sample(mesh, system, build_graph(mesh, system, spec))


def save_dataset(path, splits: dict[str, Sequence[Sample]], meta: dict | None = None) -> None:
    doc = {
        "kind": "dataset",
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "splits": {name: [sample_to_record(s) for s in samples] for name, samples in splits.items()},
    }
    _write_json(path, doc)


def load_dataset(path, split: str | None = None) -> dict[str, list[Sample]] | list[Sample]:
    doc = json.loads(Path(path).read_text())
    _check_header(doc, "dataset")
    splits = {name: [sample_from_record(r) for r in recs] for name, recs in doc["splits"].items()}
    if split is None:
        return splits
    if split not in splits:
        raise KeyError(f"dataset has no split {split!r} (has {sorted(splits)})")
    return splits[split]


def dataset_meta(path) -> dict:
    doc = json.loads(Path(path).read_text())
    _check_header(doc, "dataset")
    return doc["meta"]


# ---------------------------------------------------------------------------
# checkpoints


def _params_doc(params: ModelParams) -> dict:
    return {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for name, t in params.tensors.items()}


def _params_from_doc(config: ModelConfig, doc: dict) -> ModelParams:
    arrays = {}
    for name, entry in doc.items():
        data = np.array(entry["data"], dtype=float)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise SchemaError(f"{name}: {data.size} values do not fill shape {shape}")
        arrays[name] = data.reshape(shape)
    return ModelParams.from_arrays(config, arrays)


def save_checkpoint(path, params: ModelParams, config: TrainConfig, state: TrainState | None = None) -> None:
    """Write ``params`` plus, when given, everything needed to resume training."""
    doc = {
        "kind": "checkpoint",
        "schema_version": SCHEMA_VERSION,
        "model_config": asdict(params.config),
        "train_config": config.to_dict(),
        "seed": config.seed,
        "k": config.k,
        "epoch": state.epoch if state is not None else 0,
        "params": _params_doc(params),
    }
    if state is not None:
        opt = state.optimizer
        doc["resume"] = {
            "params": _params_doc(state.params),
            "adam_t": opt.t,
            "adam_m": {k: v.ravel().tolist() for k, v in opt.m.items()},
            "adam_v": {k: v.ravel().tolist() for k, v in opt.v.items()},
            "best_loss": state.best_loss if np.isfinite(state.best_loss) else None,
            "history": list(state.history),
        }
    _write_json(path, doc)


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, TrainState | None]:
    doc = json.loads(Path(path).read_text())
    _check_header(doc, "checkpoint")
    mcfg = ModelConfig(**doc["model_config"])
    params = _params_from_doc(mcfg, doc["params"])
    config = TrainConfig.from_dict(doc["train_config"])
    state = None
    if "resume" in doc:
        r = doc["resume"]
        current = _params_from_doc(mcfg, r["params"])
        shapes = {k: t.shape for k, t in current.tensors.items()}
        opt = AdamState(
            m={k: np.array(v, dtype=float).reshape(shapes[k]) for k, v in r["adam_m"].items()},
            v={k: np.array(v, dtype=float).reshape(shapes[k]) for k, v in r["adam_v"].items()},
            t=int(r["adam_t"]),
        )
        best = r["best_loss"] if r["best_loss"] is not None else float("inf")
        state = TrainState(current, opt, epoch=int(doc["epoch"]), best_loss=best,
                           best_params=params.copy(), history=list(r["history"]))
    return params, config, state


# ---------------------------------------------------------------------------
# delimited text


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
