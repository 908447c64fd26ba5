import json

import numpy as np
import pytest

from poissongnn import persistence as io
from poissongnn.model import ModelConfig, ModelParams
from poissongnn.training import AdamState, TrainConfig, TrainState, train

SMALL = ModelConfig(latent_dim=4, encoder_hidden=5, message_hidden=6, decoder_hidden=5, seed=2)


def _same_sample(a, b):
    for x, y in ((a.mesh.coords, b.mesh.coords), (a.mesh.triangles, b.mesh.triangles),
                 (a.mesh.boundary_edges, b.mesh.boundary_edges), (a.mesh.boundary_normals, b.mesh.boundary_normals),
                 (a.mesh.node_kind, b.mesh.node_kind), (a.system.B, b.system.B),
                 (a.system.A.data, b.system.A.data), (a.system.A.indices, b.system.A.indices),
                 (a.system.A.indptr, b.system.A.indptr), (a.system.dirichlet_values, b.system.dirichlet_values),
                 (a.graph.edge_attr, b.graph.edge_attr), (a.graph.spec.f_coeffs, b.graph.spec.f_coeffs),
                 (a.graph.spec.g_coeffs, b.graph.spec.g_coeffs)):
        assert x.shape == y.shape and np.array_equal(x, y)
        assert x.tobytes() == y.tobytes()


def test_dataset_round_trip_bitwise(tmp_path, small_samples):
    path = tmp_path / "d.json"
    io.save_dataset(path, {"train": small_samples[:3], "test": small_samples[3:]}, {"seed": 11})
    back = io.load_dataset(path)
    assert [len(back["train"]), len(back["test"])] == [3, 1]
    for a, b in zip(small_samples, back["train"] + back["test"]):
        _same_sample(a, b)
    assert io.dataset_meta(path) == {"seed": 11}
    doc = json.loads(path.read_text())
    assert doc["schema_version"] == io.SCHEMA_VERSION and doc["kind"] == "dataset"
    # write-read-write is a fixed point
    io.save_dataset(tmp_path / "e.json", back, {"seed": 11})
    assert (tmp_path / "e.json").read_bytes() == path.read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    io.save_dataset(tmp_path / "d.json", {"train": [], "test": []})
    assert io.load_dataset(tmp_path / "d.json") == {"train": [], "test": []}


def test_missing_split(tmp_path):
    io.save_dataset(tmp_path / "d.json", {"train": []})
    with pytest.raises(KeyError):
        io.load_dataset(tmp_path / "d.json", "test")


def test_schema_checks(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"kind": "dataset", "schema_version": 99, "splits": {}}))
    with pytest.raises(io.SchemaError):
        io.load_dataset(path)
    path.write_text(json.dumps({"kind": "checkpoint", "schema_version": io.SCHEMA_VERSION}))
    with pytest.raises(io.SchemaError):
        io.load_dataset(path)


def test_checkpoint_round_trip_bitwise(tmp_path):
    p = ModelParams.init(SMALL)
    cfg = TrainConfig(k=5, epochs=3, model=SMALL, clip_norm=1.5)
    io.save_checkpoint(tmp_path / "c.json", p, cfg)
    q, cfg2, state = io.load_checkpoint(tmp_path / "c.json")
    assert state is None and cfg2 == cfg and q.config == SMALL
    for k in p.names():
        assert q[k].data.tobytes() == p[k].data.tobytes() and q[k].shape == p[k].shape
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["k"] == 5 and doc["seed"] == cfg.seed and doc["epoch"] == 0
    assert doc["model_config"]["latent_dim"] == 4


def test_checkpoint_shape_validation(tmp_path):
    io.save_checkpoint(tmp_path / "c.json", ModelParams.init(SMALL), TrainConfig(model=SMALL))
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["params"]["gru.b"]["data"] = doc["params"]["gru.b"]["data"][:-1]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(io.SchemaError):
        io.load_checkpoint(tmp_path / "c.json")
    doc["params"]["gru.b"] = {"shape": [2], "data": [0.0, 0.0]}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        io.load_checkpoint(tmp_path / "c.json")


def test_resume_state_round_trip(tmp_path, small_samples):
    cfg = TrainConfig(k=2, epochs=4, batch_size=2, model=SMALL)
    full = TrainState(ModelParams.init(SMALL), AdamState())
    train(small_samples, cfg, full)

    half = TrainState(ModelParams.init(SMALL), AdamState())
    train(small_samples, TrainConfig(k=2, epochs=2, batch_size=2, model=SMALL), half)
    io.save_checkpoint(tmp_path / "c.json", half.best_params, cfg, half)
    _, _, resumed = io.load_checkpoint(tmp_path / "c.json")
    assert resumed.epoch == 2 and resumed.history == half.history and resumed.optimizer.t == half.optimizer.t
    train(small_samples, cfg, resumed)
    assert resumed.history == full.history
    for k in full.params.names():
        assert resumed.params[k].data.tobytes() == full.params[k].data.tobytes()


def test_rows_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5e17, float(np.nextafter(1.0, 2.0))]
    io.write_rows(tmp_path / "m.csv", ["i", "v"], enumerate(vals))
    header, rows = io.read_rows(tmp_path / "m.csv")
    assert header == ["i", "v"]
    assert [float(r[1]) for r in rows] == vals
