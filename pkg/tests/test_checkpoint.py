import json

import pytest
import torch

from checkpoint import CheckpointError, exists, load_checkpoint, load_model, save_checkpoint, save_model
from model import DenseSubnetwork, ElasticModel, Selection
from ops import DTYPE


def test_tensor_round_trip(tmp_path):
    tensors = {"a": torch.arange(6, dtype=DTYPE).reshape(2, 3), "b": torch.tensor([1e-300, -2.5], dtype=DTYPE)}
    save_checkpoint(tmp_path / "ck", tensors, "elastic", {"note": "x"})
    assert exists(tmp_path / "ck")
    loaded, kind, meta = load_checkpoint(tmp_path / "ck")
    assert kind == "elastic" and meta == {"note": "x"}
    for name in tensors:
        assert torch.equal(loaded[name], tensors[name])


def test_manifest_layout(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": torch.zeros(2, 2, dtype=DTYPE), "v": torch.ones(3, dtype=DTYPE)}, "dense")
    manifest = json.loads((tmp_path / "ck.json").read_text())
    assert manifest["magic"] == "ELASTRON1" and manifest["version"] == 1
    assert manifest["tensors"][1] == {"name": "v", "shape": [3], "offset": 4, "count": 3}
    assert (tmp_path / "ck.bin").stat().st_size == 7 * 8


def test_identical_state_gives_identical_bytes(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "one")
    save_model(tiny_model, tmp_path / "two")
    for suffix in (".json", ".bin"):
        assert (tmp_path / f"one{suffix}").read_bytes() == (tmp_path / f"two{suffix}").read_bytes()


def test_model_round_trip(tmp_path, tiny_model, tokens):
    save_model(tiny_model, tmp_path / "model", {"stage": "test"})
    model, meta = load_model(tmp_path / "model")
    assert isinstance(model, ElasticModel) and meta["stage"] == "test"
    sel = Selection((1, 2), (0, 3))
    assert torch.equal(model(tokens, sel), tiny_model(tokens, sel))


def test_dense_round_trip(tmp_path, tiny_model, tokens):
    dense = DenseSubnetwork.from_elastic(tiny_model, Selection((0, 3), (2, 1)))
    save_model(dense, tmp_path / "dense")
    loaded, meta = load_model(tmp_path / "dense")
    assert isinstance(loaded, DenseSubnetwork)
    assert loaded.layer_heads == dense.layer_heads and loaded.layer_widths == dense.layer_widths
    assert torch.equal(loaded(tokens), dense(tokens))


def test_format_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "ck", {"w": torch.zeros(4, dtype=DTYPE)}, "elastic")
    manifest = json.loads((tmp_path / "ck.json").read_text())
    manifest["magic"] = "OTHER"
    (tmp_path / "ck.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    save_checkpoint(tmp_path / "short", {"w": torch.zeros(4, dtype=DTYPE)}, "elastic")
    (tmp_path / "short.bin").write_bytes(b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
    save_checkpoint(tmp_path / "routers", {"w": torch.zeros(1, dtype=DTYPE)}, "routers")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "routers")


def test_router_checkpoint_is_not_a_model(tmp_path):
    save_checkpoint(tmp_path / "routers", {"w": torch.zeros(2, dtype=DTYPE)}, "routers", {"router_type": "static"})
    with pytest.raises(CheckpointError, match="not a model"):
        load_model(tmp_path / "routers")
