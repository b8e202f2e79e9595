"""ELASTRON1 checkpoints.

A checkpoint is two files sharing a stem:

    <stem>.json   manifest: magic, version, kind, meta, and for every tensor
                  its name, shape, offset and element count
    <stem>.bin    all tensors back to back as little-endian float64

Manifests are written with sorted keys and fixed separators, so identical
state always produces byte-identical files.
"""
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from model import DenseSubnetwork, ElasticModel, ModelConfig
from ops import DTYPE

MAGIC = "ELASTRON1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def exists(stem):
    manifest_path, blob_path = _paths(stem)
    return manifest_path.exists() and blob_path.exists()


def save_checkpoint(stem, tensors: Dict[str, torch.Tensor], kind: str, meta: Optional[Dict] = None):
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        array = value.detach().cpu().to(DTYPE).contiguous().numpy().astype("<f8", copy=False)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        chunks.append(array.reshape(-1))
        offset += int(array.size)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")

    manifest = {
        "magic": MAGIC,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
    }
    with manifest_path.open("w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=1, separators=(",", ": ")))
        f.write("\n")
    with blob_path.open("wb") as f:
        f.write(blob.astype("<f8").tobytes())


def load_checkpoint(stem) -> Tuple[Dict[str, torch.Tensor], str, Dict]:
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint {stem} not found")
    with manifest_path.open("rt", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("magic") != MAGIC:
        raise CheckpointError(f"{manifest_path} is not an {MAGIC} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")

    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    tensors = {}
    for entry in manifest["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count > blob.size or int(np.prod(entry["shape"], dtype=np.int64)) != count:
            raise CheckpointError(f"tensor {entry['name']} does not fit the blob of {blob.size} values")
        array = blob[start:start + count].astype(np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())
    return tensors, manifest["kind"], manifest["meta"]


def save_model(model, stem, meta: Optional[Dict] = None):
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    if isinstance(model, DenseSubnetwork):
        meta["layer_heads"] = model.layer_heads
        meta["layer_widths"] = model.layer_widths
        kind = "dense"
    elif isinstance(model, ElasticModel):
        kind = "elastic"
    else:
        raise CheckpointError(f"cannot save model of type {type(model).__name__}")
    save_checkpoint(stem, model.state_dict(), kind, meta)


def load_model(stem):
    """Returns (model, meta) for an ``elastic`` or ``dense`` checkpoint."""
    tensors, kind, meta = load_checkpoint(stem)
    if kind not in ("elastic", "dense"):
        raise CheckpointError(f"checkpoint {stem} holds {kind!r}, not a model")
    config = ModelConfig.from_dict(meta["model_config"])
    if kind == "elastic":
        model = ElasticModel(config)
    else:
        model = DenseSubnetwork(config, meta["layer_heads"], meta["layer_widths"])
    model.load_state_dict(tensors)
    return model, meta
