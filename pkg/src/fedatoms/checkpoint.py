"""Model checkpoints as plain JSON: per-layer (alpha, atoms, bias) or
(weight, bias), the head, the round and the config hash.

JSON floats are written with ``repr`` precision, so a save/load cycle is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError
from .fl_core.model import GlobalModel, ModelSpec

FORMAT = "fedatoms-checkpoint"
VERSION = 1


def to_document(model: GlobalModel, config_hash: str = "") -> dict:
    p = model.params
    layers = []
    for i in range(len(model.spec.conv)):
        keys = ("alpha", "atoms", "bias") if model.spec.decomposed else ("weight", "bias")
        layers.append({k: p[f"conv{i}.{k}"].tolist() for k in keys})
    head = {"weight": p["head.weight"].tolist()}
    if "head.bias" in p:
        head["bias"] = p["head.bias"].tolist()
    return {"format": FORMAT, "version": VERSION, "round": model.round, "config_hash": config_hash,
            "decomposed": model.spec.decomposed, "layers": layers, "head": head}


def from_document(doc: dict, spec: ModelSpec) -> GlobalModel:
    """Rebuild a model for ``spec``; every tensor shape is checked."""
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ContractError("not a checkpoint of a supported format/version")
    if doc.get("decomposed") != spec.decomposed or len(doc["layers"]) != len(spec.conv):
        raise ContractError("checkpoint does not match the model layout")
    params = {}
    for i, layer in enumerate(doc["layers"]):
        for k, v in layer.items():
            params[f"conv{i}.{k}"] = np.asarray(v, dtype=np.float64)
    for k, v in doc["head"].items():
        params[f"head.{k}"] = np.asarray(v, dtype=np.float64)
    expected = spec.param_shapes()
    if params.keys() != expected.keys():
        raise ContractError(f"checkpoint holds {sorted(params)}, model needs {sorted(expected)}")
    for k, shape in expected.items():
        if params[k].shape != tuple(shape):
            raise ContractError(f"{k}: checkpoint shape {params[k].shape}, model needs {tuple(shape)}")
    return GlobalModel(spec, params, int(doc["round"]), {"config_hash": doc.get("config_hash", "")})


def save_checkpoint(path, model: GlobalModel, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_document(model, config_hash)))
    return path


def load_checkpoint(path, spec: ModelSpec) -> GlobalModel:
    return from_document(json.loads(Path(path).read_text()), spec)
