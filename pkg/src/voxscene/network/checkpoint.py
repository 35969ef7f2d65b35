"""Checkpoint directories: meta.json plus one little-endian float32 blob per tensor."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .model import ModelSpec, Network, ParameterStore, build_model

META = "meta.json"


def save_checkpoint(directory, spec: ModelSpec, store: ParameterStore, extra: dict | None = None,
                    meta: dict | None = None) -> Path:
    """Write `store` (and optional extra named tensors, e.g. optimizer moments).

    Tensors are stored as float32; the blob file name is the tensor path.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    groups = [("param", store.params), ("buffer", store.buffers), ("extra", extra or {})]
    for role, tensors in groups:
        for key, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            with open(d / f"{key}.bin", "wb") as f:
                f.write(a.tobytes())
            entries.append({"path": key, "role": role, "shape": list(a.shape)})
    record = {"format": 1, "model": spec.to_dict(), "tensors": entries}
    record.update(meta or {})
    tmp = d / (META + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=1)
    os.replace(tmp, d / META)
    return d


def load_checkpoint(directory) -> tuple[Network, ParameterStore, dict, dict]:
    """Return (network, store, extra tensors, meta record)."""
    d = Path(directory)
    meta_path = d / META
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint metadata in {d}")
    with open(meta_path, encoding="utf-8") as f:
        record = json.load(f)
    spec = ModelSpec.from_dict(record["model"])
    store = ParameterStore()
    extra = {}
    for e in record["tensors"]:
        raw = (d / f"{e['path']}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        {"param": store.params, "buffer": store.buffers, "extra": extra}[e["role"]][e["path"]] = arr
    net = build_model(spec)
    expected = net.init_params(0)
    if set(expected.keys()) != set(store.keys()):
        missing = set(expected.keys()) ^ set(store.keys())
        raise ValueError(f"checkpoint tensors do not match the model: {sorted(missing)[:5]}")
    for k, v in expected.items():
        if v.shape != store[k].shape:
            raise ValueError(f"{k}: shape {store[k].shape} != {v.shape}")
    return net, store, extra, record
