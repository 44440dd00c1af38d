"""Checkpoints: ``manifest.json`` (names, shapes, offsets, metadata) plus a
little-endian float64 payload ``params.bin``."""

import json
from pathlib import Path

import numpy as np


def save_checkpoint(params, directory, meta=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(d / "params.bin", "wb") as fh:
        for p in params:
            arr = np.ascontiguousarray(p.data, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": p.name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format": "f8-le", "parameters": entries, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def read_checkpoint(directory):
    """Return ``({name: array}, meta)``."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    flat = np.fromfile(d / "params.bin", dtype="<f8").astype(np.float64)
    arrays = {}
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"], dtype=int))
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"])
    return arrays, manifest["meta"]


def load_into(params, directory):
    """Copy stored values into ``params`` in place, matching by name."""
    arrays, meta = read_checkpoint(directory)
    for p in params:
        if p.name not in arrays:
            raise KeyError(f"checkpoint {directory} lacks parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise ValueError(f"{p.name}: stored {arrays[p.name].shape} vs model {p.data.shape}")
        p.data = arrays[p.name].copy()
    return meta
