"""Checkpoint I/O: a JSON manifest plus one raw little-endian float64 file per tensor.

Layout of a checkpoint directory::

    manifest.json        {"format": "losia-checkpoint", "version": 1,
                          "meta": {...}, "tensors": {key: {file, shape, kind}}}
    tensors/<nnnn>.f64   row-major '<f8' bytes, no header

``kind`` is ``"float"`` or ``"int"``; integer tensors (per-entry step
counts) are stored as float64 too and cast back on load, which is exact
below 2**53.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "losia-checkpoint"
VERSION = 1


def save(path, arrays: dict, meta: dict):
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    index = {}
    for i, key in enumerate(arrays):
        arr = np.asarray(arrays[key])
        kind = "int" if np.issubdtype(arr.dtype, np.integer) else "float"
        fname = f"tensors/{i:04d}.f64"
        np.ascontiguousarray(arr, dtype="<f8").tofile(path / fname)
        index[key] = {"file": fname, "shape": list(arr.shape), "kind": kind}
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta, "tensors": index}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load(path):
    """Return ``(arrays, meta)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    arrays = {}
    for key, info in manifest["tensors"].items():
        arr = np.fromfile(path / info["file"], dtype="<f8").reshape(info["shape"])
        arrays[key] = arr.astype(np.int64) if info["kind"] == "int" else arr.astype(np.float64)
    return arrays, manifest["meta"]
