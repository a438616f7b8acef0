"""Checkpoints: a JSON manifest plus one tensor blob per parameter or buffer."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .layers import Module
from .tensor import load_blob, save_blob

MANIFEST = "manifest.json"


def _blob_name(name: str) -> str:
    return name.replace(".", "_") + ".tns"


def save_checkpoint(model: Module, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for kind, items in (("param", ((n, p.data) for n, p in model.named_parameters())),
                        ("buffer", model.named_buffers())):
        for name, arr in items:
            fname = "tensors/" + _blob_name(name)
            save_blob(d / fname, np.ascontiguousarray(arr))
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "dtype": str(arr.dtype), "file": fname})
    manifest = {"format": "posekit-checkpoint-1", "tensors": entries}
    if extra:
        manifest.update(extra)
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ConfigError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(model: Module, directory) -> dict:
    """Copy stored tensors into ``model``; any name or shape disagreement is rejected."""
    d = Path(directory)
    manifest = read_manifest(d)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stored = {e["name"]: e for e in manifest["tensors"]}
    expected = {n: tuple(p.data.shape) for n, p in params.items()}
    expected.update({n: tuple(b.shape) for n, b in buffers.items()})
    diff = []
    for name in sorted(set(expected) | set(stored)):
        have = tuple(stored[name]["shape"]) if name in stored else None
        want = expected.get(name)
        if have != want:
            diff.append(f"  {name}: checkpoint {have}, model {want}")
    if diff:
        raise ConfigError("checkpoint does not match model configuration:\n" + "\n".join(diff))
    for name, entry in stored.items():
        arr = load_blob(d / entry["file"])
        if name in params:
            p = params[name]
            p.data = arr.astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
        else:
            model.set_buffer(name, arr.astype(buffers[name].dtype))
    return manifest
