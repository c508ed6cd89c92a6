"""Checkpoint blobs: concatenated little-endian float32 plus a JSON manifest.

The manifest maps tensor name -> {offset, shape}, offset in bytes into the
weights file. Values are stored float32 on disk and widened back to float64
on load.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from .tensor import Tensor


class CheckpointError(ValueError):
    """Manifest and blob disagree, or the manifest is malformed."""


def save_blob(tensors: Mapping[str, Tensor | np.ndarray], weights_path: str, manifest_path: str):
    manifest: dict[str, dict] = {}
    offset = 0
    chunks = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        raw = arr.astype("<f4").tobytes()
        manifest[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    os.makedirs(os.path.dirname(os.path.abspath(weights_path)), exist_ok=True)
    with open(weights_path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_blob(weights_path: str, manifest_path: str) -> dict[str, np.ndarray]:
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"manifest {manifest_path} must be a JSON object")
    blob = open(weights_path, "rb").read()
    out: dict[str, np.ndarray] = {}
    for name, entry in manifest.items():
        try:
            offset = int(entry["offset"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"manifest entry {name!r} is malformed: {entry!r}") from e
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise CheckpointError(
                f"manifest entry {name!r} spans [{offset}, {end}) but blob has {len(blob)} bytes"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(shape)
    return out


def load_into(params: Mapping[str, Tensor], weights_path: str, manifest_path: str):
    """Load a blob into existing parameter tensors, shape-checked."""
    loaded = load_blob(weights_path, manifest_path)
    for name, t in params.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if loaded[name].shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {loaded[name].shape}, model {t.shape}"
            )
        t.data = loaded[name]
