"""Flat binary tensor archive with a JSON manifest.

A checkpoint is a directory holding ``weights.bin`` (all tensors
concatenated as little-endian 32-bit floats) and ``manifest.json`` naming
each tensor, its shape and byte offset, plus arbitrary config metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

FORMAT_TAG = "toco-archive-v1"
WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"


class ArchiveError(RuntimeError):
    """Raised when an archive is missing, corrupt, or mismatched."""


def save_archive(directory: str | Path, tensors: dict[str, Tensor], config: dict) -> Path:
    """Write tensors and config metadata to ``directory``.

    Tensor order in the binary file follows dict insertion order; the
    manifest records explicit offsets so partial readers stay possible.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / WEIGHTS_FILE, "wb") as fh:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(
                t.detach().cpu().to(torch.float32).numpy(), dtype="<f4"
            )
            fh.write(arr.tobytes())
            entries.append(
                {"name": name, "shape": list(arr.shape), "offset": offset}
            )
            offset += arr.nbytes
    manifest = {"format": FORMAT_TAG, "tensors": entries, "config": config}
    with open(directory / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return directory


def load_archive(directory: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Read an archive back; returns (tensors, config)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    weights_path = directory / WEIGHTS_FILE
    if not manifest_path.exists():
        raise ArchiveError(f"missing manifest: {manifest_path}")
    if not weights_path.exists():
        raise ArchiveError(f"missing weights file: {weights_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise ArchiveError(
            f"unsupported archive format {manifest.get('format')!r} in {manifest_path}"
        )
    raw = weights_path.read_bytes()
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + numel * 4
        if end > len(raw):
            raise ArchiveError(
                f"tensor {entry['name']!r} overruns weights file {weights_path}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).reshape(shape)
    return tensors, manifest.get("config", {})
