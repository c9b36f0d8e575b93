"""Small MLPs and the on-disk checkpoint format.

A checkpoint is a directory holding ``weights.bin`` (all tensors as
little-endian float32, concatenated) and ``manifest.json`` (names, shapes,
byte offsets, plus whatever metadata the caller attaches).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn


def mlp(in_dim: int, out_dim: int, hidden: Sequence[int] = (256, 256), bias: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h, bias=bias), nn.Tanh()]
        d = h
    layers.append(nn.Linear(d, out_dim, bias=bias))
    return nn.Sequential(*layers)


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        blobs.append(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "float32"})
        offset += arr.nbytes
    tmp = path / "weights.bin.tmp"
    tmp.write_bytes(b"".join(blobs))
    os.replace(tmp, path / "weights.bin")
    manifest = {"tensors": tensors, **meta}
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / "manifest.json")


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_weights(path: str | Path, module: nn.Module) -> dict:
    """Fill ``module`` from a checkpoint; returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / "weights.bin").read_bytes()
    state = {}
    for spec in manifest["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=spec["offset"]).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)
    return manifest
