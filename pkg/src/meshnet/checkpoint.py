"""Checkpoint files: a JSON manifest followed by raw little-endian float32 tensors.

Layout::

    MNCKPT <format version> <manifest byte length>\\n
    <manifest: indented JSON text>\\n
    <tensor bytes, in manifest order>
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .errors import BadMagic, TruncatedFile, UnsupportedVersion
from .models import LayerSpec, ModelSpec, Params, check_params

FORMAT_VERSION = 1
_TAG = "MNCKPT"


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "in_channels": spec.in_channels,
        "num_classes": spec.num_classes,
        "side": spec.side,
        "preserve_dims": spec.preserve_dims,
        "layers": [asdict(l) for l in spec.layers],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    layers = []
    for l in d["layers"]:
        l = dict(l)
        l["extent"] = tuple(l["extent"])
        l["padding"] = tuple(l["padding"])
        layers.append(LayerSpec(**l))
    return ModelSpec(d["name"], tuple(layers), d["in_channels"], d["num_classes"],
                     d.get("side"), d.get("preserve_dims", False))


def save_checkpoint(path: str | os.PathLike, spec: ModelSpec, params: Params, seed: int | None = None,
                    extra: dict | None = None) -> None:
    check_params(spec, params)
    tensors = [("weight", k, v) for k, v in params.weights.items()]
    tensors += [("buffer", k, v) for k, v in params.buffers.items()]
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec_to_dict(spec),
        "seed": seed,
        "tensors": [{"name": k, "role": role, "shape": list(v.shape)} for role, k, v in tensors],
    }
    if extra:
        manifest["extra"] = extra
    text = json.dumps(manifest, indent=1, sort_keys=False).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(f"{_TAG} {FORMAT_VERSION} {len(text)}\n".encode())
        f.write(text)
        for _, _, v in tensors:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelSpec, Params, dict]:
    """Returns (spec, params, manifest)."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    first = raw[:nl].decode(errors="replace").split() if nl > 0 else []
    if len(first) != 3 or first[0] != _TAG:
        raise BadMagic(f"{path}: not a meshnet checkpoint")
    if int(first[1]) != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {first[1]}")
    start = nl + 1
    end = start + int(first[2])
    if len(raw) < end:
        raise TruncatedFile(f"{path}: manifest truncated")
    manifest = json.loads(raw[start:end])
    spec = spec_from_dict(manifest["spec"])
    weights, buffers = {}, {}
    pos = end
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if len(raw) < pos + 4 * n:
            raise TruncatedFile(f"{path}: tensor {t['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(t["shape"]).astype(np.float32)
        pos += 4 * n
        (weights if t["role"] == "weight" else buffers)[t["name"]] = arr
    params = Params(weights, buffers)
    check_params(spec, params)
    return spec, params, manifest


def read_manifest(path: str | os.PathLike) -> dict:
    """Parse only the text manifest, without touching the tensor data."""
    with open(path, "rb") as f:
        first = f.readline().decode(errors="replace").split()
        if len(first) != 3 or first[0] != _TAG:
            raise BadMagic(f"{path}: not a meshnet checkpoint")
        if int(first[1]) != FORMAT_VERSION:
            raise UnsupportedVersion(f"{path}: checkpoint version {first[1]}")
        text = f.read(int(first[2]))
    if len(text) < int(first[2]):
        raise TruncatedFile(f"{path}: manifest truncated")
    return json.loads(text)
