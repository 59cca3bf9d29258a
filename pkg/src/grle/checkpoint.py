"""Checkpoint directory format.

`manifest.json` records the model/LoRA config and an ordered tensor table
(name, shape, dtype, byte offset); `weights.bin` holds the tensors as
little-endian float32, row-major, concatenated in manifest order. Loading
validates the table against a freshly built model and the actual file size,
rejecting any mismatch.
"""

import dataclasses
import hashlib
import json
import os

import numpy as np

from .model import LoraConfig, Model, ModelConfig, apply_lora, init_model

FORMAT_VERSION = 1
_WEIGHTS = "weights.bin"
_MANIFEST = "manifest.json"


def save_checkpoint(model, directory, extra=None):
    """Write manifest + weights; returns the manifest dict."""
    os.makedirs(directory, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, p in model.parameters().items():
        blob = np.ascontiguousarray(p.data, dtype="<f4")
        nbytes = blob.nbytes
        tensors.append(
            {
                "name": name,
                "shape": list(p.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        blobs.append(blob)
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "lora": dataclasses.asdict(model.lora) if model.lora else None,
        "tensors": tensors,
        "extra": dict(extra or {}),
    }
    if manifest["lora"]:
        manifest["lora"]["targets"] = list(manifest["lora"]["targets"])
    with open(os.path.join(directory, _MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, _WEIGHTS), "wb") as fh:
        for blob in blobs:
            fh.write(blob.tobytes())
    return manifest


def load_manifest(directory):
    path = os.path.join(directory, _MANIFEST)
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    return manifest


def load_checkpoint(directory):
    """Rebuild the model described by a checkpoint directory."""
    manifest = load_manifest(directory)
    config = ModelConfig(**manifest["config"])
    model = init_model(config, dtype=np.float32)
    if manifest["lora"]:
        lora_fields = dict(manifest["lora"])
        lora_fields["targets"] = tuple(lora_fields["targets"])
        apply_lora(model, LoraConfig(**lora_fields))

    expected = list(model.parameters())
    listed = [t["name"] for t in manifest["tensors"]]
    if listed != expected:
        missing = set(expected) - set(listed)
        surplus = set(listed) - set(expected)
        raise ValueError(
            f"manifest tensor list does not match model: missing {sorted(missing)}, "
            f"unexpected {sorted(surplus)}"
        )

    path = os.path.join(directory, _WEIGHTS)
    size = os.path.getsize(path)
    end = manifest["tensors"][-1] if manifest["tensors"] else None
    total = (end["offset"] + end["nbytes"]) if end else 0
    if size != total:
        raise ValueError(f"{path}: size {size} does not match manifest total {total}")

    params = model.parameters()
    with open(path, "rb") as fh:
        offset = 0
        for entry in manifest["tensors"]:
            if entry["dtype"] != "float32":
                raise ValueError(f"tensor {entry['name']}: unsupported dtype {entry['dtype']}")
            if entry["offset"] != offset:
                raise ValueError(
                    f"tensor {entry['name']}: offset {entry['offset']} is not "
                    f"contiguous (expected {offset})"
                )
            shape = tuple(entry["shape"])
            param = params[entry["name"]]
            if shape != param.shape:
                raise ValueError(
                    f"tensor {entry['name']}: manifest shape {shape} does not match "
                    f"model shape {param.shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            if entry["nbytes"] != count * 4:
                raise ValueError(
                    f"tensor {entry['name']}: nbytes {entry['nbytes']} inconsistent "
                    f"with shape {shape}"
                )
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise ValueError(f"tensor {entry['name']}: weights file truncated")
            param.data[:] = np.frombuffer(raw, dtype="<f4").reshape(shape)
            offset += entry["nbytes"]
    return model


def checkpoint_digest(directory):
    """Stable content hash of a checkpoint (for cache keying)."""
    h = hashlib.sha256()
    for fname in (_MANIFEST, _WEIGHTS):
        with open(os.path.join(directory, fname), "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()
