"""Single-file checkpoints: zip of config JSON, tensor index, little-endian f32 blob, SHA-256."""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, PromptSegNet

FORMAT = "promptseg-ckpt/1"


class CheckpointError(ValueError):
    pass


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(8, "little"))
        h.update(p)
    return h.hexdigest()


def save_checkpoint(model: PromptSegNet, path, meta: dict | None = None) -> str:
    """Write ``model`` to ``path`` atomically; returns the content hash."""
    index, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    config = json.dumps({"format": FORMAT, "model": model.cfg.to_dict(), "meta": meta or {}}, indent=1, sort_keys=True).encode()
    index_b = json.dumps(index, indent=1).encode()
    tensors = b"".join(blobs)
    digest = _digest(config, index_b, tensors)

    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (("config.json", config), ("index.json", index_b), ("tensors.bin", tensors), ("sha256.txt", digest.encode())):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    os.replace(tmp, path)
    return digest


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            config = zf.read("config.json")
            index_b = zf.read("index.json")
            tensors = zf.read("tensors.bin")
            digest = zf.read("sha256.txt").decode()
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if _digest(config, index_b, tensors) != digest:
        raise CheckpointError(f"content hash mismatch in {path}")
    arrays = {}
    for entry in json.loads(index_b):
        buf = tensors[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return json.loads(config), arrays


def load_checkpoint(path) -> tuple[PromptSegNet, dict]:
    """Rebuild the model; returns ``(model, meta)``."""
    config, arrays = read_checkpoint(path)
    model = PromptSegNet(ModelConfig.from_dict(config["model"]))
    state = {k: torch.from_numpy(v.astype(np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state)
    return model, config.get("meta", {})
