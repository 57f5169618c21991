"""Binary checkpoint container.

Layout::

    8 bytes   magic b"CPIPCKPT"
    4 bytes   schema version, little-endian uint32
    8 bytes   header length, little-endian uint64
    N bytes   UTF-8 JSON header
    ...       contiguous little-endian float32 blobs

The header lists every tensor as ``{"name", "shape", "offset"}`` (offset in
float32 elements from the start of the blob area) together with the model
spec, class names, preprocessing snapshot, optional optimizer state, epoch
and best validation metric.  A SHA-256 of the blob area guards against
corruption.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .nn.models import Model, ModelSpec, build_model

MAGIC = b"CPIPCKPT"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    class_names: list[str]
    preprocessing: dict[str, Any]
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, Any] | None = None
    optimizer_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_metric: float | None = None
    config: dict[str, Any] | None = None

    @classmethod
    def from_model(cls, model: Model, class_names, preprocessing, **kwargs) -> "Checkpoint":
        return cls(model.spec, list(class_names), dict(preprocessing), model.state_dict(), **kwargs)

    def build(self, seed: int = 0) -> Model:
        model = build_model(self.spec, seed)
        model.load_state_dict(self.tensors)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    directory: list[dict[str, Any]] = []
    blobs: list[bytes] = []
    offset = 0

    def add(section: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"section": section, "name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.size

    for name, arr in ckpt.tensors.items():
        add("model", name, arr)
    for name, arr in ckpt.optimizer_tensors.items():
        add("optimizer", name, arr)
    blob = b"".join(blobs)
    header = {
        "spec": ckpt.spec.to_dict(),
        "class_names": ckpt.class_names,
        "preprocessing": ckpt.preprocessing,
        "optimizer": ckpt.optimizer,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "config": ckpt.config,
        "tensors": directory,
        "blob_elements": offset,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, SCHEMA_VERSION, len(head)))
        fh.write(head)
        fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version} unsupported (expected {SCHEMA_VERSION})")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    blob = raw[start + head_len:]
    if len(blob) != 4 * header["blob_elements"]:
        raise CheckpointError(f"{path}: blob area has {len(blob)} bytes, expected {4 * header['blob_elements']}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch (file corrupted)")
    values = np.frombuffer(blob, dtype="<f4")
    sections: dict[str, dict[str, np.ndarray]] = {"model": {}, "optimizer": {}}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        arr = values[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(np.float32)
        sections[entry["section"]][entry["name"]] = arr
    return Checkpoint(
        spec=ModelSpec.from_dict(header["spec"]),
        class_names=list(header["class_names"]),
        preprocessing=header["preprocessing"],
        tensors=sections["model"],
        optimizer=header["optimizer"],
        optimizer_tensors=sections["optimizer"],
        epoch=int(header["epoch"]),
        best_metric=header["best_metric"],
        config=header["config"],
    )
