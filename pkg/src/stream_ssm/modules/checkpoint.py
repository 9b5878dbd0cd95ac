#!/usr/bin/python3

"""
Model checkpoint container.

    offset  size  field
    0       8     magic b"STRMCKPT"
    8       4     format version, uint32 little-endian
    12      4     manifest length M in bytes, uint32 little-endian
    16      M     UTF-8 JSON manifest
    16+M    ...   tensor payloads, little-endian float64, C order

The manifest holds the model configuration and one entry per tensor with
its name, shape and byte offset relative to the start of the payload area.
"""

import json
import logging
import struct

import numpy as np

from stream_ssm.modules.errors import CheckpointError, StreamError
from stream_ssm.modules.model import ModelConfig, StreamModel

logger = logging.getLogger(__name__)

MAGIC = b"STRMCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sII")


def save_checkpoint(path, model: StreamModel, extra=None):
    table = []
    payloads = []
    offset = 0
    for name, array in model.tensors().items():
        data = np.ascontiguousarray(array, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
        payloads.append(data)
        offset += len(data)

    manifest = {"config": model.config.to_dict(), "tensors": table}
    if extra:
        manifest["extra"] = extra
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(manifest_bytes)))
        f.write(manifest_bytes)
        for data in payloads:
            f.write(data)
    logger.info("Saved checkpoint with %d tensors to %s", len(table), path)


def read_manifest(f, path):
    header = f.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        return json.loads(f.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted manifest ({e})")


def load_checkpoint(path) -> StreamModel:
    try:
        with open(path, "rb") as f:
            manifest = read_manifest(f, path)
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e.strerror})")

    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, StreamError) as e:
        raise CheckpointError(f"{path}: invalid model configuration ({e})")

    tensors = {}
    for entry in manifest.get("tensors", []):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' runs past the end of the file")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    try:
        return StreamModel.from_tensors(config, tensors)
    except StreamError as e:
        raise CheckpointError(f"{path}: {e}")
