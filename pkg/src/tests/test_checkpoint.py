import json
import struct

import numpy as np
import pytest

from stream_ssm.modules.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from stream_ssm.modules.errors import CheckpointError
from stream_ssm.modules.model import ModelConfig, StreamModel


@pytest.fixture
def model(rng):
    config = ModelConfig(n=4, m=2, layers=2, subsample_schedule=[(1, 2, 2)], variant="stream-0G", classes=3)
    return StreamModel.init(config, rng)


def test_roundtrip_is_exact(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, extra={"seed": 5})
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    original = model.tensors()
    restored = loaded.tensors()
    assert set(restored) == set(original)
    for name, array in original.items():
        np.testing.assert_array_equal(restored[name], array)


def test_layout(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    data = path.read_bytes()
    magic, version, length = struct.unpack("<8sII", data[:16])
    assert magic == MAGIC and version == VERSION
    manifest = json.loads(data[16:16 + length])
    assert manifest["config"]["variant"] == "stream-0G"
    payload = sum(8 * int(np.prod(entry["shape"])) for entry in manifest["tensors"])
    assert len(data) == 16 + length + payload


def test_rejects_foreign_files(tmp_path, model):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_rejects_truncated_payload(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_unsupported_version(tmp_path, model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
