import struct

import numpy as np
import pytest
import torch

from conftest import tiny_config
from scing import checkpoint as ck
from scing.errors import CheckpointError
from scing.model import ScingModel, load_model_arrays, model_arrays


def sample():
    rng = np.random.default_rng(0)
    arrays = {
        "b.x": rng.random((3, 4)).astype(np.float32),
        "a.y": rng.random(5),
        "c.scalar": np.array(2.5, dtype=np.float64),
    }
    return ck.Checkpoint("stage1", arrays, {"epoch": 3, "config": {"k": [1, 2]}})


def test_round_trip_is_lossless_and_byte_stable(tmp_path):
    c = sample()
    p = ck.save(c, tmp_path / "x.ckpt")
    back = ck.load(p)
    assert back.stage == "stage1" and back.meta == c.meta
    for k, v in c.arrays.items():
        assert back.arrays[k].dtype == v.dtype and np.array_equal(back.arrays[k], v)
    assert ck.to_bytes(back) == p.read_bytes()


def test_header_layout():
    data = ck.to_bytes(sample())
    assert data[:9] == b"SCINGCKPT"
    assert struct.unpack_from("<I", data, 9)[0] == ck.VERSION


def test_rejects_corruption():
    data = ck.to_bytes(sample())
    with pytest.raises(CheckpointError, match="magic"):
        ck.from_bytes(b"XX" + data[2:])
    bumped = data[:9] + struct.pack("<I", 99) + data[13:]
    with pytest.raises(CheckpointError, match="version"):
        ck.from_bytes(bumped)
    with pytest.raises(CheckpointError):
        ck.from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        ck.from_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        ck.load("/nonexistent/file.ckpt")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        ck.to_bytes(ck.Checkpoint("x", {"i": np.arange(3)}))


def test_model_arrays_round_trip_and_naming():
    cfg = tiny_config()
    m1, m2 = ScingModel(cfg, 5, seed=1), ScingModel(cfg, 5, seed=2)
    arrays = ck.from_bytes(ck.to_bytes(ck.Checkpoint("s", model_arrays(m1)))).arrays
    assert {"prompt.tokens.0", "prompt.tokens.4", "svip.gate.W", "svip.gate.b"} <= set(arrays)
    assert any(k.startswith("svip.mlp.") for k in arrays)
    load_model_arrays(m2, arrays)
    for (n, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), n


def test_missing_field_is_named():
    cfg = tiny_config()
    arrays = model_arrays(ScingModel(cfg, 3, seed=0))
    del arrays["svip.gate.W"]
    with pytest.raises(CheckpointError, match="svip.gate.W"):
        load_model_arrays(ScingModel(cfg, 3, seed=0), arrays)
    arrays = model_arrays(ScingModel(cfg, 3, seed=0))
    with pytest.raises(CheckpointError):
        load_model_arrays(ScingModel(cfg, 4, seed=0), arrays)
