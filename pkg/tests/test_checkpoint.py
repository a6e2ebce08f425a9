"""Checkpoint format: magic, round trips, trainable flags, stage tags."""

import struct

import numpy as np
import pytest

from system15.checkpoint import (MAGIC, CheckpointError, load_checkpoint,
                                 load_models, save_stage1, save_stage2)
from system15.training import init_stage1_models, init_system15
from system15.transformer import ModelConfig

CFG = ModelConfig(L=2, d=8, n_heads=2, V=16, d_ff=16, max_len=32, d_adapter=4)


def test_magic_and_header(tmp_path):
    teacher, student = init_stage1_models(CFG, 0)
    path = str(tmp_path / "s1.ckpt")
    save_stage1(path, teacher, student, extra={"seed": 3})
    raw = open(path, "rb").read()
    assert raw.startswith(MAGIC)
    (hlen,) = struct.unpack("<I", raw[8:12])
    import json
    header = json.loads(raw[12:12 + hlen])
    assert header["stage"] == "stage1"
    assert set(header["models"]) == {"teacher", "student"}
    assert header["extra"]["seed"] == 3


def test_round_trip_bitwise(tmp_path):
    teacher, student = init_stage1_models(CFG, 0)
    path = str(tmp_path / "s1.ckpt")
    save_stage1(path, teacher, student)
    stage, models, cfg, _ = load_models(path)
    assert stage == "stage1"
    assert cfg.to_dict() == CFG.to_dict()
    for name in teacher.params.names():
        np.testing.assert_array_equal(models["teacher"].params[name].data,
                                      teacher.params[name].data)


def test_stage2_flags_preserved(tmp_path):
    _, student = init_stage1_models(CFG, 0)
    sys15 = init_system15(student, 1, router_bias_init=0.85)
    path = str(tmp_path / "s2.ckpt")
    save_stage2(path, sys15)
    stage, models, _, _ = load_models(path)
    assert stage == "stage2"
    loaded = models["system15"]
    for name in sys15.params.names():
        assert loaded.params.is_trainable(name) == sys15.params.is_trainable(name)
    assert loaded.frozen_backbone()
    assert loaded.has_shortcuts


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_payload_is_float32_le(tmp_path):
    teacher, student = init_stage1_models(CFG, 0)
    path = str(tmp_path / "s1.ckpt")
    save_stage1(path, teacher, student)
    raw = open(path, "rb").read()
    (hlen,) = struct.unpack("<I", raw[8:12])
    payload = raw[12 + hlen:]
    n_vals = sum(t.data.size for t in teacher.params._params.values())
    n_vals += sum(t.data.size for t in student.params._params.values())
    assert len(payload) == 4 * n_vals
    first = teacher.params[teacher.params.names()[0]]
    got = np.frombuffer(payload[:4 * first.data.size], dtype="<f4").reshape(first.shape)
    np.testing.assert_array_equal(got, first.data)
