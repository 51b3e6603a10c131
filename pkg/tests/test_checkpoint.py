"""Checkpoint container format: magic, header, payload, bit-exactness."""

import numpy as np
import pytest

from cdnz.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from cdnz.denoiser import DenoiserConfig, build_denoiser


def test_magic_bytes(tmp_path):
    p = tmp_path / "c.cdnz"
    save_checkpoint(p, {"w": np.zeros(3, dtype=np.float32)}, {"sigma": "25"})
    blob = p.read_bytes()
    assert blob.startswith(MAGIC)
    assert b"tensor w 3 0\n" in blob
    assert b"meta sigma 25\n" in blob


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.w": rng.standard_normal((4, 3, 2, 2)).astype(np.float32),
        "a.b": rng.standard_normal(4).astype(np.float32),
        "stats": rng.standard_normal(7).astype(np.float32),
    }
    meta = {"sigma": "25", "config": "scales=3;fusion=concat",
            "iteration": "100", "note": "two words and a\nnewline"}
    p1 = tmp_path / "c1.cdnz"
    save_checkpoint(p1, arrays, meta)
    back, meta2 = load_checkpoint(p1)
    assert meta2 == meta
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == np.float32
    p2 = tmp_path / "c2.cdnz"
    save_checkpoint(p2, back, meta2)
    assert p1.read_bytes() == p2.read_bytes()


def test_offsets_are_byte_positions(tmp_path):
    p = tmp_path / "c.cdnz"
    save_checkpoint(p, {"a": np.arange(2, dtype=np.float32),
                        "b": np.arange(5, dtype=np.float32)}, {})
    text = p.read_bytes().split(b"end\n")[0].decode()
    lines = [l for l in text.splitlines() if l.startswith("tensor")]
    assert lines[0].split() == ["tensor", "a", "2", "0"]
    assert lines[1].split() == ["tensor", "b", "5", "8"]


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE\n")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    p2 = tmp_path / "trunc"
    save_checkpoint(p2, {"w": np.zeros(10, dtype=np.float32)}, {})
    blob = p2.read_bytes()
    p2.write_bytes(blob[:-20])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(p2)


def test_name_validation(tmp_path):
    with pytest.raises(CheckpointError, match="whitespace"):
        save_checkpoint(tmp_path / "x", {"bad name": np.zeros(1, dtype=np.float32)}, {})


def test_network_state_roundtrip(tmp_path):
    net = build_denoiser(DenoiserConfig(scales=2), seed=3)
    p = tmp_path / "net.cdnz"
    save_checkpoint(p, net.state_arrays(), {"sigma": "25"})
    arrays, _ = load_checkpoint(p)
    net2 = build_denoiser(DenoiserConfig(scales=2), seed=999)
    net2.load_state_arrays(arrays)
    for a, b in zip(net.parameters(), net2.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.value.data, b.value.data)
    for name, buf in net.named_buffers().items():
        assert np.array_equal(buf, net2.named_buffers()[name])


def test_load_state_rejects_mismatch():
    net = build_denoiser(DenoiserConfig(scales=2), seed=3)
    state = net.state_arrays()
    bad = dict(state)
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError, match="missing"):
        net.load_state_arrays(bad)
