"""Tests for the versioned checkpoint container and the loss-trace CSV.

A standalone parser in this file walks the documented byte layout, so the
format itself is pinned independently of load_checkpoint.
"""

import hashlib
import json
import struct

import numpy as np
import pytest
import torch

from geoedit.checkpoint import (
    MAGIC,
    VERSION,
    load_checkpoint,
    read_loss_csv,
    save_checkpoint,
    write_loss_csv,
)
from geoedit.errors import IncompatibleCheckpointError, ShapeMismatchError
from geoedit.flow import NetConfig, VelocityNet

torch.set_num_threads(1)

SMALL = NetConfig(
    latent_channels=12,
    width=3,
    blocks=2,
    code_channels=4,
    token_dim=4,
    pose_hidden=4,
    pose_n_freqs=1,
    t_n_freqs=1,
    t_hidden=4,
    seed=5,
)


def parse_layout(raw: bytes):
    """Independent walk of the documented container format."""
    off = 0

    def take(n):
        nonlocal off
        assert off + n <= len(raw), "unexpected end of container"
        out = raw[off : off + n]
        off += n
        return out

    magic = take(4)
    (version,) = struct.unpack("<I", take(4))
    digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_blob = take(cfg_len)
    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    offsets = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        dims_at = off
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n = 1
        for s in shape:
            n *= s
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        blobs[name] = data
        offsets[name] = dims_at
    assert off == len(raw), "trailing bytes after the last blob"
    return magic, version, digest, cfg_blob, blobs, offsets


def test_round_trip_is_bitwise(tmp_path):
    net = VelocityNet(SMALL)
    with torch.no_grad():  # make the zero-initialized layers nontrivial
        for p in net.parameters():
            p.add_(torch.randn_like(p) * 0.01)
    path = save_checkpoint(tmp_path / "net.ckpt", net)
    loaded, cfg = load_checkpoint(path)
    assert cfg == SMALL
    state, lstate = net.state_dict(), loaded.state_dict()
    assert set(state) == set(lstate)
    for name in state:
        assert torch.equal(state[name], lstate[name]), name


def test_container_layout_matches_documentation(tmp_path):
    net = VelocityNet(SMALL)
    raw = save_checkpoint(tmp_path / "net.ckpt", net).read_bytes()
    magic, version, digest, cfg_blob, blobs, _ = parse_layout(raw)
    assert magic == MAGIC == b"GEFC"
    assert version == VERSION
    assert hashlib.sha256(cfg_blob).digest() == digest
    assert json.loads(cfg_blob) == SMALL.to_dict()
    state = net.state_dict()
    assert list(blobs) == list(state)  # documented order = state-dict order
    for name, arr in blobs.items():
        assert arr.shape == tuple(state[name].shape)
        assert np.array_equal(arr, state[name].numpy().astype("<f4"))
    # the per-block control layers introduced by the config are all present
    assert "backbone.skip.weight" in blobs
    assert "control.token_proj.weight" in blobs


def test_bad_magic_rejected(tmp_path):
    net = VelocityNet(SMALL)
    raw = bytearray(save_checkpoint(tmp_path / "net.ckpt", net).read_bytes())
    raw[:4] = b"NOPE"
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_bad_version_rejected(tmp_path):
    net = VelocityNet(SMALL)
    raw = bytearray(save_checkpoint(tmp_path / "net.ckpt", net).read_bytes())
    raw[4:8] = struct.pack("<I", VERSION + 1)
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_digest_mismatch_rejected(tmp_path):
    net = VelocityNet(SMALL)
    raw = bytearray(save_checkpoint(tmp_path / "net.ckpt", net).read_bytes())
    # flip one config byte after the digest; sha then disagrees
    raw[44] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_truncation_rejected(tmp_path):
    net = VelocityNet(SMALL)
    raw = save_checkpoint(tmp_path / "net.ckpt", net).read_bytes()
    for cut in (2, 30, len(raw) // 2, len(raw) - 3):
        (tmp_path / "cut.ckpt").write_bytes(raw[:cut])
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(tmp_path / "cut.ckpt")


def test_unknown_parameter_name_rejected(tmp_path):
    net = VelocityNet(SMALL)
    raw = bytearray(save_checkpoint(tmp_path / "net.ckpt", net).read_bytes())
    target = b"backbone.skip.weight"
    idx = raw.find(target)
    assert idx > 0
    raw[idx : idx + 4] = b"XXXX"
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_shape_mismatch_rejected(tmp_path):
    net = VelocityNet(SMALL)
    path = save_checkpoint(tmp_path / "net.ckpt", net)
    raw = bytearray(path.read_bytes())
    _, _, _, _, _, offsets = parse_layout(bytes(raw))
    # transpose the dims of a non-square matrix in place: same byte count,
    # wrong shape
    name = "control.token_proj.weight"
    shape = tuple(net.state_dict()[name].shape)
    assert shape[0] != shape[1]
    at = offsets[name] + 4  # skip ndim
    raw[at : at + 4], raw[at + 4 : at + 8] = (
        struct.pack("<I", shape[1]),
        struct.pack("<I", shape[0]),
    )
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_bad_config_key_rejected(tmp_path):
    cfg = json.dumps({"bogus_field": 1}, sort_keys=True, separators=(",", ":")).encode()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += hashlib.sha256(cfg).digest()
    buf += struct.pack("<I", len(cfg))
    buf += cfg
    buf += struct.pack("<I", 0)
    (tmp_path / "bad.ckpt").write_bytes(bytes(buf))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_loss_csv_round_trip(tmp_path):
    trace = [
        (0, "manipulate", 0.125),
        (0, "removal", 1.5),
        (1, "inpaint", 0.0078125),
        (2, "manipulate", 0.4371882),
    ]
    path = write_loss_csv(trace, tmp_path / "loss.csv")
    back = read_loss_csv(path)
    assert len(back) == len(trace)
    for (s, t, l), (s2, t2, l2) in zip(trace, back):
        assert (s, t) == (s2, t2)
        assert l2 == pytest.approx(l, rel=1e-7)
    header = path.read_text().splitlines()[0]
    assert header == "step,task,loss"
