"""Versioned binary checkpoint container and the loss-trace CSV format.

Layout (all integers little-endian u32 unless noted):

    magic b"GEFC" | version | sha256(config JSON) 32 bytes | config length
    | config JSON (canonical: sorted keys, no spaces) | blob count
    | per blob: name length, name utf-8, ndim, dims..., float32 data

Blobs appear in state-dict order.  The digest binds the weights to the
architecture config; any magic/version/digest mismatch raises
IncompatibleCheckpointError rather than silently loading garbage.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IncompatibleCheckpointError, ShapeMismatchError
from .flow import NetConfig, VelocityNet

MAGIC = b"GEFC"
VERSION = 1


def _canonical_config(cfg: NetConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path: str | Path, net: VelocityNet) -> Path:
    path = Path(path)
    blob = _canonical_config(net.cfg)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(hashlib.sha256(blob).digest())
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    state = net.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        data = tensor.detach().numpy().astype("<f4")
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(data.tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple:
    """Rebuild (net, config) from a container written by save_checkpoint."""
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)

    def take(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise IncompatibleCheckpointError(f"{path}: truncated checkpoint")
        return b

    if take(4) != MAGIC:
        raise IncompatibleCheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {version}, supported {VERSION}"
        )
    digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_blob = take(cfg_len)
    if hashlib.sha256(cfg_blob).digest() != digest:
        raise IncompatibleCheckpointError(f"{path}: config digest mismatch")
    try:
        cfg = NetConfig(**json.loads(cfg_blob))
    except TypeError as exc:
        raise IncompatibleCheckpointError(f"{path}: bad config: {exc}") from exc

    net = VelocityNet(cfg)
    state = net.state_dict()
    (count,) = struct.unpack("<I", take(4))
    loaded = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        loaded[name] = data
    if set(loaded) != set(state):
        raise IncompatibleCheckpointError(
            f"{path}: parameter names do not match the config's architecture"
        )
    with torch.no_grad():
        for name, tensor in state.items():
            if tuple(tensor.shape) != loaded[name].shape:
                raise ShapeMismatchError(
                    f"{name}: checkpoint shape {loaded[name].shape} "
                    f"!= model shape {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.as_tensor(loaded[name].copy(), dtype=tensor.dtype))
    return net, cfg


def write_loss_csv(trace, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "task", "loss"])
        for step, task, loss in trace:
            writer.writerow([step, task, f"{loss:.8g}"])
    return path


def read_loss_csv(path: str | Path):
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append((int(row["step"]), row["task"], float(row["loss"])))
    return rows
