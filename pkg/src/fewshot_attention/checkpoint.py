"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian):

    magic   4 bytes  b"FSAA"
    version u32      currently 1; any other value refuses to load
    body:
      config_len u32, config JSON (UTF-8)
      entry_count u32
      per entry: name_len u32, name (UTF-8), rank u32, dims u32 each,
                 payload of float32 little-endian values
    checksum u32     CRC-32 of the body bytes

Entries cover every trainable tensor plus the BN running statistics, so a
load(save(model)) round trip reproduces all of them bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .model import AdaptiveAttentionNetwork, ModelConfig

MAGIC = b"FSAA"
VERSION = 1


def _entries(model: AdaptiveAttentionNetwork):
    for name, t in model.named_parameters():
        yield name, t.data
    for name, arr in model.named_stats():
        yield name, arr


def save_checkpoint(path, model: AdaptiveAttentionNetwork):
    body = io.BytesIO()
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(config_blob)))
    body.write(config_blob)
    entries = list(_entries(model))
    body.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        name_b = name.encode("utf-8")
        body.write(struct.pack("<I", len(name_b)))
        body.write(name_b)
        body.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            body.write(struct.pack("<I", d))
        body.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> AdaptiveAttentionNetwork:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    body, checksum = raw[8:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    r = _Reader(body, str(path))
    try:
        config = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config record: {exc}") from exc
    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes in body")

    model = AdaptiveAttentionNetwork(config, seed=0)
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"{path}: state does not match config: {exc}") from exc
    return model
