"""ECGW weights archive.

Little-endian layout::

    b"ECGW"  u32 version (=1)
    u32 config length, config JSON (utf-8)
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype tag, u8 ndim, u32 dims[ndim], payload
    u32 CRC32 of every preceding byte

Dtype tags: 0 float32, 1 float64, 2 int64.  Trainable tensors come first in
canonical order, then the batch-norm buffers.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import BadMagic, CrcMismatch, DataError, NameSetMismatch, SizeMismatch
from .model import ModelConfig, ModelParams, canonical_names

MAGIC = b"ECGW"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {v.str: k for k, v in _TAGS.items()}


def encode(params: ModelParams) -> bytes:
    config = params.config.to_json().encode()
    state = params.state_dict()
    names = canonical_names(params.config)
    out = [MAGIC, struct.pack("<II", VERSION, len(config)), config, struct.pack("<I", len(names))]
    for name in names:
        arr = np.asarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if arr.dtype.str not in _TAG_OF:
            raise DataError(f"{name}: dtype {arr.dtype} has no archive tag")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<BB{arr.ndim}I", _TAG_OF[arr.dtype.str], arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SizeMismatch("archive truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes, expected: ModelConfig | None = None) -> ModelParams:
    if len(blob) < 12:
        raise BadMagic("file too short to be an ECGW archive")
    # CRC before magic, so a flipped byte anywhere reads as corruption
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatch("archive CRC32 does not match its contents")
    if body[:4] != MAGIC:
        raise BadMagic("not an ECGW archive")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported archive version {version}")
    config = ModelConfig.from_json(r.take(cfg_len).decode())
    (count,) = r.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in _TAGS:
            raise DataError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{ndim}I")
        dtype = _TAGS[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        state[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(dims).copy()
    if r.pos != len(body):
        raise SizeMismatch("trailing bytes after the last tensor")

    want = set(canonical_names(config if expected is None else expected))
    if set(state) != want:
        missing, extra = sorted(want - set(state)), sorted(set(state) - want)
        raise NameSetMismatch(f"archive names differ from the model layout "
                              f"(missing {missing[:3]}, unexpected {extra[:3]})")
    if expected is not None and expected != config:
        raise NameSetMismatch("archive was saved with a different model configuration")
    return ModelParams.from_state_dict(config, state)


def save_weights(params: ModelParams, path) -> int:
    """Write the archive; returns its size in bytes."""
    blob = encode(params)
    Path(path).write_bytes(blob)
    return len(blob)


def load_weights(path, expected: ModelConfig | None = None) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise DataError(f"weights file not found: {path}")
    return decode(path.read_bytes(), expected)
