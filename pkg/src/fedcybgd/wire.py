"""Little-endian binary wire format for blocks, views, deltas and checkpoints.

One message carries one model part (a block, the embedding or the head)::

    offset  size  field
    0       4     magic b"FCBG"
    4       1     format version (1)
    5       1     message kind (1 view, 2 delta, 3 checkpoint-block)
    6       1     flags (bit 0 present, bit 1 responsible, bit 2 updated this round)
    7       1     reserved, zero
    8       4     round t                      uint32
    12      4     client id                    int32, -1 for the server
    16      4     block index                  int32, -1 embedding, -2 head
    20      8     residual scale               float64
    28      2     tensor count n               uint16
    then n tensor records:
            2     name length L                uint16
            L     name, utf-8
            1     dtype code (1 f16, 2 f32, 3 f64)
            1     ndim
            4*nd  extents                      uint32 each
            ...   payload, row-major little-endian
    last    4     CRC-32 of every preceding byte

A message stream is a plain concatenation of messages.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FCBG"
VERSION = 1
KIND_VIEW, KIND_DELTA, KIND_CHECKPOINT = 1, 2, 3
EMBED_INDEX, HEAD_INDEX = -1, -2
FLAG_PRESENT, FLAG_RESPONSIBLE, FLAG_UPDATED = 0x01, 0x02, 0x04

_HEADER = struct.Struct("<4sBBBBIiidH")
_TENSOR_HEAD = struct.Struct("<H")
_CRC = struct.Struct("<I")

DTYPE_CODES = {np.dtype("<f2"): 1, np.dtype("<f4"): 2, np.dtype("<f8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

HEADER_SIZE = _HEADER.size
CHECKSUM_SIZE = _CRC.size


class WireFormatError(ValueError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at byte offset {offset}")
        self.reason = reason
        self.offset = offset


@dataclass
class WireMessage:
    kind: int
    round: int = 0
    client: int = -1
    block: int = 0
    scale: float = 1.0
    flags: int = FLAG_PRESENT
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def present(self) -> bool:
        return bool(self.flags & FLAG_PRESENT)

    def payload_bytes(self) -> int:
        return int(sum(t.nbytes for t in self.tensors.values()))


def tensor_record_overhead(name: str, ndim: int) -> int:
    return _TENSOR_HEAD.size + len(name.encode("utf-8")) + 2 + 4 * ndim


def message_overhead(msg: WireMessage) -> int:
    """Serialized length minus payload bytes."""
    return HEADER_SIZE + CHECKSUM_SIZE + sum(
        tensor_record_overhead(k, np.ndim(v)) for k, v in msg.tensors.items()
    )


def serialize_block(msg: WireMessage) -> bytes:
    if len(msg.tensors) > 0xFFFF:
        raise ValueError("too many tensors in one message")
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, msg.kind, msg.flags, 0,
            msg.round, msg.client, msg.block, float(msg.scale), len(msg.tensors),
        )
    ]
    for name, arr in msg.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(_TENSOR_HEAD.pack(len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _parse(buf: memoryview, start: int) -> tuple[WireMessage, int]:
    """Parse one message beginning at ``start``; returns it and the end offset."""
    end_hdr = start + HEADER_SIZE
    if len(buf) < end_hdr:
        raise WireFormatError("truncated header", start)
    magic, version, kind, flags, _, rnd, client, block, scale, n = _HEADER.unpack_from(buf, start)
    if magic != MAGIC:
        raise WireFormatError("bad magic", start)
    if version != VERSION:
        raise WireFormatError(f"unsupported version {version}", start + 4)
    if kind not in (KIND_VIEW, KIND_DELTA, KIND_CHECKPOINT):
        raise WireFormatError(f"unknown message kind {kind}", start + 5)
    pos = end_hdr
    specs = []
    for _ in range(n):
        if len(buf) < pos + 2:
            raise WireFormatError("truncated tensor record", pos)
        (ln,) = _TENSOR_HEAD.unpack_from(buf, pos)
        pos += 2
        if len(buf) < pos + ln + 2:
            raise WireFormatError("truncated tensor record", pos)
        try:
            name = bytes(buf[pos:pos + ln]).decode("utf-8")
        except UnicodeDecodeError:
            raise WireFormatError("tensor name is not utf-8", pos) from None
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        if code not in CODE_DTYPES:
            raise WireFormatError(f"unknown dtype code {code}", pos)
        pos += 2
        if len(buf) < pos + 4 * ndim:
            raise WireFormatError("truncated shape", pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(buf) < pos + nbytes:
            raise WireFormatError("truncated payload", pos)
        specs.append((name, dt, shape, pos))
        pos += nbytes
    if len(buf) < pos + CHECKSUM_SIZE:
        raise WireFormatError("missing checksum", pos)
    (crc,) = _CRC.unpack_from(buf, pos)
    if crc != zlib.crc32(buf[start:pos]):
        raise WireFormatError("checksum mismatch", pos)
    tensors = {}
    for name, dt, shape, off in specs:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    msg = WireMessage(kind, rnd, client, block, scale, flags, tensors)
    return msg, pos + CHECKSUM_SIZE


def deserialize_block(data: bytes) -> WireMessage:
    buf = memoryview(data)
    msg, end = _parse(buf, 0)
    if end != len(buf):
        raise WireFormatError("trailing bytes after message", end)
    return msg


def serialize_stream(messages) -> bytes:
    return b"".join(serialize_block(m) for m in messages)


def deserialize_stream(data: bytes) -> list[WireMessage]:
    buf = memoryview(data)
    out, pos = [], 0
    while pos < len(buf):
        msg, pos = _parse(buf, pos)
        out.append(msg)
    return out
