"""Tag-length-value codec used for certificates, handshake and command frames.

Layout of one field: ``tag:u8 | len:u16 big-endian | value``.
"""

from __future__ import annotations

import struct
from typing import Iterable

from .errors import DecodeError

MAX_VALUE = 0xFFFF


def tlv(tag: int, value: bytes) -> bytes:
    if not 0 <= tag <= 0xFF:
        raise ValueError(f"tag out of range: {tag}")
    if len(value) > MAX_VALUE:
        raise ValueError(f"value too long for TLV: {len(value)} bytes")
    return struct.pack(">BH", tag, len(value)) + value


def encode(fields: Iterable[tuple[int, bytes]]) -> bytes:
    return b"".join(tlv(tag, value) for tag, value in fields)


def decode(data: bytes) -> list[tuple[int, bytes]]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 3 > len(data):
            raise DecodeError("truncated TLV header")
        tag, length = struct.unpack_from(">BH", data, pos)
        pos += 3
        if pos + length > len(data):
            raise DecodeError(f"truncated TLV value for tag {tag:#04x}")
        out.append((tag, bytes(data[pos:pos + length])))
        pos += length
    return out


def decode_map(data: bytes, required: Iterable[int] = (), repeated: Iterable[int] = ()) -> dict:
    """Decode into ``{tag: value}``; tags in ``repeated`` map to lists."""
    repeated = set(repeated)
    fields: dict = {tag: [] for tag in repeated}
    for tag, value in decode(data):
        if tag in repeated:
            fields[tag].append(value)
        elif tag in fields:
            raise DecodeError(f"duplicate tag {tag:#04x}")
        else:
            fields[tag] = value
    missing = [t for t in required if t not in fields]
    if missing:
        raise DecodeError("missing tags: " + ", ".join(f"{t:#04x}" for t in missing))
    return fields


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def i64(value: int) -> bytes:
    return struct.pack(">q", value)


def read_u64(value: bytes) -> int:
    if len(value) != 8:
        raise DecodeError(f"expected 8-byte integer, got {len(value)}")
    return struct.unpack(">Q", value)[0]


def read_u8(value: bytes) -> int:
    if len(value) != 1:
        raise DecodeError(f"expected 1-byte integer, got {len(value)}")
    return value[0]


def fixed(value: bytes, size: int, what: str) -> bytes:
    if len(value) != size:
        raise DecodeError(f"{what}: expected {size} bytes, got {len(value)}")
    return value
