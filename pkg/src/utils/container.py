"""
Binary section container used for scene snapshots and editor checkpoints.

All integers are little-endian. Layout::

    header   magic b"DGSC" | version u16 | kind 16s (ASCII, NUL padded)
             | section_count u32 | header_crc u32 (CRC32 of the preceding bytes)
    section  name_len u16 | name (UTF-8) | dtype u8 | ndim u8 | shape u64 * ndim
             | nbytes u64 | payload | crc u32 (CRC32 of everything from name_len
             through payload)

dtype codes: 0 raw bytes, 1 float32, 2 float64, 3 int64, 4 uint8, 5 UTF-8 JSON.
Sections are written in insertion order; readers never return partial data.
"""

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np

from src.utils.exceptions import (
    SnapshotChecksumError,
    SnapshotFormatError,
    SnapshotMissingError,
    SnapshotTruncatedError,
    SnapshotVersionError,
)

MAGIC = b"DGSC"
VERSION = 1

_HEADER = struct.Struct("<4sH16sI")
_DTYPES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
}
_CODES = {code: dtype for dtype, code in _DTYPES.items()}
_RAW = 0
_JSON = 5

Payload = Union[np.ndarray, bytes, Dict[str, Any]]


def _encode_section(name: str, value: Payload) -> bytes:
    name_bytes = name.encode("utf-8")
    if isinstance(value, dict):
        code, shape = _JSON, ()
        payload = json.dumps(value, sort_keys=True).encode("utf-8")
    elif isinstance(value, (bytes, bytearray)):
        code, shape, payload = _RAW, (), bytes(value)
    else:
        array = np.asarray(value)
        if array.dtype not in _DTYPES:
            raise TypeError(f"Unsupported dtype for section {name!r}: {array.dtype}")
        code, shape = _DTYPES[array.dtype], array.shape
        payload = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()

    body = struct.pack("<H", len(name_bytes)) + name_bytes
    body += struct.pack("<BB", code, len(shape))
    body += struct.pack(f"<{len(shape)}Q", *shape) if shape else b""
    body += struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def write_container(path: Union[str, Path], kind: str, sections: Mapping[str, Payload]) -> None:
    """Write sections to ``path`` atomically."""
    path = Path(path)
    kind_bytes = kind.encode("ascii")
    if len(kind_bytes) > 16:
        raise ValueError("container kind is limited to 16 ASCII characters")

    header = _HEADER.pack(MAGIC, VERSION, kind_bytes, len(sections))
    chunks = [header, struct.pack("<I", zlib.crc32(header))]
    chunks.extend(_encode_section(name, value) for name, value in sections.items())

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise SnapshotTruncatedError(
                f"Container truncated at byte {len(self.data)} (needed {self.offset + n})"
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: Union[str, Path], expected_kind: str = None) -> Dict[str, Payload]:
    """Read and verify every section of a container."""
    try:
        with open(path, "rb") as f:
            reader = _Reader(f.read())
    except OSError as e:
        raise SnapshotMissingError(f"cannot read container {path}: {e.strerror or e}") from e

    if len(reader.data) < 4 or reader.data[:4] != MAGIC:
        raise SnapshotFormatError(f"{path} is not a scene container")
    if len(reader.data) >= 6:
        (version,) = struct.unpack_from("<H", reader.data, 4)
        if version != VERSION:
            raise SnapshotVersionError(f"{path} has format version {version}, expected {VERSION}")

    header = reader.take(_HEADER.size)
    (header_crc,) = reader.unpack("<I")
    if zlib.crc32(header) != header_crc:
        raise SnapshotChecksumError(f"{path}: header checksum mismatch")
    _, _, kind_bytes, count = _HEADER.unpack(header)
    kind = kind_bytes.rstrip(b"\0").decode("ascii")
    if expected_kind is not None and kind != expected_kind:
        raise SnapshotFormatError(f"{path} holds a {kind!r} container, expected {expected_kind!r}")

    sections: Dict[str, Payload] = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H")
        raw_name = reader.take(name_len)
        code, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        payload = reader.take(nbytes)
        body = reader.data[start:reader.offset]
        (crc,) = reader.unpack("<I")
        if zlib.crc32(body) != crc:
            raise SnapshotChecksumError(f"{path}: section {raw_name!r} failed its checksum")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SnapshotFormatError(f"{path}: section name {raw_name!r} is not UTF-8") from e

        if code not in _CODES and code not in (_JSON, _RAW):
            raise SnapshotFormatError(f"{path}: section {name!r} has unknown dtype code {code}")
        try:
            if code == _JSON:
                sections[name] = json.loads(payload.decode("utf-8"))
            elif code == _RAW:
                sections[name] = payload
            else:
                dtype = _CODES[code].newbyteorder("<")
                sections[name] = np.frombuffer(payload, dtype=dtype).astype(_CODES[code]).reshape(shape)
        except ValueError as e:
            raise SnapshotFormatError(f"{path}: section {name!r} payload does not decode: {e}") from e

    if reader.offset != len(reader.data):
        raise SnapshotFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return sections
