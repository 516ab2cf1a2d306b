"""FLLP parameter file / message format.

Little-endian layout::

    b"FLLP"            magic
    u16                format version
    u32                tensor count
    per tensor:
        u16 + bytes    UTF-8 name
        u8             rank
        u32 * rank     dims
        f64 * prod     payload, row-major
    u32                CRC32 of every preceding byte

The checksum is verified before anything else is interpreted, so any
corrupted or truncated file fails with :class:`ChecksumError` unless it is
shorter than the fixed header.
"""

from __future__ import annotations

import struct
import zlib
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"FLLP"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")

Layout = List[Tuple[str, Tuple[int, ...]]]


class WireFormatError(ValueError):
    pass


class BadMagicError(WireFormatError):
    pass


class VersionError(WireFormatError):
    pass


class TruncatedError(WireFormatError):
    pass


class ChecksumError(WireFormatError):
    pass


def serialize_params(vector: np.ndarray, shapes: Sequence[Tuple[str, Sequence[int]]]) -> bytes:
    """Encode a flat parameter vector split into named tensors."""
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(int(np.prod(s)) for _, s in shapes)
    if vector.shape != (total,):
        raise WireFormatError(f"vector length {vector.size} does not match layout total {total}")
    if not np.isfinite(vector).all():
        raise WireFormatError("refusing to serialize non-finite parameters")
    parts = [_HEADER.pack(MAGIC, VERSION, len(shapes))]
    pos = 0
    for name, shape in shapes:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or len(shape) > 0xFF:
            raise WireFormatError(f"tensor {name!r}: name or rank too large")
        n = int(np.prod(shape))
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        parts.append(vector[pos: pos + n].astype("<f8").tobytes())
        pos += n
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def deserialize_params(blob: bytes) -> Tuple[np.ndarray, Layout]:
    """Decode bytes produced by :func:`serialize_params`."""
    blob = bytes(blob)
    if len(blob) < _HEADER.size + _CRC.size:
        raise TruncatedError(f"{len(blob)} bytes is shorter than the fixed header")
    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch")
    magic, version, count = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    pos = _HEADER.size
    chunks: List[np.ndarray] = []
    shapes: Layout = []

    def need(n: int) -> None:
        if pos + n > len(body):
            raise TruncatedError("payload ends inside a tensor record")

    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(name_len + 1)
        name = body[pos: pos + name_len].decode("utf-8")
        rank = body[pos + name_len]
        pos += name_len + 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(8 * n)
        chunks.append(np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
        shapes.append((name, tuple(int(d) for d in dims)))
    if pos != len(body):
        raise WireFormatError(f"{len(body) - pos} trailing bytes after last tensor")
    vector = np.concatenate(chunks) if chunks else np.zeros(0)
    return vector, shapes


def save_params(path, params) -> None:
    """Write a :class:`~fedlaser.model.ParamSet` to ``path``."""
    with open(path, "wb") as fh:
        fh.write(serialize_params(params.flatten(), params.layout))


def load_params(path):
    from fedlaser.model import ParamSet

    with open(path, "rb") as fh:
        vector, shapes = deserialize_params(fh.read())
    return ParamSet.unflatten(vector, shapes)
