"""Reader and writer for ``.gqs`` files.

Little-endian layout::

    "GQS1"  version:u32  layer_count:u32
    per layer:
        rows:u32 cols:u32 group_size:u32 bits:u32 has_bias:u8 pad[3]
        row_index  (rows + 1) x u32
        group_cols nnzg x u16        (padded to 4 bytes)
        scales     nnzg x f16        (padded to 4 bytes)
        zeros      nnzg x f16        (padded to 4 bytes)
        codes      ceil(nnzg * G * bits / 8) bytes, bit-packed (padded to 4 bytes)
        bias       rows x f32        (only if has_bias)
    crc32:u32   over every byte after the magic

``nnzg`` is not stored; it is ``row_index[rows]``. Scale and zero are written
as binary16 with round-to-nearest-even.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import BinaryIO, List, Sequence, Tuple, Union

import numpy as np

from ..quant import packed_nbytes
from .layer import GQSLayer, LayerValidationError

MAGIC = b"GQS1"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER_HEADER = struct.Struct("<IIIIB3x")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """Base class for every ``.gqs`` parse failure."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def _pad4(n: int) -> int:
    return (n + 3) & ~3


def _padded(b: bytes) -> bytes:
    return b + b"\0" * (_pad4(len(b)) - len(b))


def crc32(data: bytes) -> int:
    """CRC-32, reflected polynomial 0xEDB88320, init and final xor 0xFFFFFFFF."""
    return zlib.crc32(data) & 0xFFFFFFFF


def _encode_layer(layer: GQSLayer) -> bytes:
    layer.validate()
    has_bias = layer.bias is not None
    parts = [
        _LAYER_HEADER.pack(layer.rows, layer.cols, layer.group_size, layer.bits, int(has_bias)),
        layer.row_index.astype("<u4").tobytes(),
        _padded(layer.group_cols.astype("<u2").tobytes()),
        _padded(layer.scales.astype("<f2").tobytes()),
        _padded(layer.zeros.astype("<f2").tobytes()),
        _padded(layer.packed_codes.tobytes()),
    ]
    if has_bias:
        parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def serialize(layers: Sequence[GQSLayer]) -> bytes:
    layers = list(layers)
    body = _HEADER.pack(MAGIC, VERSION, len(layers)) + b"".join(_encode_layer(l) for l in layers)
    return body + _CRC.pack(crc32(body[4:]))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > self.end:
            raise TruncatedError(f"stream ends inside {what} (need {n} bytes at offset {self.pos})")
        view = memoryview(self.data)[self.pos:self.pos + n]
        self.pos += n
        return view

    def array(self, dtype: str, count: int, what: str, pad: bool = True) -> Tuple[np.ndarray, int, int]:
        size = np.dtype(dtype).itemsize * count
        start = self.pos
        raw = self.take(_pad4(size) if pad else size, what)
        return np.frombuffer(raw[:size], dtype=dtype), start, size


def _walk(data: bytes, end: int, decode: bool):
    """Walk the layer records, returning (layers, sections).

    ``sections`` lists ``(layer, name, offset, nbytes)`` for every payload
    array, excluding headers and padding.
    """
    r = _Reader(data, end)
    _, _, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    layers: List[GQSLayer] = []
    sections = []
    for i in range(count):
        rows, cols, g, bits, has_bias = _LAYER_HEADER.unpack(r.take(_LAYER_HEADER.size, f"layer {i} header"))
        if g == 0 or bits not in (2, 3, 4, 8) or has_bias > 1:
            raise FormatError(f"layer {i}: invalid header fields")
        row_index, off, n = r.array("<u4", rows + 1, f"layer {i} row_index", pad=False)
        sections.append((i, "row_index", off, n))
        nnzg = int(row_index[-1])
        group_cols, off, n = r.array("<u2", nnzg, f"layer {i} group_cols")
        sections.append((i, "group_cols", off, n))
        scales, off, n = r.array("<f2", nnzg, f"layer {i} scales")
        sections.append((i, "scales", off, n))
        zeros, off, n = r.array("<f2", nnzg, f"layer {i} zeros")
        sections.append((i, "zeros", off, n))
        codes, off, n = r.array("u1", packed_nbytes(nnzg * g, bits), f"layer {i} codes")
        sections.append((i, "codes", off, n))
        bias = None
        if has_bias:
            bias, off, n = r.array("<f4", rows, f"layer {i} bias", pad=False)
            sections.append((i, "bias", off, n))
        if decode:
            layer = GQSLayer(
                rows, cols, g, bits,
                row_index.astype(np.int64), group_cols.astype(np.int64), codes.copy(),
                scales.astype(np.float32), zeros.astype(np.float32),
                None if bias is None else bias.astype(np.float32),
            )
            try:
                layer.validate()
            except LayerValidationError as exc:
                raise FormatError(f"layer {i}: {exc}") from exc
            layers.append(layer)
    if r.pos != end:
        raise FormatError(f"{end - r.pos} unexpected bytes before the checksum")
    return layers, sections


def _check_envelope(data: bytes) -> None:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(bytes(data)):
            raise TruncatedError("stream shorter than the magic")
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedError("stream shorter than header plus checksum")
    stored = _CRC.unpack_from(data, len(data) - _CRC.size)[0]
    if crc32(data[4:-_CRC.size]) != stored:
        # Distinguish a short stream from corrupted bytes by checking whether
        # the declared structure fits in what is there.
        try:
            _walk(data, len(data) - _CRC.size, decode=False)
        except TruncatedError:
            raise
        except FormatError:
            pass
        raise ChecksumError(f"CRC mismatch (stored {stored:#010x})")
    version = _HEADER.unpack_from(data)[1]
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")


def deserialize(data: bytes) -> List[GQSLayer]:
    data = bytes(data)
    _check_envelope(data)
    layers, _ = _walk(data, len(data) - _CRC.size, decode=True)
    return layers


def payload_sections(data: bytes):
    """``(layer, name, offset, nbytes)`` for each payload array in a valid stream."""
    data = bytes(data)
    _check_envelope(data)
    return _walk(data, len(data) - _CRC.size, decode=False)[1]


def payload_nbytes(data: bytes) -> int:
    return sum(n for *_, n in payload_sections(data))


def write_file(path: Union[str, os.PathLike], layers: Sequence[GQSLayer]) -> int:
    blob = serialize(layers)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_file(path: Union[str, os.PathLike, BinaryIO]) -> List[GQSLayer]:
    if hasattr(path, "read"):
        return deserialize(path.read())
    with open(path, "rb") as fh:
        return deserialize(fh.read())
