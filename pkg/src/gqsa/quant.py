"""Per-group asymmetric uniform quantization and code packing.

    s = (max - min) / (2**n - 1)
    z = -round(min / s)
    code = clamp(round(w / s) + round(z), 0, 2**n - 1)
    w_hat = (code - z) * s

Rounding is half-away-from-zero everywhere. ``z`` is kept as a float
because end-to-end tuning moves it continuously; quantization rounds it.

The ``*_rows`` functions operate on an ``(m, G)`` array holding ``m`` groups
at once and are what the rest of the package uses; the single-group
functions wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 3, 4, 8)
DEFAULT_BITS = 4
SCALE_EPS = 1e-8


class DomainError(ValueError):
    """Input outside the domain of a quantization routine."""


def check_bits(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise DomainError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    return int(bits)


def qmax(bits: int) -> int:
    return (1 << bits) - 1


def round_half_away(x):
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(x.dtype, copy=False)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero: float
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        check_bits(self.bits)
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")


@dataclass
class QuantizedGroup:
    codes: np.ndarray
    params: QuantParams

    @property
    def group_size(self) -> int:
        return len(self.codes)


def qparams_rows(groups: np.ndarray, bits: int):
    """Scale and zero for every row of ``groups``; returns two float32 arrays."""
    bits = check_bits(bits)
    g = np.asarray(groups, dtype=np.float32)
    if g.ndim != 2 or g.shape[1] == 0:
        raise DomainError("groups must be a non-empty (m, G) array")
    if not np.isfinite(g).all():
        raise DomainError("non-finite value in group")
    lo = g.min(axis=1)
    hi = g.max(axis=1)
    scale = (hi - lo) / np.float32(qmax(bits))
    degenerate = hi == lo
    scale = np.where(degenerate, np.float32(SCALE_EPS), scale).astype(np.float32)
    zero = -round_half_away(lo / scale)
    zero = np.where(degenerate, np.clip(zero, 0, qmax(bits)), zero).astype(np.float32)
    return scale, zero


def quantize_rows(groups, scales, zeros, bits: int, return_unclamped: bool = False):
    """Integer codes (uint8) for each group row; optionally the pre-clamp codes too."""
    bits = check_bits(bits)
    g = np.asarray(groups, dtype=np.float32)
    s = np.asarray(scales, dtype=np.float32)[:, None]
    z = round_half_away(np.asarray(zeros, dtype=np.float32))[:, None]
    raw = round_half_away(g / s) + z
    codes = np.clip(raw, 0, qmax(bits)).astype(np.uint8)
    if return_unclamped:
        return codes, raw
    return codes


def dequantize_rows(codes, scales, zeros) -> np.ndarray:
    c = np.asarray(codes, dtype=np.float32)
    s = np.asarray(scales, dtype=np.float32)[:, None]
    z = np.asarray(zeros, dtype=np.float32)[:, None]
    return (c - z) * s


def compute_qparams(group, bits: int = DEFAULT_BITS) -> QuantParams:
    g = np.asarray(group, dtype=np.float32).reshape(1, -1)
    if g.size == 0:
        raise DomainError("empty group")
    s, z = qparams_rows(g, bits)
    return QuantParams(float(s[0]), float(z[0]), bits)


def quantize_group(group, params: QuantParams) -> QuantizedGroup:
    g = np.asarray(group, dtype=np.float32).reshape(1, -1)
    codes = quantize_rows(g, [params.scale], [params.zero], params.bits)[0]
    return QuantizedGroup(codes, params)


def dequantize_group(q: QuantizedGroup) -> np.ndarray:
    return dequantize_rows(q.codes[None, :], [q.params.scale], [q.params.zero])[0]


# -- packing ----------------------------------------------------------------


@dataclass
class PackedNibbles:
    data: bytes
    count: int


def _check_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > qmax(bits)):
        raise DomainError(f"codes must lie in [0, {qmax(bits)}]")
    return c.astype(np.uint8).ravel()


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack codes into a little-endian bit stream (code k at bits [k*n, (k+1)*n)).

    For 4 bits this puts code 2k in the low nibble of byte k. Returns a uint8
    array of length ceil(len(codes) * bits / 8) with unused high bits zero.
    """
    bits = check_bits(bits)
    c = _check_codes(codes, bits)
    if bits == 8:
        return c.copy()
    if bits == 4:
        if c.size % 2:
            c = np.append(c, np.uint8(0))
        return (c[0::2] | (c[1::2] << 4)).astype(np.uint8)
    bitplanes = ((c[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bitplanes.ravel(), bitorder="little")


def unpack_codes(packed, bits: int, start: int = 0, count: int | None = None) -> np.ndarray:
    """Read ``count`` codes beginning at code index ``start`` of a packed stream."""
    bits = check_bits(bits)
    buf = np.frombuffer(packed, dtype=np.uint8) if isinstance(packed, (bytes, bytearray)) else packed
    if count is None:
        count = (buf.size * 8) // bits - start
    if count <= 0:
        return np.zeros(0, dtype=np.uint8)
    bit0 = start * bits
    if bits == 8:
        return buf[start:start + count].copy()
    if bits == 4 and bit0 % 8 == 0:
        b = buf[bit0 // 8:(bit0 + count * 4 + 7) // 8]
        out = np.empty(b.size * 2, dtype=np.uint8)
        out[0::2] = b & 0x0F
        out[1::2] = b >> 4
        return out[:count]
    lo_byte = bit0 // 8
    hi_byte = (bit0 + count * bits + 7) // 8
    stream = np.unpackbits(buf[lo_byte:hi_byte], bitorder="little")
    off = bit0 - lo_byte * 8
    planes = stream[off:off + count * bits].reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (planes * weights).sum(axis=1).astype(np.uint8)


def pack_nibbles(codes) -> PackedNibbles:
    c = _check_codes(codes, 4)
    return PackedNibbles(pack_codes(c, 4).tobytes(), int(c.size))


def unpack_nibbles(p: PackedNibbles, count: int | None = None) -> np.ndarray:
    n = p.count if count is None else count
    if len(p.data) < (n + 1) // 2:
        raise DomainError("packed buffer shorter than requested count")
    return unpack_codes(p.data, 4, 0, n)


def packed_nbytes(n_codes: int, bits: int) -> int:
    return (n_codes * bits + 7) // 8
