"""Group-sparse quantized weight layer in block-sparse-row layout.

A layer stores only its kept groups. ``row_index[r]:row_index[r + 1]`` is the
slice of kept groups belonging to output row ``r``; ``group_cols[k]`` is the
column of group ``k`` in group units, so it covers input columns
``[group_cols[k] * G, (group_cols[k] + 1) * G)``. Codes of group ``k`` sit at
code positions ``[k * G, (k + 1) * G)`` of the packed stream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..core import ShapeError, as_matrix
from ..quant import (
    check_bits,
    dequantize_rows,
    pack_codes,
    packed_nbytes,
    qmax,
    qparams_rows,
    quantize_rows,
    round_half_away,
    unpack_codes,
)

MAX_GROUP_COLS = 1 << 16


class LayerValidationError(ValueError):
    pass


def snap_f16(values) -> np.ndarray:
    """Round float32 values to the nearest binary16 value (ties to even)."""
    return np.asarray(values, dtype=np.float32).astype(np.float16).astype(np.float32)


def _ceil_f16(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float32)
    h = v.astype(np.float16)
    low = h.astype(np.float32) < v
    h[low] = np.nextafter(h[low], np.float16(np.inf))
    return h.astype(np.float32)


def storage_qparams(groups: np.ndarray, bits: int):
    """Per-group scale/zero that survive the binary16 on-disk encoding exactly.

    The scale is rounded *up* to binary16 so the min..max range still fits in
    ``2**bits - 1`` steps, and the zero is recomputed against that scale.
    """
    scale, _ = qparams_rows(groups, bits)
    scale = _ceil_f16(scale)
    if not np.isfinite(scale).all():
        raise LayerValidationError("group range too large for a binary16 scale")
    g = np.asarray(groups, dtype=np.float32)
    lo = g.min(axis=1)
    zero = -round_half_away(lo / scale)
    degenerate = g.max(axis=1) == lo
    zero = np.where(degenerate, np.clip(zero, 0, qmax(bits)), zero)
    return scale, snap_f16(zero)


@dataclass
class GQSLayer:
    rows: int
    cols: int
    group_size: int
    bits: int
    row_index: np.ndarray  # (rows + 1,) int64
    group_cols: np.ndarray  # (nnzg,) int64
    packed_codes: np.ndarray  # uint8 bit stream
    scales: np.ndarray  # (nnzg,) float32
    zeros: np.ndarray  # (nnzg,) float32
    bias: Optional[np.ndarray] = None  # (rows,) float32

    def __post_init__(self):
        self.row_index = np.asarray(self.row_index, dtype=np.int64)
        self.group_cols = np.asarray(self.group_cols, dtype=np.int64)
        self.packed_codes = np.asarray(self.packed_codes, dtype=np.uint8)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.zeros = np.asarray(self.zeros, dtype=np.float32)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32)

    @property
    def nnzg(self) -> int:
        return int(self.row_index[-1]) if self.row_index.size else 0

    @property
    def n_group_cols(self) -> int:
        return self.cols // self.group_size

    @property
    def total_groups(self) -> int:
        return self.rows * self.n_group_cols

    @property
    def sparsity(self) -> float:
        """Fraction of groups pruned."""
        return 1.0 - self.nnzg / self.total_groups if self.total_groups else 0.0

    def bias_or_zeros(self) -> np.ndarray:
        if self.bias is None:
            return np.zeros(self.rows, dtype=np.float32)
        return self.bias

    def codes(self, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
        """Unpacked codes of groups ``lo..hi`` as a ``(hi - lo, G)`` uint8 array."""
        hi = self.nnzg if hi is None else hi
        g = self.group_size
        return unpack_codes(self.packed_codes, self.bits, lo * g, (hi - lo) * g).reshape(hi - lo, g)

    def row_of_groups(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), np.diff(self.row_index))

    def keep_mask(self) -> np.ndarray:
        mask = np.zeros((self.rows, self.n_group_cols), dtype=bool)
        mask[self.row_of_groups(), self.group_cols] = True
        return mask

    def dequantized_groups(self) -> np.ndarray:
        return dequantize_rows(self.codes(), self.scales, self.zeros)

    def with_codes(self, codes: np.ndarray) -> "GQSLayer":
        """Copy of this layer with new codes (same topology and params)."""
        c = np.asarray(codes)
        if c.size and (c.min() < 0 or c.max() > qmax(self.bits)):
            raise LayerValidationError("code out of range")
        return replace(self, packed_codes=pack_codes(c, self.bits))

    def copy(self) -> "GQSLayer":
        return GQSLayer(
            self.rows, self.cols, self.group_size, self.bits,
            self.row_index.copy(), self.group_cols.copy(), self.packed_codes.copy(),
            self.scales.copy(), self.zeros.copy(),
            None if self.bias is None else self.bias.copy(),
        )

    def validate(self) -> "GQSLayer":
        check_bits(self.bits)
        ri, gc = self.row_index, self.group_cols
        if self.rows < 1 or self.cols < 1 or self.group_size < 1:
            raise LayerValidationError("rows, cols and group size must be positive")
        if self.cols % self.group_size:
            raise LayerValidationError("cols not divisible by group size")
        if self.n_group_cols > MAX_GROUP_COLS:
            raise LayerValidationError("too many group columns for 16-bit indices")
        if ri.shape != (self.rows + 1,) or ri[0] != 0:
            raise LayerValidationError("row_index must have rows+1 entries starting at 0")
        if np.any(np.diff(ri) < 0):
            raise LayerValidationError("row_index is not monotone")
        n = self.nnzg
        if gc.shape != (n,) or self.scales.shape != (n,) or self.zeros.shape != (n,):
            raise LayerValidationError("group_cols/scales/zeros must have nnzg entries")
        if n:
            if gc.min() < 0 or gc.max() >= self.n_group_cols:
                raise LayerValidationError("group column out of range")
            step = np.diff(gc)
            same_row = np.diff(self.row_of_groups()) == 0
            if np.any(step[same_row] <= 0):
                raise LayerValidationError("group columns must strictly increase within a row")
        if not (np.isfinite(self.scales).all() and np.all(self.scales > 0)):
            raise LayerValidationError("scales must be finite and positive")
        if not np.isfinite(self.zeros).all():
            raise LayerValidationError("zeros must be finite")
        n_codes = n * self.group_size
        if self.packed_codes.shape != (packed_nbytes(n_codes, self.bits),):
            raise LayerValidationError("packed code buffer has the wrong length")
        tail = packed_nbytes(n_codes, self.bits) * 8 - n_codes * self.bits
        if tail and self.packed_codes[-1] >> (8 - tail):
            raise LayerValidationError("unused trailing code bits are not zero")
        if self.bias is not None and (
            self.bias.shape != (self.rows,) or not np.isfinite(self.bias).all()
        ):
            raise LayerValidationError("bias must be a finite vector of length rows")
        return self

    def equals(self, other: "GQSLayer") -> bool:
        """Field-wise identity, bit-exact for every array."""
        if (self.rows, self.cols, self.group_size, self.bits) != (
            other.rows, other.cols, other.group_size, other.bits
        ):
            return False
        if (self.bias is None) != (other.bias is None):
            return False
        pairs = [
            (self.row_index, other.row_index),
            (self.group_cols, other.group_cols),
            (self.packed_codes, other.packed_codes),
            (self.scales.view(np.uint32), other.scales.view(np.uint32)),
            (self.zeros.view(np.uint32), other.zeros.view(np.uint32)),
        ]
        if self.bias is not None:
            pairs.append((self.bias.view(np.uint32), other.bias.view(np.uint32)))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def from_groups(
    rows: int,
    cols: int,
    group_size: int,
    bits: int,
    keep_mask: np.ndarray,
    groups: np.ndarray,
    bias=None,
) -> GQSLayer:
    """Quantize ``(nnzg, G)`` float groups laid out per ``keep_mask`` (row-major)."""
    keep_mask = np.asarray(keep_mask, dtype=bool)
    row_index = np.concatenate([[0], np.cumsum(keep_mask.sum(axis=1))])
    group_cols = np.nonzero(keep_mask)[1]
    groups = np.asarray(groups, dtype=np.float32).reshape(-1, group_size)
    if groups.shape[0]:
        scales, zeros = storage_qparams(groups, bits)
        codes = quantize_rows(groups, scales, zeros, bits)
    else:
        scales = zeros = np.zeros(0, dtype=np.float32)
        codes = np.zeros((0, group_size), dtype=np.uint8)
    return GQSLayer(
        rows, cols, group_size, bits, row_index, group_cols,
        pack_codes(codes, bits), scales, zeros,
        None if bias is None else np.asarray(bias, dtype=np.float32),
    ).validate()


def build_gqs(w, keep_mask, group_size: int, bits: int, bias=None) -> GQSLayer:
    """Prune the groups where ``keep_mask`` is False and quantize the rest."""
    w = as_matrix(w, "W")
    rows, cols = w.shape
    check_bits(bits)
    if group_size < 1 or cols % group_size:
        raise ShapeError(f"{cols} columns not divisible by group size {group_size}")
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (rows, cols // group_size):
        raise ShapeError(f"keep_mask shape {keep_mask.shape} != {(rows, cols // group_size)}")
    kept = w.reshape(rows, cols // group_size, group_size)[keep_mask]
    return from_groups(rows, cols, group_size, bits, keep_mask, kept, bias)


def decompress(layer: GQSLayer) -> np.ndarray:
    """Dense ``rows x cols`` float32 matrix; pruned positions are exactly 0."""
    layer.validate()
    g = layer.group_size
    dense = np.zeros((layer.rows, layer.n_group_cols, g), dtype=np.float32)
    if layer.nnzg:
        dense[layer.row_of_groups(), layer.group_cols] = layer.dequantized_groups()
    return dense.reshape(layer.rows, layer.cols)
