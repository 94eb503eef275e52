"""Analytic storage accounting for GQS layers, matching the on-disk encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Union

from ..quant import check_bits, packed_nbytes
from .layer import GQSLayer

# bits per stored element on disk
SCALE_BITS = 16
ZERO_BITS = 16
GROUP_COL_BITS = 16
ROW_INDEX_BITS = 32
BIAS_BITS = 32

SECTIONS = ("codes", "scales", "zeros", "group_cols", "row_index", "bias")


@dataclass
class FootprintReport:
    payload_bits: int
    weights: int
    breakdown: Dict[str, int] = field(default_factory=dict)

    @property
    def bits_per_weight(self) -> float:
        return self.payload_bits / self.weights if self.weights else 0.0

    @property
    def ratio_vs_fp16(self) -> float:
        return 16 * self.weights / self.payload_bits if self.payload_bits else float("inf")

    def __add__(self, other: "FootprintReport") -> "FootprintReport":
        merged = {k: self.breakdown.get(k, 0) + other.breakdown.get(k, 0) for k in SECTIONS}
        return FootprintReport(self.payload_bits + other.payload_bits, self.weights + other.weights, merged)

    def as_dict(self) -> dict:
        return {
            "payload_bits": self.payload_bits,
            "bits_per_weight": self.bits_per_weight,
            "ratio_vs_fp16": self.ratio_vs_fp16,
            **{f"{k}_bits": v for k, v in self.breakdown.items()},
        }


def footprint_for(rows: int, cols: int, group_size: int, bits: int, nnzg: int, has_bias: bool) -> FootprintReport:
    """Footprint of a layer with the given shape and kept-group count."""
    check_bits(bits)
    breakdown = {
        "codes": 8 * packed_nbytes(nnzg * group_size, bits),
        "scales": SCALE_BITS * nnzg,
        "zeros": ZERO_BITS * nnzg,
        "group_cols": GROUP_COL_BITS * nnzg,
        "row_index": ROW_INDEX_BITS * (rows + 1),
        "bias": BIAS_BITS * rows if has_bias else 0,
    }
    return FootprintReport(sum(breakdown.values()), rows * cols, breakdown)


def footprint(layers: Union[GQSLayer, Iterable[GQSLayer]]) -> FootprintReport:
    if isinstance(layers, GQSLayer):
        layers = [layers]
    total = FootprintReport(0, 0, {k: 0 for k in SECTIONS})
    for layer in layers:
        total = total + footprint_for(
            layer.rows, layer.cols, layer.group_size, layer.bits, layer.nnzg, layer.bias is not None
        )
    return total
