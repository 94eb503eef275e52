"""One-shot compression: Hessian saliency -> group pruning -> per-group quantization."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core import CalibrationSet, ShapeError, ToyModel, as_matrix, make_synthetic, model_forward
from .gqs import GQSLayer, build_gqs
from .quant import DEFAULT_BITS, check_bits
from .saliency import DEFAULT_DAMPING, estimate_hessian, saliency_map

DEFAULT_GROUP_SIZE = 16


@dataclass(frozen=True)
class CompressionConfig:
    sparsity: float = 0.5
    bits: int = DEFAULT_BITS
    group_size: int = DEFAULT_GROUP_SIZE
    seed: int = 0
    hessian_damping: float = DEFAULT_DAMPING

    def __post_init__(self):
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")
        check_bits(self.bits)


def pruned_count(sparsity: float, total_groups: int) -> int:
    # round first so that e.g. 0.29 * 100 does not floor to 28
    return int(math.floor(round(sparsity * total_groups, 9)))


def select_groups(per_group, sparsity: float) -> np.ndarray:
    """Keep-mask pruning the ``floor(sparsity * total)`` lowest-scoring groups.

    Ties go to the lower (row, group) index, which is pruned first.
    """
    scores = np.asarray(per_group, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("per-group scores must be 2-D")
    n_prune = pruned_count(sparsity, scores.size)
    order = np.argsort(scores, axis=None, kind="stable")
    keep = np.ones(scores.size, dtype=bool)
    keep[order[:n_prune]] = False
    return keep.reshape(scores.shape)


def compress_layer(
    w,
    calib_inputs,
    cfg: CompressionConfig,
    bias: Optional[np.ndarray] = None,
) -> GQSLayer:
    w = as_matrix(w, "W")
    if w.shape[1] % cfg.group_size:
        raise ShapeError(f"{w.shape[1]} columns not divisible by group size {cfg.group_size}")
    hess = estimate_hessian(calib_inputs, cfg.hessian_damping)
    sal = saliency_map(w, hess, cfg.group_size)
    keep = select_groups(sal.per_group, cfg.sparsity)
    return build_gqs(w, keep, cfg.group_size, cfg.bits, bias=bias)


def compress_model(
    model: ToyModel,
    calib: CalibrationSet,
    cfg: CompressionConfig,
    workers: int = 1,
) -> List[GQSLayer]:
    """Compress every block; each layer's Hessian uses its FP-model input activations."""
    if calib.dim != model.in_dim:
        raise ShapeError(f"calibration dim {calib.dim} != model input {model.in_dim}")
    _, inputs = model_forward(model, calib.samples)

    def one(b: int) -> GQSLayer:
        block = model.blocks[b]
        return compress_layer(block.weight, inputs[b], cfg, bias=block.bias)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(len(model.blocks))))
    return [one(b) for b in range(len(model.blocks))]


def synthetic_layer(
    rows: int,
    cols: int,
    sparsity: float,
    bits: int = DEFAULT_BITS,
    group_size: int = DEFAULT_GROUP_SIZE,
    seed: int = 0,
    distribution: str = "gaussian",
    bias: bool = False,
) -> GQSLayer:
    """Seeded random layer pruned by mean squared weight per group.

    This is group saliency under an identity Hessian; it avoids building an
    O(cols**3) inverse for large benchmark layers.
    """
    w = make_synthetic(rows, cols, seed, distribution)
    scores = (w.reshape(rows, cols // group_size, group_size) ** 2).mean(axis=2)
    keep = select_groups(scores, sparsity)
    b = np.random.default_rng([seed, 1]).standard_normal(rows).astype(np.float32) if bias else None
    return build_gqs(w, keep, group_size, bits, bias=b)
