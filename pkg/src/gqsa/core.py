"""Dense numerics, seeded synthetic data and the toy model used by the pipeline.

Dense matrices and vectors are plain C-contiguous ``float32`` numpy arrays;
the helpers here only check shapes and finiteness at the boundaries.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def as_matrix(w, name: str = "matrix") -> np.ndarray:
    a = np.ascontiguousarray(w, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def dense_gemv(w, x) -> np.ndarray:
    """Compute ``y = W @ x`` with float32 accumulation, left to right over columns.

    The column loop fixes the summation order, which BLAS does not, so this
    serves as the bit-reproducible oracle for the sparse engine.
    """
    w = as_matrix(w, "W")
    x = as_vector(x, "x")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"x has length {x.shape[0]}, W has {w.shape[1]} columns")
    acc = np.zeros(w.shape[0], dtype=np.float32)
    for j in range(w.shape[1]):
        acc += w[:, j] * x[j]
    return acc


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"

    def apply(self, pre: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(pre, 0).astype(pre.dtype, copy=False)
        return pre


@dataclass
class Block:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = as_vector(self.bias, "bias")
        self.activation = Activation(self.activation)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError("bias length must equal weight rows")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Apply the block to one vector or a batch of row vectors."""
        return self.activation.apply(x @ self.weight.T + self.bias)


@dataclass
class ToyModel:
    """Ordered (linear + activation) blocks; the last block is Identity."""

    blocks: List[Block]

    def __post_init__(self):
        if not self.blocks:
            raise ShapeError("model needs at least one block")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"block output {prev.out_dim} does not feed next input {nxt.in_dim}"
                )
        if self.blocks[-1].activation is not Activation.IDENTITY:
            raise ShapeError("last block must use the Identity activation")

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim


def model_forward(model: ToyModel, x) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Run ``x`` (a vector or ``(N, in_dim)`` batch) through every block.

    Returns the output and the list of per-block inputs, ``inputs[b]`` being
    what block ``b`` consumed.
    """
    h = np.asarray(x, dtype=np.float32)
    if h.shape[-1] != model.in_dim:
        raise ShapeError(f"input has length {h.shape[-1]}, model expects {model.in_dim}")
    inputs = []
    for block in model.blocks:
        inputs.append(h)
        h = block(h)
    return h, inputs


DISTRIBUTIONS = ("gaussian", "channel_imbalance")


def make_synthetic(rows: int, cols: int, seed: int, distribution: str = "gaussian") -> np.ndarray:
    """Seeded ``rows x cols`` float32 matrix.

    ``channel_imbalance`` multiplies each row of a standard gaussian by a
    scale drawn log-uniformly from [0.1, 10].
    """
    if rows < 1 or cols < 1:
        raise ShapeError("rows and cols must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((rows, cols), dtype=np.float32)
    if distribution == "channel_imbalance":
        scale = np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=(rows, 1)))
        w = (w * scale).astype(np.float32)
    elif distribution != "gaussian":
        raise ValueError(f"unknown distribution {distribution!r}")
    return w


@dataclass
class CalibrationSet:
    samples: np.ndarray  # (N, dim)
    seed: int

    def __post_init__(self):
        self.samples = as_matrix(self.samples, "samples")
        if self.samples.shape[0] == 0:
            raise ValueError("calibration set is empty")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def make_calibration(
    dim: int,
    n: int,
    seed: int,
    *,
    rank: Optional[int] = 16,
    noise: float = 0.05,
    mix_seed: Optional[int] = None,
) -> CalibrationSet:
    """Draw ``n`` i.i.d. gaussian input vectors of length ``dim``.

    With ``rank`` set, each sample is ``L @ u + noise * e`` where ``L`` is a
    fixed ``dim x rank`` mixing matrix seeded by ``mix_seed`` (default
    ``seed``). The low-rank covariance stands in for the strongly correlated
    activations of real networks; ``rank=None`` gives isotropic samples.
    Two sets sharing ``mix_seed`` come from the same distribution.
    """
    if n < 1:
        raise ValueError("need at least one calibration sample")
    rng = np.random.default_rng(seed)
    if rank is None:
        x = rng.standard_normal((n, dim), dtype=np.float32)
    else:
        mix_rng = np.random.default_rng([seed if mix_seed is None else mix_seed, 0x51])
        mix = mix_rng.standard_normal((dim, rank)) / np.sqrt(rank)
        u = rng.standard_normal((n, rank))
        x = (u @ mix.T + noise * rng.standard_normal((n, dim))).astype(np.float32)
    return CalibrationSet(x, seed)


def make_toy_model(
    rows: int,
    cols: int,
    blocks: int,
    seed: int,
    *,
    weight_scale: float = 0.01,
    bias_scale: float = 0.01,
    distribution: str = "gaussian",
) -> ToyModel:
    """Seeded FP teacher: block 0 is ``rows x cols``, later blocks ``rows x rows``.

    All blocks use ReLU except the last, which is Identity.
    """
    if blocks < 1:
        raise ShapeError("need at least one block")
    out: List[Block] = []
    seeds = np.random.SeedSequence(seed).generate_state(2 * blocks, dtype=np.uint64)
    for b in range(blocks):
        in_dim = cols if b == 0 else rows
        w = make_synthetic(rows, in_dim, int(seeds[2 * b]), distribution) * np.float32(weight_scale)
        bias = np.random.default_rng(int(seeds[2 * b + 1])).standard_normal(rows) * bias_scale
        act = Activation.IDENTITY if b == blocks - 1 else Activation.RELU
        out.append(Block(w, bias.astype(np.float32), act))
    return ToyModel(out)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))
