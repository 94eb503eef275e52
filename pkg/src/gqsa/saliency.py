"""Hessian-based weight importance and its mean over row-aligned groups.

The layer-wise proxy Hessian is ``H = (2/N) * sum_k x_k x_k^T + lam * I`` with
``lam`` a fraction of the mean undamped diagonal. Saliency of weight
``W[r, c]`` is ``W[r, c]**2 / inv(H)[c, c]**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import CalibrationSet, ShapeError

DEFAULT_DAMPING = 0.01


class NumericError(ArithmeticError):
    pass


@dataclass
class HessianEstimate:
    H: np.ndarray  # (dim, dim), float64
    damping: float

    @property
    def dim(self) -> int:
        return self.H.shape[0]


@dataclass
class SaliencyMap:
    per_weight: np.ndarray  # (rows, cols)
    per_group: np.ndarray  # (rows, cols // G)
    group_size: int


def estimate_hessian(layer_inputs, damping: float = DEFAULT_DAMPING) -> HessianEstimate:
    """Proxy Hessian from an ``(N, d)`` array of layer inputs (or a CalibrationSet)."""
    if isinstance(layer_inputs, CalibrationSet):
        layer_inputs = layer_inputs.samples
    x = np.asarray(layer_inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("need at least one calibration sample")
    h = (2.0 / x.shape[0]) * (x.T @ x)
    h = 0.5 * (h + h.T)
    lam = damping * float(np.mean(np.diag(h)))
    if lam <= 0:
        # all-zero inputs: fall back to unit damping so H stays invertible
        lam = damping if damping > 0 else 1.0
    h[np.diag_indices_from(h)] += lam
    return HessianEstimate(h, lam)


def inverse_diagonal(hess: HessianEstimate) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(hess.H, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"Hessian is not positive definite: {exc}") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(hess.dim))
    return np.diag(inv).copy()


def weight_saliency(w, hess: HessianEstimate) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != hess.dim:
        raise ShapeError(f"W has {w.shape[-1]} columns, Hessian is {hess.dim}x{hess.dim}")
    hinv = inverse_diagonal(hess)
    return w**2 / hinv[None, :] ** 2


def group_saliency(per_weight, group_size: int) -> np.ndarray:
    p = np.asarray(per_weight, dtype=np.float64)
    rows, cols = p.shape
    if group_size < 1 or cols % group_size:
        raise ShapeError(f"{cols} columns not divisible by group size {group_size}")
    return p.reshape(rows, cols // group_size, group_size).mean(axis=2)


def saliency_map(w, hess: HessianEstimate, group_size: int) -> SaliencyMap:
    per_weight = weight_saliency(w, hess)
    return SaliencyMap(per_weight, group_saliency(per_weight, group_size), group_size)
