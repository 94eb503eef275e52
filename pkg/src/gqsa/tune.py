"""Two-stage recovery for compressed models.

Stage 1 (BQPO) tunes each block on its own. The trainable values are the
latent weights of the kept groups plus the bias. Every forward pass
re-derives scale/zero from the latent group min/max, quantizes and
dequantizes, and the backward pass sends gradients straight through the
rounding (zero where the pre-clamp code is out of range). Scale and zero are
treated as constants within a step.

Stage 2 (E2E-OQP) freezes every integer code and the sparse topology, then
tunes only the per-group scales and zeros (continuous) and the biases
against the FP model's output, back-propagating through the whole network:
``d w_hat / d s = code - z`` and ``d w_hat / d z = -s``.

Both stages use AdamW on mini-batches of the calibration set. The loss over
the full calibration set is checked at the start and after every epoch and
the best parameters seen are returned, so the final loss never exceeds the
initial one.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import Activation, CalibrationSet, ShapeError, ToyModel, model_forward
from .gqs import GQSLayer, snap_f16, storage_qparams
from .quant import SCALE_EPS, dequantize_rows, pack_codes, qmax, quantize_rows

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-5
DEFAULT_BQPO_EPOCHS = 5
DEFAULT_E2E_EPOCHS = 2
DEFAULT_BATCH_SIZE = 1
_F16_TINY = np.float32(2.0**-24)


class TuningError(RuntimeError):
    pass


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptState:
    """AdamW moments for a dict of named parameters."""

    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """One in-place AdamW step on every parameter that has a gradient."""
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- helpers ------------------------------------------------------------------


def _scatter(rows: int, cols: int, g: int, row_of: np.ndarray, group_cols: np.ndarray, groups: np.ndarray):
    dense = np.zeros((rows, cols // g, g), dtype=groups.dtype)
    dense[row_of, group_cols] = groups
    return dense.reshape(rows, cols)


def _gather(dense: np.ndarray, g: int, row_of: np.ndarray, group_cols: np.ndarray) -> np.ndarray:
    rows, cols = dense.shape
    return dense.reshape(rows, cols // g, g)[row_of, group_cols]


def _as_batch(x, cols: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.shape[1] != cols:
        raise ShapeError(f"input has length {x.shape[1]}, block expects {cols}")
    return x, single


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# -- stage 1: latent-weight tuning through the quantizer --------------------------


@dataclass
class LatentBlock:
    rows: int
    cols: int
    group_size: int
    bits: int
    row_index: np.ndarray
    group_cols: np.ndarray
    latent: np.ndarray  # (nnzg, G) float32
    bias: np.ndarray  # (rows,) float32
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.row_of = np.repeat(np.arange(self.rows), np.diff(self.row_index))
        self.activation = Activation(self.activation)
        if self.latent.shape != (len(self.group_cols), self.group_size):
            raise ShapeError("latent values must be (nnzg, G)")

    @classmethod
    def from_layer(cls, layer: GQSLayer, activation=Activation.IDENTITY) -> "LatentBlock":
        return cls(
            layer.rows, layer.cols, layer.group_size, layer.bits,
            layer.row_index.copy(), layer.group_cols.copy(),
            layer.dequantized_groups().astype(np.float32),
            layer.bias_or_zeros().copy(), activation,
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {"latent": self.latent, "bias": self.bias}

    def quantized(self):
        """(codes, pre-clamp codes, scales, zeros) from the current latent values."""
        if not len(self.latent):
            empty = np.zeros(0, dtype=np.float32)
            return np.zeros((0, self.group_size), np.uint8), self.latent, empty, empty
        s, z = storage_qparams(self.latent, self.bits)
        codes, raw = quantize_rows(self.latent, s, z, self.bits, return_unclamped=True)
        return codes, raw, s, z

    def to_layer(self) -> GQSLayer:
        codes, _, s, z = self.quantized()
        return GQSLayer(
            self.rows, self.cols, self.group_size, self.bits,
            self.row_index.copy(), self.group_cols.copy(),
            pack_codes(codes, self.bits), s, z, self.bias.copy(),
        ).validate()


@dataclass
class STECache:
    x: np.ndarray
    weight: np.ndarray
    pre: np.ndarray
    in_range: np.ndarray
    single: bool


def ste_forward(block: LatentBlock, x) -> Tuple[np.ndarray, STECache]:
    xb, single = _as_batch(x, block.cols)
    codes, raw, s, z = block.quantized()
    w_hat = dequantize_rows(codes, s, z) if len(codes) else block.latent
    weight = _scatter(block.rows, block.cols, block.group_size, block.row_of, block.group_cols, w_hat)
    pre = xb @ weight.T + block.bias
    y = block.activation.apply(pre)
    in_range = (raw >= 0) & (raw <= qmax(block.bits))
    cache = STECache(xb, weight, pre, in_range, single)
    return (y[0] if single else y), cache


def ste_backward(block: LatentBlock, cache: STECache, dy) -> Dict[str, np.ndarray]:
    """Gradients for ``latent`` and ``bias`` plus ``x`` (the block input)."""
    dy = np.asarray(dy, dtype=np.float32).reshape(cache.pre.shape)
    if block.activation is Activation.RELU:
        dy = dy * (cache.pre > 0)
    d_weight = dy.T @ cache.x
    d_latent = _gather(d_weight, block.group_size, block.row_of, block.group_cols) * cache.in_range
    dx = dy @ cache.weight
    return {"latent": d_latent, "bias": dy.sum(axis=0), "x": dx[0] if cache.single else dx}


def _mse_grad(y: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = y - target
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff


@dataclass
class TuneReport:
    stage: str
    epochs: int
    batches: int
    trajectories: List[List[float]] = field(default_factory=list)
    initial_mse: List[float] = field(default_factory=list)
    final_mse: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    scale_clamps: int = 0


def _block_loss(block: LatentBlock, x: np.ndarray, target: np.ndarray) -> float:
    y, _ = ste_forward(block, x)
    return float(np.mean((y.astype(np.float64) - target) ** 2))


def tune_block(
    block: LatentBlock,
    x: np.ndarray,
    target: np.ndarray,
    epochs: int,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed=0,
) -> Tuple[LatentBlock, List[float], float, float]:
    """Run block-wise tuning in place; returns (block, trajectory, initial, final)."""
    rng = np.random.default_rng(seed)
    opt = OptState(lr=lr)
    params = block.params()
    best = _block_loss(block, x, target)
    initial = best
    best_params = {k: v.copy() for k, v in params.items()}
    trajectory: List[float] = []
    for epoch in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            y, cache = ste_forward(block, x[idx])
            loss, dy = _mse_grad(y, target[idx])
            if not np.isfinite(loss):
                raise TuningError(f"block loss diverged at epoch {epoch}, step {len(trajectory)}")
            trajectory.append(loss)
            grads = ste_backward(block, cache, dy)
            opt.update(params, {"latent": grads["latent"], "bias": grads["bias"]})
        full = _block_loss(block, x, target)
        if not np.isfinite(full):
            raise TuningError(f"block loss diverged after epoch {epoch}")
        if full < best:
            best = full
            best_params = {k: v.copy() for k, v in params.items()}
    for k, v in best_params.items():
        params[k][...] = v
    return block, trajectory, initial, best


def bqpo(
    model_fp: ToyModel,
    layers: Sequence[GQSLayer],
    calib: CalibrationSet,
    epochs: int = DEFAULT_BQPO_EPOCHS,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
    workers: int = 1,
) -> Tuple[List[GQSLayer], TuneReport]:
    """Block-wise tuning of the kept latent weights against FP block outputs.

    Block ``b`` sees the FP model's inputs to block ``b``. Topology never
    changes; the returned layers carry fresh codes and scale/zero.
    """
    if len(layers) != len(model_fp.blocks):
        raise ShapeError("need one layer per model block")
    t0 = time.perf_counter()
    n_batches = -(-len(calib) // batch_size)
    report = TuneReport("bqpo", epochs, n_batches)
    if epochs == 0:
        report.wall_time = time.perf_counter() - t0
        return list(layers), report
    _, inputs = model_forward(model_fp, calib.samples)

    def one(b: int):
        fp = model_fp.blocks[b]
        block = LatentBlock.from_layer(layers[b], fp.activation)
        target = fp(inputs[b])
        return tune_block(block, inputs[b], target, epochs, lr, batch_size, seed=(seed, b))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(layers))))
    else:
        results = [one(b) for b in range(len(layers))]
    out = []
    for block, traj, initial, final in results:
        out.append(block.to_layer())
        report.trajectories.append(traj)
        report.initial_mse.append(initial)
        report.final_mse.append(final)
    report.wall_time = time.perf_counter() - t0
    return out, report


# -- stage 2: scale/zero tuning with frozen codes --------------------------------


class FrozenCodeNet:
    """The compressed model with codes frozen; trainable scales, zeros and biases."""

    def __init__(self, layers: Sequence[GQSLayer], activations: Sequence[Activation]):
        if len(layers) != len(activations):
            raise ShapeError("need one activation per layer")
        self.layers = list(layers)
        self.activations = [Activation(a) for a in activations]
        self.codes = [l.codes().astype(np.float32) for l in self.layers]
        self.row_of = [l.row_of_groups() for l in self.layers]
        self.params = []
        for l in self.layers:
            self.params.append({
                "scales": l.scales.astype(np.float32).copy(),
                "zeros": l.zeros.astype(np.float32).copy(),
                "bias": l.bias_or_zeros().astype(np.float32).copy(),
            })

    def weight(self, i: int) -> np.ndarray:
        l, p = self.layers[i], self.params[i]
        w_hat = (self.codes[i] - p["zeros"][:, None]) * p["scales"][:, None]
        return _scatter(l.rows, l.cols, l.group_size, self.row_of[i], l.group_cols, w_hat)

    def forward(self, x):
        h = np.asarray(x, dtype=np.float32)
        cache = []
        for i, act in enumerate(self.activations):
            w = self.weight(i)
            pre = h @ w.T + self.params[i]["bias"]
            cache.append((h, w, pre))
            h = act.apply(pre)
        return h, cache

    def backward(self, cache, dy) -> List[Dict[str, np.ndarray]]:
        grads: List[Dict[str, np.ndarray]] = [None] * len(self.layers)
        g = np.asarray(dy, dtype=np.float32)
        for i in reversed(range(len(self.layers))):
            h, w, pre = cache[i]
            if self.activations[i] is Activation.RELU:
                g = g * (pre > 0)
            l, p = self.layers[i], self.params[i]
            d_w_hat = _gather(g.T @ h, l.group_size, self.row_of[i], l.group_cols)
            grads[i] = {
                "scales": (d_w_hat * (self.codes[i] - p["zeros"][:, None])).sum(axis=1),
                "zeros": -(d_w_hat.sum(axis=1) * p["scales"]),
                "bias": g.sum(axis=0),
            }
            g = g @ w
        return grads

    def snapped(self) -> "FrozenCodeNet":
        """Copy whose scales/zeros are rounded to their binary16 storage values."""
        other = FrozenCodeNet.__new__(FrozenCodeNet)
        other.layers, other.activations, other.codes, other.row_of = (
            self.layers, self.activations, self.codes, self.row_of,
        )
        other.params = [
            {
                "scales": np.maximum(snap_f16(p["scales"]), _F16_TINY),
                "zeros": snap_f16(p["zeros"]),
                "bias": p["bias"].copy(),
            }
            for p in self.params
        ]
        return other

    def to_layers(self) -> List[GQSLayer]:
        snap = self.snapped()
        out = []
        for l, p in zip(self.layers, snap.params):
            out.append(GQSLayer(
                l.rows, l.cols, l.group_size, l.bits,
                l.row_index.copy(), l.group_cols.copy(), l.packed_codes.copy(),
                p["scales"], p["zeros"], p["bias"],
            ).validate())
        return out


def _net_loss(net: FrozenCodeNet, x: np.ndarray, target: np.ndarray) -> float:
    y, _ = net.forward(x)
    return float(np.mean((y.astype(np.float64) - target) ** 2))


def e2e_oqp(
    model_fp: ToyModel,
    layers: Sequence[GQSLayer],
    calib: CalibrationSet,
    epochs: int = DEFAULT_E2E_EPOCHS,
    lr: float = DEFAULT_LR,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> Tuple[List[GQSLayer], TuneReport]:
    """End-to-end tuning of scales, zeros and biases over frozen codes."""
    if len(layers) != len(model_fp.blocks):
        raise ShapeError("need one layer per model block")
    t0 = time.perf_counter()
    n_batches = -(-len(calib) // batch_size)
    report = TuneReport("e2e", epochs, n_batches)
    if epochs == 0:
        report.wall_time = time.perf_counter() - t0
        return list(layers), report
    x = calib.samples
    target, _ = model_forward(model_fp, x)
    net = FrozenCodeNet(layers, [b.activation for b in model_fp.blocks])
    opt = OptState(lr=lr)
    flat = {f"{i}.{k}": v for i, p in enumerate(net.params) for k, v in p.items()}
    best = initial = _net_loss(net.snapped(), x, target)
    best_flat = {k: v.copy() for k, v in flat.items()}
    rng = np.random.default_rng(seed)
    traj: List[float] = []
    for epoch in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            y, cache = net.forward(x[idx])
            loss, dy = _mse_grad(y, target[idx])
            if not np.isfinite(loss):
                raise TuningError(f"end-to-end loss diverged at epoch {epoch}, step {len(traj)}")
            traj.append(loss)
            grads = net.backward(cache, dy)
            opt.update(flat, {f"{i}.{k}": v for i, g in enumerate(grads) for k, v in g.items()})
            for p in net.params:
                low = p["scales"] < SCALE_EPS
                if low.any():
                    report.scale_clamps += int(low.sum())
                    p["scales"][low] = SCALE_EPS
        full = _net_loss(net.snapped(), x, target)
        if not np.isfinite(full):
            raise TuningError(f"end-to-end loss diverged after epoch {epoch}")
        if full < best:
            best = full
            best_flat = {k: v.copy() for k, v in flat.items()}
    for k, v in best_flat.items():
        flat[k][...] = v
    if report.scale_clamps:
        log.warning("clamped %d scale updates at %g", report.scale_clamps, SCALE_EPS)
    report.trajectories.append(traj)
    report.initial_mse.append(initial)
    report.final_mse.append(best)
    report.wall_time = time.perf_counter() - t0
    return net.to_layers(), report


def model_mse(model_fp: ToyModel, layers: Sequence[GQSLayer], x) -> float:
    """End-to-end MSE between the FP model and the compressed layers on ``x``."""
    net = FrozenCodeNet(layers, [b.activation for b in model_fp.blocks])
    target, _ = model_forward(model_fp, x)
    return _net_loss(net, np.asarray(x, dtype=np.float32), target)
