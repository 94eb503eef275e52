"""Finite-difference checks for the two tuning stages.

The loss is ``L = 0.5 * sum((y - t)**2)``. Finite differences run on a
float64 dense forward rebuilt from codes and parameters by the oracles
module, so they share no code with the analytic backward passes.
"""

import numpy as np

from gqsa.core import Activation
from gqsa.tune import FrozenCodeNet, LatentBlock, ste_backward, ste_forward

import oracles

FD_STEP = 1e-6
BOUNDARY_MARGIN = 0.01  # in units of the group scale


def rel_diff(a: float, b: float, floor: float = 1e-12) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale < floor else abs(a - b) / scale


def _loss64(y, t):
    return 0.5 * float(np.sum((y - t) ** 2))


def ste_gradient_points(block: LatentBlock, x, t, n, rng):
    """``[(analytic, numeric)]`` for ``n`` latent weights and up to ``n`` biases.

    Points are drawn among in-range latent weights at least
    ``BOUNDARY_MARGIN * s`` away from a rounding boundary of ``w / s``. Under
    the straight-through rule ``d w_hat / d w = 1`` there, so the numeric
    value differentiates the loss with respect to that dequantized weight.
    """
    y, cache = ste_forward(block, x)
    grads = ste_backward(block, cache, (y.astype(np.float64) - t).astype(np.float32))
    codes, raw, s, z = block.quantized()
    u = block.latent.astype(np.float64) / s[:, None]
    margin = np.abs((u - np.floor(u)) - 0.5)
    in_range = (raw >= 0) & (raw <= 2**block.bits - 1)
    eligible = np.argwhere(in_range & (margin >= BOUNDARY_MARGIN))
    picks = eligible[rng.choice(len(eligible), size=min(n, len(eligible)), replace=False)]

    w_hat = (codes.astype(np.float64) - z[:, None]) * s[:, None]
    g = block.group_size
    dense = np.zeros((block.rows, block.cols))
    for k in range(len(w_hat)):
        c0 = int(block.group_cols[k]) * g
        dense[block.row_of[k], c0:c0 + g] = w_hat[k]
    bias = block.bias.astype(np.float64)
    relu = block.activation is Activation.RELU

    def loss(w, b):
        return _loss64(oracles.forward64([w], [b], [relu], x), t)

    out = []
    for k, j in picks:
        r, c = int(block.row_of[k]), int(block.group_cols[k]) * g + int(j)

        def f(v, r=r, c=c):
            w = dense.copy()
            w[r, c] = v
            return loss(w, bias)

        out.append((float(grads["latent"][k, j]), oracles.central_difference(f, dense[r, c], FD_STEP)))
    for r in rng.choice(block.rows, size=min(n, block.rows), replace=False):

        def fb(v, r=r):
            b = bias.copy()
            b[r] = v
            return loss(dense, b)

        out.append((float(grads["bias"][r]), oracles.central_difference(fb, bias[r], FD_STEP)))
    return out


def e2e_gradient_points(net: FrozenCodeNet, x, t, n, rng):
    """``[(analytic, numeric)]`` for ``n`` random scales and ``n`` random zeros."""
    y, cache = net.forward(x)
    grads = net.backward(cache, (y.astype(np.float64) - t).astype(np.float32))
    scales = [p["scales"].astype(np.float64) for p in net.params]
    zeros = [p["zeros"].astype(np.float64) for p in net.params]
    biases = [p["bias"].astype(np.float64) for p in net.params]
    relus = [a is Activation.RELU for a in net.activations]
    codes = [oracles.layer_codes(l) for l in net.layers]

    def loss(sc, ze):
        ws = [oracles.dense_from_layer64(l, s, z, c) for l, s, z, c in zip(net.layers, sc, ze, codes)]
        return _loss64(oracles.forward64(ws, biases, relus, x), t)

    candidates = [(i, k) for i, l in enumerate(net.layers) for k in range(l.nnzg)]
    out = []
    for name, values in (("scales", scales), ("zeros", zeros)):
        for idx in rng.choice(len(candidates), size=min(n, len(candidates)), replace=False):
            i, k = candidates[idx]

            def f(v, i=i, k=k, values=values):
                vs = [a.copy() for a in values]
                vs[i][k] = v
                return loss(vs, zeros) if name == "scales" else loss(scales, vs)

            step = FD_STEP * max(1.0, abs(values[i][k]))
            out.append((float(grads[i][name][k]), oracles.central_difference(f, values[i][k], step)))
    return out
