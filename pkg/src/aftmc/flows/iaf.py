"""Affine inverse autoregressive flow driven by a masked MLP.

The network maps ``x`` to ``(shift, raw_scale)`` such that output ``i``
only sees inputs ``x_j`` with ``j < i``.  The transport is

    y_i = (1 + raw_scale_i) * x_i + shift_i,   log_det = sum_i log(1 + raw_scale_i)

which makes the Jacobian lower triangular.

theta layout, in order, for each hidden layer ``l``: ``W_l`` (fan_in x
hidden, row-major) then ``b_l``; then ``W_out`` (hidden x 2*dim) and
``b_out``.  Output columns ``[:dim]`` are shifts and ``[dim:]`` raw scales.
Masked-out weight entries are kept in theta but never receive gradient.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from .base import Flow, FlowDomainError, FlowParams


def made_masks(dim: int, hidden: int, num_layers: int) -> list[np.ndarray]:
    """Connectivity masks for a strictly autoregressive MLP.

    Inputs carry degrees ``1..dim``; hidden units cycle through ``1..dim-1``.
    A hidden unit connects to predecessors of smaller or equal degree and an
    output of degree ``i`` only to hidden units of degree ``< i``.
    """
    in_deg = np.arange(1, dim + 1)
    hid_deg = np.arange(hidden) % max(dim - 1, 1) + 1
    masks = []
    prev = in_deg
    for _ in range(num_layers):
        masks.append((hid_deg[None, :] >= prev[:, None]).astype(np.float64))
        prev = hid_deg
    out_deg = np.concatenate([in_deg, in_deg])
    masks.append((out_deg[None, :] > prev[:, None]).astype(np.float64))
    return masks


class AffineIAFFlow(Flow):
    family = "affine_iaf"

    def __init__(self, dim: int, hidden_per_dim: int = 30, num_layers: int = 3,
                 negative_slope: float = 0.01):
        self.dim = int(dim)
        self.hidden = int(hidden_per_dim) * self.dim
        self.num_layers = int(num_layers)
        self.negative_slope = float(negative_slope)
        if self.hidden < 1 or self.num_layers < 1:
            raise ValueError("IAF needs at least one hidden layer and unit")
        if not 0.0 <= self.negative_slope < 1.0:
            raise ValueError("negative_slope must lie in [0, 1)")
        self.masks = made_masks(self.dim, self.hidden, self.num_layers)
        self.shapes = [m.shape for m in self.masks]
        self.num_params = sum(r * c + c for r, c in self.shapes)

    def unpack(self, theta):
        layers = []
        pos = 0
        for r, c in self.shapes:
            w = theta[pos : pos + r * c].reshape(r, c)
            pos += r * c
            b = theta[pos : pos + c]
            pos += c
            layers.append((w, b))
        return layers

    def init_params(self, rng: np.random.Generator | None = None) -> FlowParams:
        rng = np.random.default_rng(0) if rng is None else rng
        parts = []
        for i, (r, c) in enumerate(self.shapes):
            if i == len(self.shapes) - 1:
                w = np.zeros((r, c))
            else:
                w = stats.truncnorm.rvs(-2.0, 2.0, size=(r, c), random_state=rng) / np.sqrt(r)
                w *= self.masks[i]
            parts += [w.ravel(), np.zeros(c)]
        return FlowParams(self.family, np.concatenate(parts))

    def network(self, theta, x):
        layers = self.unpack(theta)
        acts = [x]
        pre = []
        h = x
        for (w, b), m in zip(layers[:-1], self.masks[:-1]):
            z = h @ (w * m) + b
            pre.append(z)
            h = np.maximum(z, self.negative_slope * z)
            acts.append(h)
        w, b = layers[-1]
        out = h @ (w * self.masks[-1]) + b
        return out, acts, pre, layers

    def forward_cached(self, theta, x):
        out, acts, pre, layers = self.network(theta, x)
        d = self.dim
        shift = out[:, :d]
        scale = 1.0 + out[:, d:]
        if np.any(scale <= 0) or not np.all(np.isfinite(out)):
            raise FlowDomainError("IAF scale 1 + sigma is not positive")
        y = scale * x + shift
        ld = np.sum(np.log(scale), axis=1)
        return y, ld, (x, scale, acts, pre, layers)

    def backward(self, theta, cache, gy, gld):
        x, scale, acts, pre, layers = cache
        g_out = np.concatenate([gy, gy * x + gld[:, None] / scale], axis=1)
        grads = [None] * len(layers)
        g = g_out
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            m = self.masks[i]
            grads[i] = ((acts[i].T @ g) * m, np.sum(g, axis=0))
            if i == 0:
                break
            g = g @ (w * m).T
            z = pre[i - 1]
            g = g * (self.negative_slope + (1.0 - self.negative_slope) * (z > 0))
        return np.concatenate([p for gw, gb in grads for p in (gw.ravel(), gb)])


def forward_affine_iaf(theta, x, **kwargs):
    x = np.asarray(x, dtype=np.float64)
    flow = AffineIAFFlow(x.shape[-1], **kwargs)
    return flow.forward(np.asarray(theta, dtype=np.float64), x)
