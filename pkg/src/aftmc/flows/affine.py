"""Diagonal affine flow ``y = exp(s) * x + b``.

Layout of theta: ``[s_1..s_d, b_1..b_d]``.  The identity is ``s = b = 0``.
"""

from __future__ import annotations

import numpy as np

from .base import Flow, FlowOutput, FlowParams, check_finite


def forward_diag_affine(s, b, x) -> FlowOutput:
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        y = np.exp(s) * x + b
    log_det = np.full(x.shape[:-1], np.sum(s)) if x.ndim > 1 else np.sum(s)
    check_finite(np.asarray(y), np.asarray(log_det))
    return FlowOutput(y, log_det)


class DiagAffineFlow(Flow):
    family = "diag_affine"

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.num_params = 2 * self.dim

    def init_params(self, rng=None) -> FlowParams:
        return FlowParams(self.family, np.zeros(self.num_params))

    def split(self, theta):
        return theta[: self.dim], theta[self.dim :]

    def forward_cached(self, theta, x):
        s, b = self.split(theta)
        with np.errstate(over="ignore"):
            scale = np.exp(s)
        y = scale * x + b
        ld = np.full(x.shape[0], np.sum(s))
        return y, ld, (x, scale)

    def backward(self, theta, cache, gy, gld):
        x, scale = cache
        gs = np.sum(gy * x, axis=0) * scale + np.sum(gld)
        gb = np.sum(gy, axis=0)
        return np.concatenate([gs, gb])
