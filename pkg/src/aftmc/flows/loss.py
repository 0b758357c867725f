"""Transport loss between consecutive annealed targets and its exact gradient."""

from __future__ import annotations

import numpy as np

from ..targets import AnnealedFamily
from .base import Flow, FlowParams, check_finite


def loss_terms(flow: Flow, params: FlowParams, family: AnnealedFamily, k: int, x) -> np.ndarray:
    """Per-point ``V_k(T(x)) - V_{k-1}(x) - log|det dT(x)|``."""
    if not 1 <= k <= family.K:
        raise IndexError(f"loss needs 1 <= k <= {family.K}, got {k}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y, ld = flow.forward(params, x)
    return family.potential(k, y) - family.potential(k - 1, x) - ld


def weighted_loss(flow: Flow, params: FlowParams, family: AnnealedFamily, k: int, x, weights) -> float:
    return float(np.dot(weights, loss_terms(flow, params, family, k, x)))


def loss_and_grad(flow: Flow, params: FlowParams, family: AnnealedFamily, k: int,
                  x, weights) -> tuple[float, np.ndarray]:
    """Weighted empirical loss ``sum_i W_i h(x_i)`` and its gradient in theta.

    ``weights`` must be normalized.  The gradient chains ``grad V_k`` at the
    transported points through the flow's hand-written backward pass.
    """
    if not 1 <= k <= family.K:
        raise IndexError(f"loss needs 1 <= k <= {family.K}, got {k}")
    theta = flow._theta(params)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    y, ld, cache = flow.forward_cached(theta, x)
    check_finite(y, ld)
    h = family.potential(k, y) - family.potential(k - 1, x) - ld
    loss = float(np.dot(weights, h))
    gy = weights[:, None] * family.grad_potential(k, y)
    grad = flow.backward(theta, cache, gy, -weights)
    return loss, grad
