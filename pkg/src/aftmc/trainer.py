"""Full-batch Adam training of a per-temperature flow with validation selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ensemble import Ensemble
from .flows import Flow, FlowDomainError, FlowParams, loss_and_grad, weighted_loss
from .targets import AnnealedFamily

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    num_iters: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.num_iters < 0:
            raise ValueError("num_iters must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(state: AdamState, params: np.ndarray, grad: np.ndarray,
                cfg: OptimizerConfig) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step; returns the new state and parameters."""
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return AdamState(m, v, t), new


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    selected: int = 0
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.selected]

    def rows(self) -> list[tuple]:
        out = []
        for i, v in enumerate(self.val_loss):
            tr = self.train_loss[i - 1] if i > 0 else float("nan")
            out.append((i, tr, v, int(i == self.selected)))
        return out


def _val_loss(flow, theta, family, k, val: Ensemble) -> float:
    try:
        value = weighted_loss(flow, theta, family, k, val.positions, val.weights)
    except FlowDomainError:
        return float("nan")
    return value


def learn_flow(num_iters: int, train: Ensemble, val: Ensemble, family: AnnealedFamily, k: int,
               flow: Flow, init_params: FlowParams, cfg: OptimizerConfig) -> tuple[FlowParams, TrainTrace]:
    """Minimize the weighted transport loss on ``train``, select on ``val``.

    The initial (identity) parameters are always a candidate, so the returned
    flow never has a larger validation loss than the identity.  Ties go to the
    earliest iterate.  A non-finite loss or gradient stops training and the
    best snapshot so far is returned.
    """
    theta = init_params.to_vector()
    trace = TrainTrace()
    best = theta.copy()
    best_val = _val_loss(flow, theta, family, k, val)
    trace.val_loss.append(best_val)
    if flow.num_params == 0:
        return FlowParams(flow.family, best), trace
    state = AdamState.zeros(theta.size)
    weights = train.weights
    for it in range(1, num_iters + 1):
        try:
            loss, grad = loss_and_grad(flow, theta, family, k, train.positions, weights)
        except FlowDomainError:
            loss, grad = float("nan"), None
        if not np.isfinite(loss) or grad is None or not np.all(np.isfinite(grad)):
            log.debug("non-finite training loss at iteration %d of temperature %d", it, k)
            trace.stopped_early = True
            break
        state, theta = adam_update(state, theta, grad, cfg)
        current = _val_loss(flow, theta, family, k, val)
        trace.train_loss.append(loss)
        trace.val_loss.append(current)
        if not np.isfinite(current):
            trace.stopped_early = True
            break
        if current < best_val or not np.isfinite(best_val):
            best_val = current
            best = theta.copy()
            trace.selected = it
    return FlowParams(flow.family, best), trace
