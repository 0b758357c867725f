"""Weighted particle populations kept in log space.

Randomness is drawn from counter-based Philox streams keyed by
``(stream_key..., temperature, stage)``.  The key of a population never
depends on any other population, which keeps the test split of a run
independent of the train/validation splits and makes SMC and an
identity-flow AFT run consume exactly the same random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from .flows import Flow, FlowParams
from .targets import AnnealedFamily

STAGE_INIT = 0
STAGE_RESAMPLE = 1
STAGE_MUTATE = 2
STAGE_FLOW_INIT = 3


class WeightCollapse(FloatingPointError):
    """Every importance weight vanished or the log normalizer is not finite."""


def stream(key: tuple[int, ...], *counter: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key) + list(counter))))


def logsumexp(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty array")
    top = np.max(v)
    if top == -np.inf:
        return -np.inf
    if top == np.inf:
        return np.inf
    return float(top + np.log(np.sum(np.exp(v - top))))


@dataclass(frozen=True)
class Ensemble:
    positions: np.ndarray
    log_weights: np.ndarray
    log_z: float
    key: tuple[int, ...] = (0,)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def rng(self, k: int, stage: int) -> np.random.Generator:
        return stream(self.key, k, stage)


class LogIncrements(NamedTuple):
    values: np.ndarray
    positions: np.ndarray


def init_ensemble(n: int, base, key: tuple[int, ...] | int = 0) -> Ensemble:
    if n < 2:
        raise ValueError(f"an ensemble needs at least 2 particles, got {n}")
    key = (key,) if isinstance(key, (int, np.integer)) else tuple(key)
    x = base.sample(n, stream(key, 0, STAGE_INIT))
    return Ensemble(x, np.full(n, -np.log(n)), 0.0, key)


def log_incremental_weights(ensemble: Ensemble, flow: Flow, params: FlowParams,
                            family: AnnealedFamily, k: int) -> LogIncrements:
    """``log gamma_k(T x) + log|det dT(x)| - log gamma_{k-1}(x)`` per particle, plus ``T x``."""
    x = ensemble.positions
    y, log_det = flow.forward(params, x)
    values = (family.log_gamma(k, y) + log_det) - family.log_gamma(k - 1, x)
    return LogIncrements(values, y)


def reweight(ensemble: Ensemble, increments: LogIncrements) -> Ensemble:
    """Fold incremental weights into the weights and the running log Z.

    Positions are replaced by the transported points carried in ``increments``.
    """
    values = np.asarray(increments.values, dtype=np.float64)
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise WeightCollapse("incremental weights are NaN or infinite")
    # weights only see increments relative to their maximum, so a common offset cancels
    shift = np.max(values)
    if shift == -np.inf:
        raise WeightCollapse("all incremental weights are zero")
    unnorm = ensemble.log_weights + (values - shift)
    total = logsumexp(unnorm)
    if not np.isfinite(total):
        raise WeightCollapse("incremental weights collapsed")
    return replace(ensemble, positions=increments.positions,
                   log_weights=unnorm - total, log_z=ensemble.log_z + (shift + total))


def ess(ensemble: Ensemble | np.ndarray) -> float:
    """``1 / sum W_i^2`` for normalized log-weights."""
    lw = ensemble.log_weights if isinstance(ensemble, Ensemble) else np.asarray(ensemble)
    return float(np.exp(-logsumexp(2.0 * lw)))


def resample_multinomial(ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    n = ensemble.size
    cdf = np.cumsum(ensemble.weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    np.minimum(idx, n - 1, out=idx)
    return replace(ensemble, positions=ensemble.positions[idx],
                   log_weights=np.full(n, -np.log(n)))


def weighted_expectation(ensemble: Ensemble, f: Callable[[np.ndarray], np.ndarray]) -> float:
    vals = np.asarray(f(ensemble.positions), dtype=np.float64)
    return float(np.dot(ensemble.weights, vals))


def snapshot_rows(ensemble: Ensemble) -> list[list[float]]:
    """Rows of ``positions..., weight`` for CSV export."""
    return np.column_stack([ensemble.positions, ensemble.weights]).tolist()
