"""Shared flow interface.

A flow object describes an architecture (family + dimension + fixed
hyperparameters); its parameters live in a flat float64 vector so they can
be handed to the optimizer and checkpointed without bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np


class FlowDomainError(FloatingPointError):
    """The flow produced a non-finite or non-invertible result."""


class FlowOutput(NamedTuple):
    y: np.ndarray
    log_det: np.ndarray


@dataclass(frozen=True)
class FlowParams:
    family: str
    theta: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.array(self.theta, dtype=np.float64, copy=True)

    @classmethod
    def from_vector(cls, family: str, vector) -> "FlowParams":
        return cls(family, np.array(vector, dtype=np.float64, copy=True))


class Flow:
    family: str = ""
    dim: int
    num_params: int

    def init_params(self, rng: np.random.Generator | None = None) -> FlowParams:
        """Parameters for which the flow is exactly the identity map."""
        raise NotImplementedError

    def forward_cached(self, theta: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, theta: np.ndarray, cache: Any, gy: np.ndarray, gld: np.ndarray) -> np.ndarray:
        """Pull back per-sample cotangents of ``y`` and ``log_det`` onto theta."""
        raise NotImplementedError

    def forward(self, params: FlowParams | np.ndarray, x) -> FlowOutput:
        theta = self._theta(params)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {xb.shape[-1]}")
        y, ld, _ = self.forward_cached(theta, xb)
        check_finite(y, ld)
        if single:
            return FlowOutput(y[0], ld[0])
        return FlowOutput(y, ld)

    def _theta(self, params) -> np.ndarray:
        if isinstance(params, FlowParams):
            if params.family != self.family:
                raise ValueError(f"{self.family} flow got {params.family} parameters")
            theta = params.theta
        else:
            theta = np.asarray(params, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise ValueError(f"{self.family} expects {self.num_params} parameters, got {theta.shape}")
        if np.any(np.isnan(theta)):
            raise ValueError("flow parameters contain NaN")
        return theta


def check_finite(y: np.ndarray, log_det: np.ndarray) -> None:
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(log_det))):
        raise FlowDomainError("flow produced non-finite output")


class IdentityFlow(Flow):
    family = "identity"

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.num_params = 0

    def init_params(self, rng=None) -> FlowParams:
        return FlowParams(self.family, np.zeros(0))

    def forward_cached(self, theta, x):
        return x, np.zeros(x.shape[0]), None

    def backward(self, theta, cache, gy, gld):
        return np.zeros(0)
