"""Unnormalized target densities and the geometric annealing path.

Every potential works on batches: ``value`` maps an array of shape
``(..., dim)`` to ``(...)`` and ``grad`` maps it to ``(..., dim)``.  A
potential is ``V(x) = -log gamma(x)``; all arithmetic is float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)

TARGET_KEYS = ("gaussian_scale", "funnel", "cox", "mixture2d")


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", x, x)


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points with last axis {dim}, got shape {x.shape}")
    return x


class Potential:
    """Base class for ``V(x) = -log gamma(x)``.

    Subclasses set ``dim`` and implement ``value`` and ``grad``.  Instances
    are immutable after construction.
    """

    dim: int
    #: true log normalizing constant of exp(-V), when known analytically
    log_z: float | None = None

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, x) -> np.ndarray:
        return -self.value(x)


class StandardNormal(Potential):
    """Normalized standard normal; the base distribution of every run."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.log_z = 0.0

    def value(self, x):
        x = _as_points(x, self.dim)
        return 0.5 * _sqnorm(x) + 0.5 * self.dim * LOG_2PI

    def grad(self, x):
        return _as_points(x, self.dim).copy()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))


class GaussianScale(Potential):
    """Unnormalized ``exp(-|x|^2 / (2 sigma^2))`` with known log Z."""

    def __init__(self, dim: int, sigma: float):
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.sigma = float(sigma)
        self.log_z = 0.5 * self.dim * math.log(2.0 * math.pi * self.sigma**2)

    def value(self, x):
        x = _as_points(x, self.dim)
        return _sqnorm(x) / (2.0 * self.sigma**2)

    def grad(self, x):
        return _as_points(x, self.dim) / self.sigma**2


def gaussian_scale_potential(d: int, sigma: float) -> GaussianScale:
    return GaussianScale(d, sigma)


class Funnel(Potential):
    """Neal's funnel: x0 ~ N(0, var0), x_i | x0 ~ N(0, exp(x0)) for i >= 1.

    The density is normalized, so ``log_z`` is 0.
    """

    def __init__(self, dim: int = 10, var0: float = 9.0):
        if dim < 2:
            raise ValueError("funnel needs dim >= 2")
        self.dim = int(dim)
        self.var0 = float(var0)
        self.log_z = 0.0

    def value(self, x):
        x = _as_points(x, self.dim)
        x0 = x[..., 0]
        rest = x[..., 1:]
        m = self.dim - 1
        head = 0.5 * math.log(2.0 * math.pi * self.var0) + 0.5 * x0 * x0 / self.var0
        tail = 0.5 * m * (LOG_2PI + x0) + 0.5 * np.exp(-x0) * _sqnorm(rest)
        return head + tail

    def grad(self, x):
        x = _as_points(x, self.dim)
        x0 = x[..., 0]
        rest = x[..., 1:]
        inv = np.exp(-x0)
        g = np.empty_like(x)
        g[..., 0] = x0 / self.var0 + 0.5 * (self.dim - 1) - 0.5 * inv * _sqnorm(rest)
        g[..., 1:] = rest * inv[..., None]
        return g


def funnel_potential() -> Funnel:
    return Funnel(10, 9.0)


class GaussianMixture(Potential):
    """``V(x) = -log sum_j w_j N(x; m_j, C_j)``; normalized iff the weights sum to one."""

    def __init__(self, weights, means, covs):
        weights = np.asarray(weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be positive")
        if not (len(weights) == len(means) == len(covs)):
            raise ValueError("weights, means and covariances must have equal length")
        self.dim = means.shape[1]
        self.weights = weights
        self.means = means
        self.covs = covs
        self.precisions = np.empty_like(covs)
        log_norm = np.empty(len(weights))
        for j, c in enumerate(covs):
            try:
                chol = linalg.cholesky(c, lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError(f"covariance {j} is not positive definite") from exc
            self.precisions[j] = linalg.cho_solve((chol, True), np.eye(self.dim))
            log_norm[j] = -0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(chol)))
        self._log_coef = np.log(weights) + log_norm
        total = float(np.sum(weights))
        self.log_z = math.log(total)

    def _component_logs(self, x):
        diff = x[..., None, :] - self.means  # (..., J, d)
        quad = np.einsum("...ja,jab,...jb->...j", diff, self.precisions, diff)
        return self._log_coef - 0.5 * quad, diff

    def value(self, x):
        x = _as_points(x, self.dim)
        logs, _ = self._component_logs(x)
        top = np.max(logs, axis=-1)
        return -(top + np.log(np.sum(np.exp(logs - top[..., None]), axis=-1)))

    def grad(self, x):
        x = _as_points(x, self.dim)
        logs, diff = self._component_logs(x)
        resp = np.exp(logs - np.max(logs, axis=-1, keepdims=True))
        resp /= np.sum(resp, axis=-1, keepdims=True)
        pd = np.einsum("jab,...jb->...ja", self.precisions, diff)
        return np.sum(resp[..., None] * pd, axis=-2)


DEFAULT_MIXTURE = (
    (1.0 / 3.0, (2.5, 0.0), ((0.5, 0.0), (0.0, 0.5))),
    (1.0 / 3.0, (-1.25, 2.165), ((0.5, 0.2), (0.2, 0.5))),
    (1.0 / 3.0, (-1.25, -2.165), ((0.5, -0.2), (-0.2, 0.5))),
)


def mixture_2d_potential(components: Sequence = DEFAULT_MIXTURE) -> GaussianMixture:
    """Build a mixture from ``(weight, mean, covariance)`` triples."""
    weights = [c[0] for c in components]
    means = [c[1] for c in components]
    covs = [c[2] for c in components]
    return GaussianMixture(weights, means, covs)


@dataclass(frozen=True)
class CoxModel:
    """Log Gaussian Cox process on an ``M x M`` grid.

    Cells are indexed by integer coordinates ``(i, j)`` so the kernel
    ``sigma_sq * exp(-|u - v| / (M * beta_len))`` works in grid units.
    """

    grid_size: int
    counts: np.ndarray | None = None
    sigma_sq: float = 1.91
    beta_len: float = 1.0 / 33.0
    mean_const: float | None = None
    a: float | None = None

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if self.mean_const is None:
            object.__setattr__(self, "mean_const", math.log(126.0) - self.sigma_sq)
        if self.a is None:
            object.__setattr__(self, "a", 1.0 / self.grid_size**2)
        if self.counts is not None:
            y = np.asarray(self.counts, dtype=np.float64).ravel()
            if y.size != self.dim:
                raise ValueError(f"expected {self.dim} counts, got {y.size}")
            if np.any(y < 0):
                raise ValueError("counts must be nonnegative")
            object.__setattr__(self, "counts", y)

    @property
    def dim(self) -> int:
        return self.grid_size**2

    def mean(self) -> np.ndarray:
        return np.full(self.dim, self.mean_const)

    def covariance(self) -> np.ndarray:
        m = self.grid_size
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        pts = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
        dist = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1))
        return self.sigma_sq * np.exp(-dist / (m * self.beta_len))


class CoxPotential(Potential):
    """Posterior of the latent log-intensity given grid counts (unnormalized)."""

    def __init__(self, model: CoxModel):
        if model.counts is None:
            raise ValueError("CoxModel has no counts")
        self.model = model
        self.dim = model.dim
        self.mu = model.mean()
        cov = model.covariance()
        try:
            self.chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("Cox covariance is not positive definite") from exc
        self.precision = linalg.cho_solve((self.chol, True), np.eye(self.dim))
        self.half_log_det = 0.5 * self.dim * LOG_2PI + np.sum(np.log(np.diag(self.chol)))
        self.y = model.counts
        self.a = model.a

    def value(self, x):
        x = _as_points(x, self.dim)
        r = x - self.mu
        quad = np.einsum("...i,...i->...", r, r @ self.precision)
        lik = np.sum(x * self.y - self.a * np.exp(x), axis=-1)
        return 0.5 * quad + self.half_log_det - lik

    def grad(self, x):
        x = _as_points(x, self.dim)
        return (x - self.mu) @ self.precision - self.y + self.a * np.exp(x)


def cox_potential(model: CoxModel) -> CoxPotential:
    return CoxPotential(model)


def cox_synthetic_counts(model: CoxModel, seed: int) -> np.ndarray:
    """Draw a latent field from the prior and Poisson counts given it."""
    rng = np.random.default_rng(seed)
    chol = linalg.cholesky(model.covariance(), lower=True)
    x = model.mean() + chol @ rng.standard_normal(model.dim)
    return rng.poisson(model.a * np.exp(x)).astype(np.int64)


def load_counts_csv(path, grid_size: int | None = None) -> np.ndarray:
    """Read an ``M x M`` grid of nonnegative integer counts (row-major, no header)."""
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            rows.append([int(v) for v in row])
    grid = np.array(rows, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"counts file must hold a square grid, got shape {grid.shape}")
    if grid_size is not None and grid.shape[0] != grid_size:
        raise ValueError(f"counts grid is {grid.shape[0]}x{grid.shape[0]}, expected {grid_size}")
    if np.any(grid < 0):
        raise ValueError("counts must be nonnegative")
    return grid.ravel()


@dataclass(frozen=True)
class AnnealingSchedule:
    betas: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("schedule needs at least two betas")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("schedule must start at 0 and end at 1")
        if np.any(np.diff(b) < 0):
            raise ValueError("schedule must be nondecreasing")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def num_steps(self) -> int:
        return self.betas.size - 1


def linear_schedule(K: int) -> AnnealingSchedule:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    betas = np.arange(K + 1, dtype=np.float64) / K
    return AnnealingSchedule(betas)


@dataclass(frozen=True)
class AnnealedFamily:
    """Geometric path ``V_k = (1 - beta_k) V_0 + beta_k V_K``."""

    base: StandardNormal
    target: Potential
    schedule: AnnealingSchedule

    def __post_init__(self):
        if self.base.dim != self.target.dim:
            raise ValueError("base and target dimensions differ")

    @property
    def dim(self) -> int:
        return self.target.dim

    @property
    def K(self) -> int:
        return self.schedule.num_steps

    def beta(self, k: int) -> float:
        if not 0 <= k <= self.K:
            raise IndexError(f"temperature index {k} outside [0, {self.K}]")
        return float(self.schedule.betas[k])

    def potential(self, k: int, x) -> np.ndarray:
        b = self.beta(k)
        if b == 0.0:
            return self.base.value(x)
        if b == 1.0:
            return self.target.value(x)
        return (1.0 - b) * self.base.value(x) + b * self.target.value(x)

    def grad_potential(self, k: int, x) -> np.ndarray:
        b = self.beta(k)
        if b == 0.0:
            return self.base.grad(x)
        if b == 1.0:
            return self.target.grad(x)
        return (1.0 - b) * self.base.grad(x) + b * self.target.grad(x)

    def log_gamma(self, k: int, x) -> np.ndarray:
        return -self.potential(k, x)

    def grad_log_gamma(self, k: int, x) -> np.ndarray:
        return -self.grad_potential(k, x)


def make_family(target: Potential, K: int) -> AnnealedFamily:
    return AnnealedFamily(StandardNormal(target.dim), target, linear_schedule(K))
