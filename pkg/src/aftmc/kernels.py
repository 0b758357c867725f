"""Markov kernels targeting the annealed densities ``pi_k``.

All kernels act on a whole population ``x`` of shape ``(N, d)`` at once
and look up their step size at annealing time ``t = k / K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .targets import AnnealedFamily

KERNEL_KINDS = ("hmc", "slice", "rwmh", "ula")


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-linear step size over annealing time, clamped at the ends."""

    knot_times: tuple[float, ...] = (0.0, 1.0)
    knot_values: tuple[float, ...] = (0.1, 0.1)

    def __post_init__(self):
        t = np.asarray(self.knot_times, dtype=np.float64)
        v = np.asarray(self.knot_values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ValueError("step schedule needs equal-length, nonempty knot arrays")
        if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > 1:
            raise ValueError("knot times must be increasing within [0, 1]")
        if np.any(v < 0):
            raise ValueError("step sizes must be nonnegative")
        object.__setattr__(self, "knot_times", tuple(float(a) for a in t))
        object.__setattr__(self, "knot_values", tuple(float(a) for a in v))


def step_size_at(schedule: StepSchedule, t: float) -> float:
    return float(np.interp(t, schedule.knot_times, schedule.knot_values))


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "hmc"
    num_outer_iters: int = 10
    num_leapfrog_steps: int = 10
    schedule: StepSchedule = field(default_factory=StepSchedule)
    num_sweeps: int = 1000
    max_doublings: int = 5
    shrink_cap: int = 1000

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        for name in ("num_outer_iters", "num_leapfrog_steps", "num_sweeps", "shrink_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_doublings < 0:
            raise ValueError("max_doublings must be >= 0")


class KernelStats(NamedTuple):
    acceptance: float
    capped: int = 0


def _step(family: AnnealedFamily, k: int, cfg: KernelConfig) -> float:
    return step_size_at(cfg.schedule, k / family.K)


def metropolis_log_accept(log_target_current, log_target_proposed):
    """Log acceptance probability ``min(0, log ratio)`` for symmetric proposals."""
    with np.errstate(invalid="ignore"):
        diff = np.asarray(log_target_proposed) - np.asarray(log_target_current)
    return np.where(np.isnan(diff), -np.inf, np.minimum(0.0, diff))


def hmc_step(x, k: int, family: AnnealedFamily, cfg: KernelConfig, rng: np.random.Generator):
    """Repeated HMC transitions with identity mass matrix.

    Returns the new positions and the per-particle number of accepted
    trajectories.  Trajectories that produce non-finite energies are rejected.
    """
    eps = _step(family, k, cfg)
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[0]
    accepted = np.zeros(n, dtype=np.int64)
    pot = family.potential(k, x)
    grad = family.grad_potential(k, x)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.num_outer_iters):
            p = rng.standard_normal(x.shape)
            log_u = np.log(rng.random(n))
            h0 = pot + 0.5 * np.einsum("ij,ij->i", p, p)
            q = x
            p = p - 0.5 * eps * grad
            for step in range(cfg.num_leapfrog_steps):
                q = q + eps * p
                g = family.grad_potential(k, q)
                if step < cfg.num_leapfrog_steps - 1:
                    p = p - eps * g
            p = p - 0.5 * eps * g
            pot_q = family.potential(k, q)
            dh = pot_q + 0.5 * np.einsum("ij,ij->i", p, p) - h0
            ok = np.isfinite(dh) & (log_u < -dh)
            x[ok] = q[ok]
            pot[ok] = pot_q[ok]
            grad[ok] = g[ok]
            accepted += ok
    return x, accepted


def rwmh_step(x, k: int, family: AnnealedFamily, cfg: KernelConfig, rng: np.random.Generator):
    """Single Gaussian random-walk Metropolis step ``x' ~ N(x, eps^2 I)``."""
    eps = _step(family, k, cfg)
    x = np.asarray(x, dtype=np.float64)
    prop = x + eps * rng.standard_normal(x.shape)
    log_u = np.log(rng.random(x.shape[0]))
    log_a = metropolis_log_accept(family.log_gamma(k, x), family.log_gamma(k, prop))
    ok = log_u < log_a
    return np.where(ok[:, None], prop, x), ok


def ula_step(x, k: int, family: AnnealedFamily, cfg: KernelConfig, rng: np.random.Generator):
    """Unadjusted Langevin step ``x - lam grad V_k(x) + sqrt(2 lam) xi``."""
    lam = _step(family, k, cfg)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        g = family.grad_potential(k, x)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient in ULA step")
    return x - lam * g + np.sqrt(2.0 * lam) * rng.standard_normal(x.shape)


class _Coordinate:
    """Evaluates log gamma_k along one coordinate for a subset of particles."""

    def __init__(self, family, k, x, j):
        self.family, self.k, self.x, self.j = family, k, x, j

    def __call__(self, rows, values):
        pts = self.x[rows]
        pts[:, self.j] = values
        return self.family.log_gamma(self.k, pts)


def _doubling_accepts(f, rows, x0, x1, level, lo, hi, f_lo, f_hi, width):
    """Neal's acceptance check for a point found by shrinking a doubled interval.

    All array arguments are already restricted to ``rows``.  Returns a
    boolean array: False where ``x1`` could not have produced the same
    interval and must be rejected.  The halving path does not depend on
    density values, so it is traced first and every midpoint that the
    check can look at is evaluated in one batched call.
    """
    n = rows.size
    lo, hi = lo.copy(), hi.copy()
    split = np.zeros(n, dtype=bool)
    live = (hi - lo) > 1.1 * width
    steps = []
    while np.any(live):
        mid = 0.5 * (lo + hi)
        split |= live & ((x0 < mid) != (x1 < mid))
        left = x1 < mid
        steps.append((live.copy(), mid, left, split.copy()))
        hi = np.where(live & left, mid, hi)
        lo = np.where(live & ~left, mid, lo)
        live &= (hi - lo) > 1.1 * width
    ok = np.ones(n, dtype=bool)
    if not steps:
        return ok
    # midpoints only matter for rows whose path splits x0 from x1 at some point
    need = np.array([st[0] & split for st in steps])  # (steps, n)
    mids = np.array([st[1] for st in steps])
    step_idx, row_idx = np.nonzero(need)
    f_mid = np.full(mids.shape, np.nan)
    if step_idx.size:
        f_mid[step_idx, row_idx] = f(rows[row_idx], mids[step_idx, row_idx])
    f_lo, f_hi = f_lo.copy(), f_hi.copy()
    for t, (live_t, _, left, split_t) in enumerate(steps):
        upd = live_t & split
        f_hi = np.where(upd & left, f_mid[t], f_hi)
        f_lo = np.where(upd & ~left, f_mid[t], f_lo)
        ok &= ~(live_t & split_t & (level >= f_lo) & (level >= f_hi))
    return ok


def _slice_coordinate(x, logf, j, family, k, width, cfg, rng):
    n = x.shape[0]
    f = _Coordinate(family, k, x, j)
    every = np.arange(n)
    x0 = x[:, j].copy()
    level = logf - rng.exponential(size=n)

    # stepping out by doubling
    lo = x0 - width * rng.random(n)
    hi = lo + width
    f_lo = f(every, lo)
    f_hi = f(every, hi)
    grow = (level < f_lo) | (level < f_hi)
    for _ in range(cfg.max_doublings):
        coin = rng.random(n)
        if not np.any(grow):
            continue
        span = hi - lo
        left = grow & (coin < 0.5)
        right = grow & ~(coin < 0.5)
        if np.any(left):
            il = np.flatnonzero(left)
            lo[il] -= span[il]
            f_lo[il] = f(il, lo[il])
        if np.any(right):
            ir = np.flatnonzero(right)
            hi[ir] += span[ir]
            f_hi[ir] = f(ir, hi[ir])
        grow &= (level < f_lo) | (level < f_hi)

    # shrinkage
    new_x = x0.copy()
    new_f = logf.copy()
    pending = np.ones(n, dtype=bool)
    s_lo, s_hi = lo.copy(), hi.copy()
    for _ in range(cfg.shrink_cap):
        rows = np.flatnonzero(pending)
        if rows.size == 0:
            break
        x1 = s_lo[rows] + rng.random(rows.size) * (s_hi[rows] - s_lo[rows])
        f1 = f(rows, x1)
        good = level[rows] < f1
        if np.any(good):
            g = rows[good]
            good[good] = _doubling_accepts(f, g, x0[g], x1[good], level[g], lo[g], hi[g],
                                           f_lo[g], f_hi[g], width)
        acc = rows[good]
        new_x[acc] = x1[good]
        new_f[acc] = f1[good]
        pending[acc] = False
        rej = ~good
        below = x1[rej] < x0[rows[rej]]
        s_lo[rows[rej][below]] = x1[rej][below]
        s_hi[rows[rej][~below]] = x1[rej][~below]
    x[:, j] = new_x
    return new_f, int(np.count_nonzero(pending))


def slice_step(x, k: int, family: AnnealedFamily, cfg: KernelConfig, rng: np.random.Generator):
    """Coordinate-wise slice sampling with doubling, ``num_sweeps`` full sweeps.

    The initial bracket width is the scheduled step size.  A coordinate whose
    shrinkage hits ``shrink_cap`` keeps its current value; the number of such
    events is returned alongside the new positions.
    """
    width = _step(family, k, cfg)
    x = np.array(x, dtype=np.float64, copy=True)
    logf = family.log_gamma(k, x)
    capped = 0
    if width <= 0:
        return x, capped
    for _ in range(cfg.num_sweeps):
        for j in range(x.shape[1]):
            logf, c = _slice_coordinate(x, logf, j, family, k, width, cfg, rng)
            capped += c
    return x, capped


def mutate(x, k: int, family: AnnealedFamily, cfg: KernelConfig, rng: np.random.Generator):
    """Apply the configured kernel; returns ``(positions, KernelStats)``."""
    n = x.shape[0]
    if cfg.kind == "hmc":
        x, acc = hmc_step(x, k, family, cfg, rng)
        return x, KernelStats(float(np.sum(acc)) / (n * cfg.num_outer_iters))
    if cfg.kind == "slice":
        x, capped = slice_step(x, k, family, cfg, rng)
        total = n * x.shape[1] * cfg.num_sweeps
        return x, KernelStats(1.0 - capped / total, capped)
    if cfg.kind == "rwmh":
        hits = 0
        for _ in range(cfg.num_outer_iters):
            x, ok = rwmh_step(x, k, family, cfg, rng)
            hits += int(np.count_nonzero(ok))
        return x, KernelStats(hits / (n * cfg.num_outer_iters))
    for _ in range(cfg.num_outer_iters):
        x = ula_step(x, k, family, cfg, rng)
    return x, KernelStats(1.0)
