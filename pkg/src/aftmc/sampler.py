"""Complete runs: annealed flow transport (three particle splits), SMC and VI.

Random streams are keyed by ``(seed, repeat, population)``; see
``ensemble.stream``.  The SMC population uses the same key as the AFT test
split, so an AFT run whose flows are all the identity reproduces SMC
bit for bit.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import ensemble as ens
from .config import RunConfig
from .ensemble import Ensemble, WeightCollapse
from .flows import Flow, FlowDomainError, FlowParams, IdentityFlow, loss_and_grad, make_flow
from .kernels import KernelConfig, StepSchedule, mutate
from .targets import (AnnealedFamily, CoxModel, Funnel, GaussianScale, Potential, StandardNormal,
                      cox_potential, cox_synthetic_counts, linear_schedule, load_counts_csv,
                      mixture_2d_potential, AnnealingSchedule)
from .trainer import AdamState, OptimizerConfig, adam_update, learn_flow

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "val")
SPLIT_CODES = {"train": 1, "test": 2, "val": 3}
FLOW_STREAM = 4
VI_STREAM = 5


def build_target(cfg: RunConfig) -> Potential:
    if cfg.target == "gaussian_scale":
        return GaussianScale(cfg.d, cfg.sigma)
    if cfg.target == "funnel":
        return Funnel(10, 9.0)
    if cfg.target == "mixture2d":
        return mixture_2d_potential(cfg.mixture) if cfg.mixture else mixture_2d_potential()
    if cfg.target == "cox":
        model = CoxModel(cfg.grid_size, beta_len=cfg.beta_len)
        if cfg.counts_csv:
            counts = load_counts_csv(cfg.counts_csv, cfg.grid_size)
        else:
            counts = cox_synthetic_counts(model, cfg.counts_seed)
        return cox_potential(CoxModel(cfg.grid_size, counts, beta_len=cfg.beta_len))
    raise ValueError(f"unknown target {cfg.target!r}")


def build_family(cfg: RunConfig, target: Potential | None = None) -> AnnealedFamily:
    target = build_target(cfg) if target is None else target
    return AnnealedFamily(StandardNormal(target.dim), target, linear_schedule(cfg.K))


def build_kernel(cfg: RunConfig) -> KernelConfig:
    return KernelConfig(kind=cfg.kernel, num_outer_iters=cfg.hmc_iters,
                        num_leapfrog_steps=cfg.leapfrog_steps,
                        schedule=StepSchedule(tuple(cfg.step_times), tuple(cfg.step_sizes)),
                        num_sweeps=cfg.slice_sweeps, max_doublings=cfg.max_doublings)


def build_flow(cfg: RunConfig, dim: int) -> Flow:
    if cfg.flow == "affine_iaf":
        return make_flow("affine_iaf", dim, hidden_per_dim=cfg.iaf_hidden_per_dim,
                         num_layers=cfg.iaf_layers, negative_slope=cfg.leaky_slope)
    if cfg.flow == "rq_spline_mf":
        return make_flow("rq_spline_mf", dim, num_bins=cfg.spline_bins)
    return make_flow(cfg.flow, dim)


def split_key(cfg: RunConfig, repeat: int, code: int) -> tuple[int, ...]:
    """Stream key of one population: ``(seed, repeat, code)`` hashed by SeedSequence."""
    return (int(cfg.seed), int(repeat), int(code))


@dataclass
class TemperatureRecord:
    k: int
    beta: float
    ess: dict[str, float] = field(default_factory=dict)
    resampled: dict[str, bool] = field(default_factory=dict)
    acceptance: dict[str, float] = field(default_factory=dict)
    log_z: dict[str, float] = field(default_factory=dict)
    val_loss: float | None = None
    identity_val_loss: float | None = None
    selected_iter: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(k=self.k, beta=self.beta, ess=self.ess, resampled=self.resampled,
                    acceptance=self.acceptance, log_z=self.log_z, val_loss=self.val_loss,
                    identity_val_loss=self.identity_val_loss, selected_iter=self.selected_iter)


@dataclass
class RunReport:
    algorithm: str
    repeat: int
    seed: int
    config: dict[str, Any]
    log_z: dict[str, float] = field(default_factory=dict)
    temperatures: list[TemperatureRecord] = field(default_factory=list)
    aborted: bool = False
    reason: str | None = None
    wall_seconds: float = 0.0

    @property
    def log_z_test(self) -> float:
        return self.log_z.get("test", float("nan"))

    def body(self) -> dict[str, Any]:
        """Deterministic content of the report (everything except timing)."""
        return dict(algorithm=self.algorithm, repeat=self.repeat, seed=self.seed,
                    log_z=self.log_z, aborted=self.aborted, reason=self.reason,
                    temperatures=[t.to_dict() for t in self.temperatures], config=self.config)

    def test_trace(self) -> list[float]:
        return [t.log_z["test"] for t in self.temperatures if "test" in t.log_z]


class _Diagnostics:
    def __init__(self, cfg: RunConfig, out_dir, repeat: int):
        self.dir = Path(out_dir) / f"repeat_{repeat:04d}" if out_dir is not None else None
        self.traces = cfg.save_traces and self.dir is not None
        self.snapshots = cfg.save_snapshots and self.dir is not None

    def trace(self, k, trace):
        if self.traces:
            self._write(f"trace_k{k:04d}.csv", ("iteration", "train_loss", "val_loss", "selected"),
                        trace.rows())

    def snapshot(self, k, name, e: Ensemble):
        if self.snapshots:
            header = tuple(f"x{i}" for i in range(e.positions.shape[1])) + ("weight",)
            self._write(f"particles_{name}_k{k:04d}.csv", header, ens.snapshot_rows(e))

    def _write(self, name, header, rows):
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)


def advance(e: Ensemble, flow: Flow, params: FlowParams, family: AnnealedFamily, k: int,
            kernel: KernelConfig, threshold: float, record: TemperatureRecord, name: str) -> Ensemble:
    """Transport, reweight, maybe resample, then mutate one population to temperature ``k``."""
    inc = ens.log_incremental_weights(e, flow, params, family, k)
    e = ens.reweight(e, inc)
    ratio = ens.ess(e) / e.size
    resample = ratio <= threshold
    if resample:
        e = ens.resample_multinomial(e, e.rng(k, ens.STAGE_RESAMPLE))
    x, stats = mutate(e.positions, k, family, kernel, e.rng(k, ens.STAGE_MUTATE))
    e = Ensemble(x, e.log_weights, e.log_z, e.key)
    record.ess[name] = float(ratio)
    record.resampled[name] = bool(resample)
    record.acceptance[name] = float(stats.acceptance)
    record.log_z[name] = float(e.log_z)
    return e


def _abort(report: RunReport, exc: Exception) -> RunReport:
    report.aborted = True
    report.reason = f"{type(exc).__name__}: {exc}"
    report.log_z = {name: float("nan") for name in report.log_z} or {"test": float("nan")}
    log.warning("repeat %d aborted: %s", report.repeat, report.reason)
    return report


def run_aft(cfg: RunConfig, repeat: int = 0, family: AnnealedFamily | None = None,
            out_dir=None) -> RunReport:
    start = time.perf_counter()
    family = build_family(cfg) if family is None else family
    kernel = build_kernel(cfg)
    flow = build_flow(cfg, family.dim)
    opt = OptimizerConfig(cfg.learning_rate, cfg.J)
    diag = _Diagnostics(cfg, out_dir, repeat)
    report = RunReport("aft", repeat, cfg.seed, cfg.echo())
    sizes = {"train": cfg.N_train, "test": cfg.N_test, "val": cfg.N_val}
    thresholds = {"train": cfg.A_train, "test": cfg.A_test, "val": cfg.A_val}
    pops = {a: ens.init_ensemble(sizes[a], family.base, split_key(cfg, repeat, SPLIT_CODES[a]))
            for a in SPLITS}
    flow_key = split_key(cfg, repeat, FLOW_STREAM)
    try:
        for k in range(1, family.K + 1):
            record = TemperatureRecord(k, family.beta(k))
            init = flow.init_params(ens.stream(flow_key, k, ens.STAGE_FLOW_INIT))
            params, trace = learn_flow(cfg.J, pops["train"], pops["val"], family, k, flow, init, opt)
            record.val_loss = float(trace.best_val_loss)
            record.identity_val_loss = float(trace.val_loss[0])
            record.selected_iter = trace.selected
            diag.trace(k, trace)
            for a in SPLITS:
                pops[a] = advance(pops[a], flow, params, family, k, kernel, thresholds[a], record, a)
                diag.snapshot(k, a, pops[a])
            report.temperatures.append(record)
        report.log_z = {a: float(pops[a].log_z) for a in SPLITS}
    except (WeightCollapse, FlowDomainError, FloatingPointError) as exc:
        _abort(report, exc)
    report.wall_seconds = time.perf_counter() - start
    return report


def run_smc(cfg: RunConfig, repeat: int = 0, family: AnnealedFamily | None = None,
            out_dir=None) -> RunReport:
    """SMC with adaptive resampling: AFT with every transport fixed to the identity."""
    start = time.perf_counter()
    family = build_family(cfg) if family is None else family
    kernel = build_kernel(cfg)
    identity = IdentityFlow(family.dim)
    params = identity.init_params()
    diag = _Diagnostics(cfg, out_dir, repeat)
    report = RunReport("smc", repeat, cfg.seed, cfg.echo())
    e = ens.init_ensemble(cfg.N_test, family.base, split_key(cfg, repeat, SPLIT_CODES["test"]))
    try:
        for k in range(1, family.K + 1):
            record = TemperatureRecord(k, family.beta(k))
            e = advance(e, identity, params, family, k, kernel, cfg.A_test, record, "test")
            diag.snapshot(k, "test", e)
            report.temperatures.append(record)
        report.log_z = {"test": float(e.log_z)}
    except (WeightCollapse, FloatingPointError) as exc:
        _abort(report, exc)
    report.wall_seconds = time.perf_counter() - start
    return report


def run_vi(cfg: RunConfig, repeat: int = 0, family: AnnealedFamily | None = None,
           out_dir=None) -> RunReport:
    """Fit one flow from the base to the target, then importance-correct fresh samples.

    Each Adam iteration draws a fresh batch of ``N_test`` base samples.  The
    estimate is ``logsumexp_i log G(x_i) - log N_test`` over an independent
    test batch.  As in ``learn_flow``, training stops at the last valid
    iterate if an update makes the flow non-invertible or the loss
    non-finite; the record's ``selected_iter`` is the number of completed
    updates.
    """
    start = time.perf_counter()
    family = build_family(cfg) if family is None else family
    one_step = AnnealedFamily(family.base, family.target, AnnealingSchedule(np.array([0.0, 1.0])))
    flow = build_flow(cfg, family.dim)
    opt = OptimizerConfig(cfg.learning_rate, cfg.J)
    report = RunReport("vi", repeat, cfg.seed, cfg.echo())
    vi_key = split_key(cfg, repeat, VI_STREAM)
    params = flow.init_params(ens.stream(split_key(cfg, repeat, FLOW_STREAM), 1, ens.STAGE_FLOW_INIT))
    theta = params.to_vector()
    weights = np.full(cfg.N_test, 1.0 / cfg.N_test)
    state = AdamState.zeros(theta.size)
    record = TemperatureRecord(1, 1.0)
    try:
        record.selected_iter = 0
        if flow.num_params:
            valid = theta
            # one extra evaluation checks the parameters produced by the last update
            for it in range(cfg.J + 1):
                x = family.base.sample(cfg.N_test, ens.stream(vi_key, it))
                try:
                    loss, grad = loss_and_grad(flow, theta, one_step, 1, x, weights)
                except FlowDomainError:
                    break
                if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                    break
                valid = theta
                record.selected_iter = it
                record.val_loss = float(loss)
                if it == cfg.J:
                    break
                state, theta = adam_update(state, theta, grad, opt)
            if record.selected_iter < cfg.J:
                log.debug("VI training stopped after %d updates", record.selected_iter)
            theta = valid
        params = FlowParams(flow.family, theta)
        e = ens.init_ensemble(cfg.N_test, family.base, split_key(cfg, repeat, SPLIT_CODES["test"]))
        e = ens.reweight(e, ens.log_incremental_weights(e, flow, params, one_step, 1))
        record.ess["test"] = float(ens.ess(e) / e.size)
        record.log_z["test"] = float(e.log_z)
        report.temperatures.append(record)
        report.log_z = {"test": float(e.log_z)}
    except (WeightCollapse, FlowDomainError, FloatingPointError) as exc:
        _abort(report, exc)
    report.wall_seconds = time.perf_counter() - start
    return report


RUNNERS = {"aft": run_aft, "smc": run_smc, "vi": run_vi}


def run(cfg: RunConfig, repeat: int = 0, family: AnnealedFamily | None = None, out_dir=None) -> RunReport:
    return RUNNERS[cfg.algorithm](cfg, repeat, family=family, out_dir=out_dir)
