"""Run configuration: defaults, validation and YAML/JSON parsing.

A config document is a flat mapping.  Keys left out fall back to defaults,
some of which depend on the target (see ``TARGET_DEFAULTS``).  Unknown keys
are rejected.  ``A`` is shorthand that sets all three resampling thresholds.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .flows import FAMILIES
from .kernels import KERNEL_KINDS
from .targets import TARGET_KEYS

ALGORITHMS = ("aft", "smc", "vi")

G1_STEPS = ((0.0, 0.25, 0.5, 1.0), (0.5, 0.5, 0.5, 0.3))
G2_STEPS = ((0.0, 0.25, 0.5, 0.75, 1.0), (0.9, 0.7, 0.6, 0.5, 0.4))
G4_STEPS = ((0.0, 0.25, 0.5, 1.0), (0.3, 0.3, 0.2, 0.2))

TARGET_DEFAULTS: dict[str, dict[str, Any]] = {
    "gaussian_scale": dict(flow="diag_affine", kernel="hmc", steps=G1_STEPS,
                           learning_rate=1e-2, J=100, N_train=2000, N_val=2000),
    "mixture2d": dict(flow="rq_spline_mf", kernel="hmc", steps=G1_STEPS,
                      learning_rate=1e-3, J=1000, N_train=2000, N_val=2000),
    "funnel": dict(flow="affine_iaf", kernel="slice", steps=G2_STEPS,
                   learning_rate=1e-3, J=4000, N_train=6000, N_val=6000),
    "cox": dict(flow="diag_affine", kernel="hmc", steps=G4_STEPS,
                learning_rate=1e-2, J=500, N_train=2000, N_val=2000),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "aft"
    target: str = "gaussian_scale"
    # target parameters
    d: int = 2
    sigma: float = 2.0
    grid_size: int = 8
    beta_len: float = 1.0 / 33.0
    counts_csv: str | None = None
    counts_seed: int = 0
    mixture: tuple | None = None
    # annealing
    K: int = 10
    schedule: str = "linear"
    # flow
    flow: str = "diag_affine"
    iaf_hidden_per_dim: int = 30
    iaf_layers: int = 3
    leaky_slope: float = 0.01
    spline_bins: int = 10
    # kernel
    kernel: str = "hmc"
    hmc_iters: int = 10
    leapfrog_steps: int = 10
    slice_sweeps: int = 1000
    max_doublings: int = 5
    step_times: tuple = G1_STEPS[0]
    step_sizes: tuple = G1_STEPS[1]
    # particles and resampling
    N_train: int = 2000
    N_val: int = 2000
    N_test: int = 2000
    A_train: float = 0.3
    A_val: float = 0.3
    A_test: float = 0.3
    # optimizer
    learning_rate: float = 1e-2
    J: int = 100
    # bookkeeping
    seed: int = 0
    num_repeats: int = 100
    save_traces: bool = False
    save_snapshots: bool = False

    def echo(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(v)
        return out

    def replace(self, **changes) -> "RunConfig":
        return build_config({**self.echo(), **changes})


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(a) for a in v]
    return v


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(a) for a in v)
    return v


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
INT_KEYS = {n for n, f in FIELDS.items() if f.type == "int"}
FLOAT_KEYS = {n for n, f in FIELDS.items() if f.type == "float"}
BOOL_KEYS = {n for n, f in FIELDS.items() if f.type == "bool"}


def _coerce(key, value):
    if key in BOOL_KEYS:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if key in INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if key in FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key in ("step_times", "step_sizes"):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(a, (int, float)) and not isinstance(a, bool) for a in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        return tuple(float(a) for a in value)
    return _freeze(value)


def build_config(doc: dict[str, Any]) -> RunConfig:
    """Validate a flat mapping and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    doc = dict(doc)
    for key in doc:
        if key not in FIELDS and key != "A":
            raise ConfigError(f"unknown config key {key!r}")
    if "A" in doc:
        shared = doc.pop("A")
        for split in ("A_train", "A_val", "A_test"):
            doc.setdefault(split, shared)

    target = doc.get("target", RunConfig.target)
    if target not in TARGET_KEYS:
        raise ConfigError(f"target: unknown target {target!r}; expected one of {TARGET_KEYS}")
    defaults = TARGET_DEFAULTS[target]
    values = {
        "flow": defaults["flow"], "kernel": defaults["kernel"],
        "step_times": defaults["steps"][0], "step_sizes": defaults["steps"][1],
        "learning_rate": defaults["learning_rate"], "J": defaults["J"],
        "N_train": defaults["N_train"], "N_val": defaults["N_val"],
    }
    if target == "funnel":
        values["d"] = 10
    for key, value in doc.items():
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(cfg.algorithm in ALGORITHMS, "algorithm", f"expected one of {ALGORITHMS}")
    need(cfg.flow in FAMILIES, "flow", f"expected one of {FAMILIES}")
    need(cfg.kernel in KERNEL_KINDS, "kernel", f"expected one of {KERNEL_KINDS}")
    need(cfg.schedule == "linear", "schedule", "only 'linear' is supported")
    need(cfg.K >= 1, "K", "must be >= 1")
    need(cfg.d >= 1, "d", "must be >= 1")
    need(cfg.target != "funnel" or cfg.d == 10, "d", "the funnel target is 10-dimensional")
    need(cfg.sigma > 0, "sigma", "must be positive")
    need(cfg.grid_size >= 1, "grid_size", "must be >= 1")
    need(cfg.beta_len > 0, "beta_len", "must be positive")
    for key in ("hmc_iters", "leapfrog_steps", "slice_sweeps", "iaf_hidden_per_dim",
                "iaf_layers", "spline_bins", "num_repeats"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(0.0 <= cfg.leaky_slope < 1.0, "leaky_slope", "must lie in [0, 1)")
    need(cfg.max_doublings >= 0, "max_doublings", "must be >= 0")
    need(cfg.J >= 0, "J", "must be >= 0")
    need(cfg.learning_rate > 0, "learning_rate", "must be positive")
    need(len(cfg.step_times) == len(cfg.step_sizes) and len(cfg.step_times) > 0,
         "step_sizes", "must have the same nonzero length as step_times")
    need(all(b > a for a, b in zip(cfg.step_times, cfg.step_times[1:])), "step_times", "must be increasing")
    need(all(0.0 <= t <= 1.0 for t in cfg.step_times), "step_times", "must lie in [0, 1]")
    need(all(s >= 0 for s in cfg.step_sizes), "step_sizes", "must be nonnegative")
    for split in ("train", "val", "test"):
        n = getattr(cfg, f"N_{split}")
        a = getattr(cfg, f"A_{split}")
        need(n >= 2, f"N_{split}", "must be >= 2")
        need(1.0 / n <= a < 1.0 or math.isclose(a, 1.0 / n), f"A_{split}",
             f"A must lie in [1/N, 1) = [{1.0 / n:g}, 1), got {a}")


def load_document(path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"malformed config document {path}: top level must be a mapping")
    return doc


def parse_config(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    doc = load_document(path)
    doc.update(overrides or {})
    return build_config(doc)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``KEY=VALUE``; the value is read as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form KEY=VALUE")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse override value {raw!r}") from exc
    return key, value
