"""Command-line entry point: ``aftmc run | sweep | validate``.

Reports go to ``<out>/reports.jsonl``: one JSON record per repeat followed by
a summary record.  Each repeat record holds the deterministic ``body`` of the
run report, its SHA-256 and the wall time, which is kept out of the hash.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, build_config, load_document, parse_override
from .sampler import RunReport, build_family, run

log = logging.getLogger("aftmc")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2

SWEEP_KEYS = {"K": "K", "N": "N_test"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def body_digest(body: dict) -> str:
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def summarize(values) -> dict:
    """Median, IQR, mean and standard error of the finite estimates."""
    v = np.asarray([a for a in values if math.isfinite(a)], dtype=np.float64)
    out = {"count": int(v.size), "non_finite": len(values) - int(v.size)}
    if v.size == 0:
        return {**out, "median": None, "iqr": None, "mean": None, "se": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
    return {**out, "median": float(med), "iqr": float(q3 - q1), "mean": float(np.mean(v)), "se": se}


def _run_one(args) -> RunReport:
    cfg, repeat, out_dir = args
    return run(cfg, repeat, out_dir=out_dir)


def run_repeats(cfg: RunConfig, jobs: int = 1, out_dir=None) -> list[RunReport]:
    """Run ``cfg.num_repeats`` repeats, returned in repeat order."""
    if jobs <= 1:
        family = build_family(cfg)
        return [run(cfg, r, family=family, out_dir=out_dir) for r in range(cfg.num_repeats)]
    tasks = [(cfg, r, out_dir) for r in range(cfg.num_repeats)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))


def write_reports(reports: list[RunReport], path) -> dict:
    summary = summarize([r.log_z_test for r in reports])
    summary["aborted"] = sum(r.aborted for r in reports)
    with open(path, "w") as fh:
        for r in reports:
            body = r.body()
            record = {"body": body, "body_sha256": body_digest(body), "wall_seconds": r.wall_seconds}
            fh.write(canonical_json(record) + "\n")
        fh.write(canonical_json({"summary": summary}) + "\n")
    return summary


def write_summary_csv(reports: list[RunReport], cfg: RunConfig, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("repeat", "algorithm", "K", "N", "log_z_test", "wall_seconds"))
        for r in reports:
            w.writerow((r.repeat, r.algorithm, cfg.K, cfg.N_test, repr(r.log_z_test),
                        f"{r.wall_seconds:.6f}"))


def load_config(path, overrides) -> RunConfig:
    doc = load_document(path)
    for text in overrides or ():
        key, value = parse_override(text)
        doc[key] = value
    return build_config(doc)


def run_command(config_path, overrides=(), out_dir="aftmc_out", jobs: int = 1) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_repeats(cfg, jobs, out)
    summary = write_reports(reports, out / "reports.jsonl")
    write_summary_csv(reports, cfg, out / "summary.csv")
    log.info("log Z (test): median %s, IQR %s over %d repeats",
             summary["median"], summary["iqr"], len(reports))
    return EXIT_ABORT if summary["aborted"] else EXIT_OK


def sweep_command(config_path, param: str, values, overrides=(), out_dir="aftmc_out",
                  jobs: int = 1) -> int:
    """Run the config once per swept value and write a long-format ``sweep.csv``."""
    try:
        if param not in SWEEP_KEYS:
            raise ConfigError(f"sweep: parameter must be one of {sorted(SWEEP_KEYS)}, got {param!r}")
        if not values:
            raise ConfigError("sweep: empty list of values")
        base = load_config(config_path, overrides)
        key = SWEEP_KEYS[param]
        configs = [(v, base.replace(**{key: v})) for v in values]
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aborted = 0
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sweep_value", "repeat", "log_z_test"))
        for value, cfg in configs:
            sub = out / f"{param}_{value}"
            sub.mkdir(exist_ok=True)
            reports = run_repeats(cfg, jobs, sub)
            summary = write_reports(reports, sub / "reports.jsonl")
            write_summary_csv(reports, cfg, sub / "summary.csv")
            aborted += summary["aborted"]
            for r in reports:
                w.writerow((value, r.repeat, repr(r.log_z_test)))
            fh.flush()
            log.info("%s=%s: median %s, IQR %s", param, value, summary["median"], summary["iqr"])
    return EXIT_ABORT if aborted else EXIT_OK


def validate_command(config_path, overrides=()) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    print(canonical_json(cfg.echo()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aftmc", description="Annealed flow transport Monte Carlo")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, outputs=True):
        p.add_argument("--config", required=True, help="YAML or JSON config document")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if outputs:
            p.add_argument("--jobs", type=int, default=1, help="parallel repeats")
            p.add_argument("--out", default="aftmc_out", help="output directory")

    common(sub.add_parser("run", help="run all repeats of one config"))
    sweep = sub.add_parser("sweep", help="run a config over several K or N values")
    common(sweep)
    sweep.add_argument("--param", required=True, choices=sorted(SWEEP_KEYS))
    sweep.add_argument("--values", nargs="*", type=int, default=[])
    common(sub.add_parser("validate", help="parse and echo a config"), outputs=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return validate_command(args.config, args.set)
    if args.jobs < 1:
        log.error("config error: --jobs must be >= 1")
        return EXIT_CONFIG
    if args.command == "run":
        return run_command(args.config, args.set, args.out, args.jobs)
    return sweep_command(args.config, args.param, args.values, args.set, args.out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
