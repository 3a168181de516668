"""Command-line entry point: ``bonsai run|oracle|regret|list-benchmarks``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .benchmarks import BENCHMARK_NAMES, make_benchmark, nominal_oracle, robust_oracle
from .config import ConfigError, ExperimentConfig, RegretConfig, load_config
from .driver import aggregate_curves, metric_curve, run_strategy
from .regret import (bound_curve, chain_problem, gamma_sum, k1_equivalence, lemma1_check,
                     nominal_ts_run, sensitivity_estimate, single_node_problem)

log = logging.getLogger("bonsai_rbo")

SUMMARY_SCHEMA = "bonsai_summary/1"
ORACLE_SCHEMA = "bonsai_oracle/1"
REGRET_CSV_SCHEMA = "bonsai_regret/1"
WORKERS_ENV = "BONSAI_WORKERS"


def _workers(flag: Optional[int]) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"{WORKERS_ENV} must be an integer, got {env!r}")
    return 1


def _init_worker() -> None:
    torch.set_num_threads(1)


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def run_file_name(problem: str, strategy: str, seed: int) -> str:
    return f"{problem}__{strategy}__seed{seed}.csv"


def _run_cell(config_text: str, base: str, strategy: str, seed: int, out_dir: str) -> dict:
    cfg = ExperimentConfig.model_validate_json(config_text)
    problem = cfg.problem(Path(base))
    t0 = time.perf_counter()
    try:
        record = run_strategy(problem, strategy, cfg.budget, seed, cfg.settings())
    except Exception as exc:  # a failed cell is reported, the campaign goes on
        log.error("%s seed %d failed: %s", strategy, seed, exc)
        return {"strategy": strategy, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    path = Path(out_dir) / run_file_name(problem.name, strategy, seed)
    record.write_csv(path, problem)
    curve = metric_curve(record, problem)
    return {"strategy": strategy, "seed": seed, "file": path.name, "failures": record.failures,
            "curve": curve.tolist(), "final": record.final_value(),
            "wall_time": time.perf_counter() - t0}


def campaign_summary(cfg: ExperimentConfig, cells: list, wall_time: float) -> dict:
    per_strategy = {}
    for strategy in cfg.strategies:
        ok = [c for c in cells if c["strategy"] == strategy and "error" not in c]
        entry = {
            "seeds": [c["seed"] for c in ok],
            "terminal": {str(c["seed"]): c["final"] for c in ok},
            "failed_cells": [{"seed": c["seed"], "error": c["error"]}
                             for c in cells if c["strategy"] == strategy and "error" in c],
            "acquisition_failures": int(sum(c["failures"] for c in ok)),
        }
        curves = [np.asarray(c["curve"], dtype=float).reshape(-1, 2) for c in ok]
        if curves:
            try:
                agg = aggregate_curves(curves)
                entry["curve"] = {k: np.asarray(v).tolist() for k, v in agg.items()}
            except ValueError as exc:
                entry["curve_error"] = str(exc)
        per_strategy[strategy] = entry
    return {
        "schema": SUMMARY_SCHEMA,
        "version": __version__,
        "config": json.loads(cfg.dumps()),
        "strategies": per_strategy,
        "wall_time": wall_time,
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config, ExperimentConfig)
    base = Path(args.config).resolve().parent
    problem = cfg.problem(base)
    if cfg.budget < problem.n_init:
        raise ConfigError(f"budget {cfg.budget} is below the minimum {problem.n_init}")
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    jobs = [(cfg.model_dump_json(), str(base), s, seed, str(out))
            for s in cfg.strategies for seed in cfg.seeds]
    cells = _map(_run_cell, jobs, _workers(args.workers))
    summary = campaign_summary(cfg, cells, time.perf_counter() - t0)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for s, entry in summary["strategies"].items():
        vals = list(entry["terminal"].values())
        mean = float(np.mean(vals)) if vals else math.nan
        print(f"{s}: {len(vals)} runs, mean final worst-case {mean:.6g}, "
              f"{len(entry['failed_cells'])} failed")
    return 1 if any(e["failed_cells"] for e in summary["strategies"].values()) else 0


def cmd_oracle(args) -> int:
    try:
        bench = make_benchmark(args.benchmark, args.variant)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    res = robust_oracle(bench, args.grid)
    nom = nominal_oracle(bench, args.grid)
    problem = bench.problem
    header = [f"x{i}" for i in range(problem.n_x)] + ["worst_case"]
    target = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        target.write(f"# schema={ORACLE_SCHEMA} version={__version__} benchmark={bench.name} "
                     f"variant={bench.variant} evaluations={res.evaluations}\n")
        w = csv.writer(target)
        w.writerow(["kind"] + header)
        w.writerow(["optimum"] + [repr(float(v)) for v in res.x] + [repr(res.value)])
        w.writerow(["nominal"] + [repr(float(v)) for v in nom.x] + [repr(nom.value)])
        if args.table:
            for x, v in zip(res.points, res.values):
                w.writerow(["grid"] + [repr(float(t)) for t in x] + [repr(float(v))])
    finally:
        if target is not sys.stdout:
            target.close()
    if bench.printed_optimum is not None:
        px, pv = bench.printed_optimum
        print(f"# printed optimum {np.round(np.asarray(px, dtype=float), 4).tolist()} {pv}",
              file=sys.stderr)
    return 0


def _regret_cell(cfg_text: str, seed: int) -> dict:
    cfg = RegretConfig.model_validate_json(cfg_text)
    if cfg.problem == "single":
        problem = single_node_problem(seed, cfg.n_designs, cfg.noise)
    else:
        problem = chain_problem(seed, cfg.n_designs, cfg.nodes, cfg.noise)
    curve = nominal_ts_run(problem, cfg.T, seed, cfg.features)
    sens = sensitivity_estimate(problem.net, designs=problem.X,
                                rng=np.random.default_rng(np.random.SeedSequence([seed, 7])))
    gam = gamma_sum(problem, cfg.T)
    out = {"seed": seed, "curve": curve, "L_net": sens.L_net, "rho": sens.spectral_radius,
           "gamma_sum": gam, "size": problem.size}
    if cfg.problem == "single":
        out["k1_equivalent"] = k1_equivalence(seed, cfg.T, cfg.n_designs)
    return out


def cmd_regret(args) -> int:
    cfg = load_config(args.config, RegretConfig)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = _map(_regret_cell, [(cfg.model_dump_json(), s) for s in cfg.seeds],
                 _workers(args.workers))
    fields = ["t", "instantaneous", "cumulative", "simple", "best", "bound"]
    bounds = []
    for cell in cells:
        c = cell["curve"]
        noise = cfg.noise
        bound = (bound_curve(cell["gamma_sum"], cell["size"], cell["L_net"], noise, cfg.kappa)
                 if cell["L_net"] else np.full(c.T, math.nan))
        bounds.append(bound)
        with open(out / f"regret__seed{cell['seed']}.csv", "w", newline="") as fh:
            fh.write(f"# schema={REGRET_CSV_SCHEMA} version={__version__} problem={cfg.problem} "
                     f"seed={cell['seed']} L_net={cell['L_net']!r} rho={cell['rho']!r}\n")
            w = csv.writer(fh)
            w.writerow(fields)
            for t in range(c.T):
                w.writerow([t + 1, repr(float(c.instantaneous[t])), repr(float(c.cumulative[t])),
                            repr(float(c.simple[t])), repr(float(c.best[t])),
                            repr(float(bound[t]))])
    curves = [cell["curve"] for cell in cells]
    n = len(curves)
    with open(out / "regret__aggregate.csv", "w", newline="") as fh:
        fh.write(f"# schema={REGRET_CSV_SCHEMA} version={__version__} problem={cfg.problem} "
                 f"seeds={n} kappa={cfg.kappa!r} (bound is a shape proxy, kappa uncalibrated)\n")
        w = csv.writer(fh)
        w.writerow(["t", "mean_instantaneous", "mean_cumulative", "se_cumulative",
                    "mean_simple", "mean_bound"])
        for t in range(cfg.T):
            cum = np.array([c.cumulative[t] for c in curves])
            se = cum.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
            w.writerow([t + 1, repr(float(np.mean([c.instantaneous[t] for c in curves]))),
                        repr(float(cum.mean())), repr(float(se)),
                        repr(float(np.mean([c.simple[t] for c in curves]))),
                        repr(float(np.mean([b[t] for b in bounds])))])
    rows = lemma1_check(curves, cfg.checkpoints)
    report = {
        "schema": REGRET_CSV_SCHEMA,
        "version": __version__,
        "config": json.loads(cfg.dumps()),
        "bcr_rate": {str(t): float(np.mean([c.cumulative[t - 1] / t for c in curves]))
                     for t in cfg.checkpoints},
        "lemma1": [vars(r) for r in rows],
        "lemma1_pass": all(r.holds for r in rows),
        "nonnegative_regret": bool(all((c.instantaneous >= 0).all() for c in curves)),
        "L_net": {str(cell["seed"]): cell["L_net"] for cell in cells},
    }
    if cfg.problem == "single":
        report["k1_equivalence"] = "pass" if all(c["k1_equivalent"] for c in cells) else "fail"
        print(f"K=1 reduction equivalence: {report['k1_equivalence']}")
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    for r in rows:
        print(f"T={r.T}: final {r.final_simple:.4g} <= average {r.average_simple:.4g} "
              f"<= BCR/T {r.cumulative_rate:.4g}: {'pass' if r.holds else 'FAIL'}")
    print("BCR_T/T: " + ", ".join(f"T={k} {v:.4g}" for k, v in report["bcr_rate"].items()))
    return 0 if report["lemma1_pass"] else 1


def cmd_list(args) -> int:
    for name in BENCHMARK_NAMES:
        b = make_benchmark(name)
        p = b.problem
        print(f"{name}: n_x={p.n_x} n_w={p.n_w} |W|={p.W.m} K={p.net.K} n_init={p.n_init}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bonsai", description="Robust BO over function networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a campaign of strategies and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, help=f"parallel cells (env {WORKERS_ENV})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="grid oracle for a benchmark")
    p.add_argument("benchmark")
    p.add_argument("--variant", default="default")
    p.add_argument("--grid", type=int, help="points per design dimension")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--table", action="store_true", help="include every evaluated design")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("regret", help="nominal Thompson-sampling regret study")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_regret)

    p = sub.add_parser("list-benchmarks", help="list registered benchmarks")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
