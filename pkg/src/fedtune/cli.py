"""Command-line entry point: ``fedtune <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .analysis import FEDEX_KINDS, report, run_study
from .backends import fit_surrogate, generate_table, load_table
from .config import ConfigError, load_config, require_budget
from .optimizers import KINDS, OptimizerSpec, run_optimizer

log = logging.getLogger("fedtune")


def _jobs(args, cfg=None) -> int:
    if args.jobs:
        return args.jobs
    if cfg is not None and cfg.jobs > 1:
        return cfg.jobs
    return os.cpu_count() or 1


def cmd_gen_table(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.tables_dir
    if out is None:
        raise ConfigError("missing key 'tables_dir' in config (or pass --out)")
    out.mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        data = task.build(cfg.base_dir)
        for algo in cfg.algorithms:
            path = out / f"{task.id}__{algo}.csv"
            if path.exists() and not args.resume:
                path.unlink()
            space = cfg.space_for(task.family, algo)

            def progress(done, total, name=path.name):
                print(f"{name}: {done}/{total} rows done", file=sys.stderr, flush=True)

            table = generate_table(data, algo, space, cfg.fidelities(), cfg.n_seeds, out=path,
                                   family=task.family, jobs=_jobs(args, cfg), progress=progress)
            print(f"{path}: {len(table)} rows")
    return 0


def cmd_fit_surrogate(args) -> int:
    table = load_table(args.table)
    sur, mae = fit_surrogate(table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sur.save(out)
    print(f"n_trees={sur.n_trees} max_depth={sur.max_depth} cv_mae={mae:.6g}")
    return 0


def cmd_run(args) -> int:
    kinds = KINDS + FEDEX_KINDS
    if args.optimizer not in kinds:
        print(f"error: unknown optimizer {args.optimizer!r}; valid kinds: {', '.join(kinds)}", file=sys.stderr)
        return 2
    cfg = load_config(args.config)
    require_budget(cfg)
    if args.mode:
        cfg.mode = args.mode
    params = {}
    for o in cfg.optimizers:
        if o.get("kind") == args.optimizer:
            params = dict(o.get("params", {}) or {})
            break
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for task in cfg.tasks:
        data = task.build(cfg.base_dir)
        for algo in cfg.algorithms:
            if args.optimizer in FEDEX_KINDS:
                from .fedex import run_fedex
                bench = cfg.benchmark(task, data, algo, "raw")
                trials = run_fedex(bench, args.optimizer.split("_")[0], params.get("wrapper_spec"),
                                   cfg.budget_for(bench), args.seed).trials
            else:
                bench = cfg.benchmark(task, data, algo)
                trials = run_optimizer(OptimizerSpec(args.optimizer, params, args.seed), bench,
                                       cfg.budget_for(bench))
            records += [{"task": task.id, "algorithm": algo, "optimizer": args.optimizer, **t.to_record()}
                        for t in trials]
    with out.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{out}: {len(records)} trials")
    return 0


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise ConfigError("missing key 'output' in config (or pass --out)")
    failed = run_study(cfg, out, jobs=_jobs(args, cfg))
    if failed:
        print(f"{failed} cell(s) failed; see {out / 'manifest.json'}", file=sys.stderr)
        return 1
    print(f"study written to {out}")
    return 0


def cmd_report(args) -> int:
    report(args.study_dir)
    print(f"summaries written to {args.study_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtune", description="Federated hyperparameter optimization benchmark.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-table", help="evaluate the full grid and write lookup tables")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: tables_dir from the config)")
    g.add_argument("--resume", action="store_true", help="keep rows already on disk")
    g.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    g.set_defaults(func=cmd_gen_table)

    f = sub.add_parser("fit-surrogate", help="fit random-forest surrogates to a lookup table")
    f.add_argument("--table", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_surrogate)

    r = sub.add_parser("run", help="run one optimizer on every task of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--optimizer", required=True, help=f"one of: {', '.join(KINDS + FEDEX_KINDS)}")
    r.add_argument("--mode", choices=("raw", "tabular", "surrogate"), default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="trial log (JSON lines)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("study", help="run the full task x algorithm x optimizer x repetition grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="study directory (default: output from the config)")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    s.set_defaults(func=cmd_study)

    rep = sub.add_parser("report", help="recompute summary CSVs of a study directory")
    rep.add_argument("--study-dir", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
