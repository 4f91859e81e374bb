"""Command-line front end: ``ctxserve {run,sweep,gen-trace,validate-config}``."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_axis, load_config
from .costmodel import InfeasibleParallelismError
from .parallel import memory_feasible
from .report import (format_summary, summarize, write_plots, write_requests_csv,
                     write_summary, write_sweep_csv)
from .simulator import InfeasibleConfigError, resolve_trace, run_experiment
from .workload import ContextProbe, TraceFormatError, TraceSpec, generate_trace

log = logging.getLogger("ctxserve")

LOG_ENV = "MEDHA_SIM_LOG"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level.isdigit():
        lvl = int(level)
    else:
        lvl = getattr(logging, level, None)
        if not isinstance(lvl, int):
            lvl = logging.WARNING
    logging.basicConfig(level=lvl, format="%(levelname)s %(name)s: %(message)s")


def _with_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
        if isinstance(cfg.trace, TraceSpec):
            cfg = replace(cfg, trace=replace(cfg.trace, seed=args.seed))
    if getattr(args, "exact_pipeline", False):
        cfg = replace(cfg, exact_pipeline=True)
    return cfg


def _out_dir(args, raw: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        spec = raw.get("output") or {}
        out = Path(spec if isinstance(spec, str) else spec.get("dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _longest_request(cfg: ExperimentConfig) -> int:
    src = cfg.trace
    if isinstance(src, TraceSpec):
        dist = src.long_dist if src.long_fraction > 0 else src.short_dist
        return dist.prefill.hi or int(dist.prefill.p90 * 10)
    if isinstance(src, ContextProbe):
        return src.prefill_tokens
    return max((e.prefill_tokens for e in resolve_trace(cfg)), default=0)


def _check(cfg: ExperimentConfig) -> list[str]:
    """Problems that would stop a run; empty when the config is usable."""
    problems = []
    pars = [("parallelism", cfg.parallelism)]
    if cfg.pools is not None:
        pars = [(f"pools.{k}", p) for k, p in (("short", cfg.pools.short),
                                                 ("long", cfg.pools.long)) if p]
    longest = _longest_request(cfg)
    for name, par in pars:
        try:
            par.check(cfg.model)
        except InfeasibleParallelismError as exc:
            problems.append(f"{name}: {exc}")
            continue
        mem = memory_feasible(longest, cfg.model, cfg.hardware, par,
                              activation_reserve=cfg.activation_reserve)
        if not mem:
            problems.append(f"{name}: a {longest}-token request needs "
                            f"{-mem.headroom / 1e9:.1f} GB more per device")
    return problems


def cmd_run(args) -> int:
    cfg, raw = load_config(args.config)
    cfg = _with_overrides(cfg, args)
    out = _out_dir(args, raw)
    m = run_experiment(cfg)
    (out / "metrics.json").write_text(m.to_json() + "\n", encoding="utf-8")
    write_requests_csv(m, out / "requests.csv")
    s = summarize(m)
    write_summary(s, out / "summary.txt")
    if args.plot:
        write_plots(m, out)
    print(format_summary(s))
    return 0


def _cell(cfg: ExperimentConfig, axes, values) -> dict:
    row = dict(zip(axes, values))
    try:
        for axis, value in zip(axes, values):
            cfg = apply_axis(cfg, axis, value)
        m = run_experiment(cfg)
    except (InfeasibleConfigError, InfeasibleParallelismError) as exc:
        log.info("sweep cell %s infeasible: %s", row, exc)
        row["status"] = "infeasible"
        return row
    row["status"] = "ok"
    row.update(summarize(m))
    row["_metrics"] = m
    return row


def cmd_sweep(args) -> int:
    cfg, raw = load_config(args.config)
    cfg = _with_overrides(cfg, args)
    out = _out_dir(args, raw)
    axes = list(cfg.sweep)
    cells = list(itertools.product(*(cfg.sweep[a] for a in axes)))
    if args.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_cell, itertools.repeat(cfg), itertools.repeat(axes), cells))
    else:
        rows = [_cell(cfg, axes, c) for c in cells]
    for i, row in enumerate(rows):
        m = row.pop("_metrics", None)
        if m is not None and args.plot:
            write_plots(m, out, prefix=f"cell{i:03d}_")
    write_sweep_csv(rows, axes, out / "sweep.csv")
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True) + "\n", encoding="utf-8")
    bad = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {bad} infeasible -> {out / 'sweep.csv'}")
    return 0


def cmd_gen_trace(args) -> int:
    cfg, raw = load_config(args.config)
    cfg = _with_overrides(cfg, args)
    if not isinstance(cfg.trace, TraceSpec):
        raise ConfigError("gen-trace needs a generated trace section (qps, duration, ...)")
    out = _out_dir(args, raw)
    trace = generate_trace(cfg.trace)
    path = out / "trace.jsonl"
    trace.write(path)
    print(f"{len(trace)} requests -> {path}")
    return 0


def cmd_validate(args) -> int:
    cfg, _ = load_config(args.config)
    cfg = _with_overrides(cfg, args)
    problems = _check(cfg)
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    if problems:
        return 1
    par = cfg.parallelism
    print(f"ok: {cfg.model.name or 'model'} on {cfg.hardware.name or 'hardware'}, "
          f"tp={par.p_tp} spp={par.p_spp} kvp={par.p_kvp}, policy={cfg.policy.value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxserve",
                                description="Long-context serving simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--out", help="output directory (default: config output.dir or ./out)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--exact-pipeline", action="store_true",
                        help="track every pipeline stage instead of the folded model")
    common.add_argument("--plot", action="store_true", help="write CDF data and charts")
    for name, fn, help_ in (("run", cmd_run, "simulate one configuration"),
                            ("sweep", cmd_sweep, "simulate the Cartesian product of sweep axes"),
                            ("gen-trace", cmd_gen_trace, "write the configured trace as JSONL"),
                            ("validate-config", cmd_validate, "check a config without running")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleConfigError, InfeasibleParallelismError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
