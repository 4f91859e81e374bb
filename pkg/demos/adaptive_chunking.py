"""Chunk size trade-off on a 256K prompt that joins 16 decoding requests.

Small static chunks keep decode steps fast but pay per-step overhead on the
long prompt; large chunks do the reverse.  Adaptive chunking starts large
and shrinks as the prompt's KV cache grows, holding each step near the
50 ms TPOT target.

    python3 demos/adaptive_chunking.py
"""
from __future__ import annotations

import argparse
from pathlib import Path

from ctxserve.config import ExperimentConfig
from ctxserve.costmodel import ParallelismConfig, get_hardware, get_model
from ctxserve.report import percentile
from ctxserve.scheduler import ChunkPolicy
from ctxserve.simulator import run
from ctxserve.workload import load_trace

TRACE = Path(__file__).resolve().parents[1] / "configs" / "traces" / "mixed_batch.jsonl"


def point(trace, static_chunk):
    cfg = ExperimentConfig(get_model("llama3-8b"), get_hardware("a100"),
                           ParallelismConfig(8, 1, 1), horizon=60.0,
                           chunking=ChunkPolicy(static_chunk=static_chunk))
    m = run(trace, cfg)
    long = next(r for r in m.records if r.id == "long")
    end = long.arrival_s + long.ttft_s
    gaps = []
    for r in m.records:
        if r.id == "long" or r.ttft_s is None:
            continue
        t = r.arrival_s + r.ttft_s
        for g in r.tpot_s:
            t += g
            if long.arrival_s <= t <= end:
                gaps.append(g)
    return long.ttft_s, percentile(gaps, 95), m.counters["batch_overruns"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trace", default=str(TRACE))
    args = ap.parse_args(argv)
    trace = load_trace(args.trace)
    print(f"{'chunking':>11} {'long ttft s':>12} {'decode p95 ms':>14} {'overruns':>9}")
    for sc in (None, 256, 512, 1024, 2048, 4096):
        ttft, p95, over = point(trace, sc)
        name = "adaptive" if sc is None else f"static {sc}"
        print(f"{name:>11} {ttft:12.2f} {p95 * 1e3:14.1f} {over:9d}")


if __name__ == "__main__":
    main()
