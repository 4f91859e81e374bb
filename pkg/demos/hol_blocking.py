"""Head-of-line blocking: one replica, 5% long prompts, four policies.

FCFS makes every short request wait behind whole long prefills.  EDF is fine
while the replica keeps up, but once it falls behind the long prompts reach
their deadlines first and take over.  ILRS normalizes slack by deadline
length, so long prompts advance in small chunks while shorts slip in.

    python3 demos/hol_blocking.py --seed 1 --qps 2 12
"""
from __future__ import annotations

import argparse
from dataclasses import replace

from ctxserve.config import ExperimentConfig
from ctxserve.costmodel import ParallelismConfig, get_hardware, get_model
from ctxserve.report import percentile
from ctxserve.scheduler import Policy
from ctxserve.simulator import run
from ctxserve.workload import TraceSpec, generate_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--qps", type=float, nargs="+", default=[2.0, 12.0])
    ap.add_argument("--duration", type=float, default=120.0)
    args = ap.parse_args(argv)

    cfg = ExperimentConfig(get_model("llama3-8b"), get_hardware("a100"),
                           ParallelismConfig(8, 1, 1), horizon=300.0)
    print(f"{'qps':>5} {'policy':>6} {'ttft p50':>9} {'ttft p99':>9} {'finished':>9}")
    for qps in args.qps:
        trace = generate_trace(TraceSpec(qps=qps, duration=args.duration,
                                         long_fraction=0.05, seed=args.seed))
        for pol in Policy:
            m = run(trace, replace(cfg, policy=pol))
            ttft = m.ttfts()
            print(f"{qps:5g} {pol.value:>6} {percentile(ttft, 50):9.3f} "
                  f"{percentile(ttft, 99):9.2f} {m.num_finished:5d}/{m.num_requests}")


if __name__ == "__main__":
    main()
