"""Scaling one long request: pipeline stages for prefill, KV shards for decode.

Sequence pipelining lets chunk i+1 enter stage 1 as soon as chunk i leaves
it, so prefill time falls almost linearly with the number of stages.  KV
parallelism splits the cache read of each decode step; the gain grows with
context because attention is a larger share of the step.

    python3 demos/long_context_scaling.py --model llama3-70b
"""
from __future__ import annotations

import argparse

from ctxserve.config import ExperimentConfig
from ctxserve.costmodel import ParallelismConfig, RuntimePredictor, get_hardware, get_model
from ctxserve.parallel import memory_feasible
from ctxserve.scheduler import ChunkPolicy
from ctxserve.simulator import run
from ctxserve.workload import single_request_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="llama3-8b")
    ap.add_argument("--contexts", type=int, nargs="+", default=[1_000_000, 4_000_000, 10_000_000])
    args = ap.parse_args(argv)
    model, hw = get_model(args.model), get_hardware("h100")

    print("prefill TTFT (s) by pipeline stages, 8-way TP per stage")
    print(f"{'context':>10} " + " ".join(f"{'p=' + str(p):>8}" for p in (1, 2, 4, 8, 16)))
    for n in args.contexts:
        cells = []
        for p in (1, 2, 4, 8, 16):
            par = ParallelismConfig(8, p, 1)
            if not memory_feasible(n, model, hw, par):
                cells.append(f"{'x':>8}")
                continue
            cfg = ExperimentConfig(model, hw, par, chunking=ChunkPolicy(static_chunk=4096))
            cells.append(f"{run(single_request_trace(n), cfg).records[0].ttft_s:8.1f}")
        print(f"{n:>10} " + " ".join(cells))

    print("\ndecode TPOT (ms) by KV shards, 8-way TP, 4 stages")
    pred = RuntimePredictor(model, hw, ParallelismConfig(8, 4, 1))
    print(f"{'context':>10} " + " ".join(f"{'kvp=' + str(k):>8}" for k in (1, 2, 4)))
    for n in args.contexts:
        print(f"{n:>10} " + " ".join(f"{pred.decode_time(n, k) * 1e3:8.2f}" for k in (1, 2, 4)))


if __name__ == "__main__":
    main()
