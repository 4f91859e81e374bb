"""Cost models, parallelism timing and scheduling for long-context LLM serving,
with a deterministic discrete-event simulator to tie them together."""
from __future__ import annotations

from .costmodel import (HardwareProfile, ModelConfig, ParallelismConfig, RuntimePredictor,
                        attention_flops, chunk_attention_cost, get_hardware, get_model,
                        kv_cache_bytes, min_efficient_chunk, predict_chunk_time, utilization)
from .config import ExperimentConfig, PoolSplit, load_config
from .scheduler import ChunkPolicy, Policy, Request, SLOSpec
from .simulator import SimMetrics, audit, run, run_baseline_pools
from .workload import TraceSpec, generate_trace, load_trace

__version__ = "0.1.0"

__all__ = [
    "HardwareProfile", "ModelConfig", "ParallelismConfig", "RuntimePredictor",
    "attention_flops", "chunk_attention_cost", "get_hardware", "get_model",
    "kv_cache_bytes", "min_efficient_chunk", "predict_chunk_time", "utilization",
    "ExperimentConfig", "PoolSplit", "load_config", "ChunkPolicy", "Policy", "Request",
    "SLOSpec", "SimMetrics", "audit", "run", "run_baseline_pools", "TraceSpec",
    "generate_trace", "load_trace",
]
