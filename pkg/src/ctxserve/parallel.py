"""Timing models for sequence pipeline, KV-cache and tensor parallelism.

``build_spp_schedule`` is the exact earliest-start schedule for chunks of one
request flowing through pipeline stages; ``spp_prefill_time`` is its
closed-form approximation.  The KVP helpers apply an Amdahl split of the step
time into an attention part, which shards, and the rest, which does not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .costmodel import (HardwareProfile, ModelConfig, ParallelismConfig,
                        kv_cache_bytes)


@dataclass(frozen=True)
class PipelineSchedule:
    start: tuple[tuple[float, ...], ...]  # [chunk][stage]
    end: tuple[tuple[float, ...], ...]
    comm: float

    @property
    def num_chunks(self) -> int:
        return len(self.start)

    @property
    def num_stages(self) -> int:
        return len(self.start[0]) if self.start else 0

    @property
    def makespan(self) -> float:
        return self.end[-1][-1] if self.end else 0.0

    def validate(self, tol: float = 1e-12) -> None:
        """Assert the pipeline rules hold."""
        for i, (s_row, e_row) in enumerate(zip(self.start, self.end)):
            for k in range(self.num_stages):
                assert e_row[k] >= s_row[k] - tol
                if k:
                    assert s_row[k] >= e_row[k - 1] + self.comm - tol
                if i:
                    assert s_row[k] >= self.end[i - 1][k] - tol


def build_spp_schedule(chunk_stage_times: Sequence[Sequence[float]],
                       comm: float = 0.0) -> PipelineSchedule:
    """Earliest-start schedule: chunk i enters a stage once chunk i-1 left it
    and its own previous stage output (plus ``comm``) has arrived."""
    if not chunk_stage_times or not chunk_stage_times[0]:
        raise ValueError("empty stage-time table")
    if comm < 0:
        raise ValueError("times must be nonnegative")
    stages = len(chunk_stage_times[0])
    free = [0.0] * stages
    starts, ends = [], []
    for row in chunk_stage_times:
        if len(row) != stages:
            raise ValueError("stage-time table must be rectangular")
        s_row, e_row = [], []
        ready = 0.0
        for k, t in enumerate(row):
            if t < 0:
                raise ValueError("times must be nonnegative")
            s = free[k] if free[k] > ready else ready
            e = s + t
            s_row.append(s)
            e_row.append(e)
            free[k] = e
            ready = e + comm
        starts.append(tuple(s_row))
        ends.append(tuple(e_row))
    return PipelineSchedule(tuple(starts), tuple(ends), comm)


def spp_prefill_time(n: int, c: int, stage_time: Callable[[int], float] | float,
                     comm: float, p_spp: int) -> float:
    """Closed-form pipelined prefill time ``T_p / p_spp + comm * n / c``.

    ``stage_time(i)`` is the unpipelined time of chunk ``i`` (1-based); a float
    means every chunk costs the same.
    """
    if not n >= c >= 1 or p_spp < 1:
        raise ValueError("need n >= c >= 1 and p_spp >= 1")
    chunks = math.ceil(n / c)
    if callable(stage_time):
        total = sum(stage_time(i) for i in range(1, chunks + 1))
    else:
        total = stage_time * chunks
    return total / p_spp + comm * n / c


def spp_schedule_makespan(n: int, c: int, stage_time: Callable[[int], float] | float,
                          comm: float, p_spp: int) -> float:
    """Exact makespan with each chunk's time split evenly over ``p_spp`` stages."""
    chunks = math.ceil(n / c)
    table = []
    for i in range(1, chunks + 1):
        t = stage_time(i) if callable(stage_time) else stage_time
        table.append([t / p_spp] * p_spp)
    return build_spp_schedule(table, comm).makespan


def kvp_decode_time(attn_time: float, total_time: float, p_kvp: int,
                    comm: float = 0.0) -> float:
    """Decode step time with attention sharded over ``p_kvp`` ranks."""
    if p_kvp < 1:
        raise ValueError("p_kvp must be >= 1")
    if attn_time < 0 or attn_time > total_time:
        raise ValueError("need 0 <= attn_time <= total_time")
    return attn_time / p_kvp + (total_time - attn_time) + comm


def kvp_chunk_time(i: int, c: int, attn_time: float, total_time: float,
                   p_kvp: int, comm: float = 0.0) -> float:
    """Chunked-prefill counterpart of :func:`kvp_decode_time` for chunk ``i``."""
    if i < 1 or c < 1:
        raise ValueError("chunk index and size must be >= 1")
    return kvp_decode_time(attn_time, total_time, p_kvp, comm)


@dataclass(frozen=True)
class MemoryCheck:
    feasible: bool
    headroom: float  # bytes per device, negative when infeasible
    kv_bytes_per_device: float
    weight_bytes_per_device: float

    def __bool__(self):
        return self.feasible


def memory_feasible(max_context: int, model: ModelConfig, hw: HardwareProfile,
                    par: ParallelismConfig, weight_bytes: float | None = None,
                    activation_reserve: float = 4e9) -> MemoryCheck:
    """Does one ``max_context``-token request fit in per-device memory?

    Weights split over TP and pipeline stages; the KV cache additionally
    splits over KVP ranks.  KV heads replicate once ``p_tp`` exceeds them.
    """
    if weight_bytes is None:
        weight_bytes = model.weight_bytes
    w = weight_bytes / (par.p_tp * par.p_spp)
    kv_split = min(par.p_tp, model.num_kv_heads) * par.p_spp * par.p_kvp
    kv = kv_cache_bytes(max_context, model) / kv_split
    headroom = hw.mem_capacity - w - kv - activation_reserve
    return MemoryCheck(headroom >= 0, headroom, kv, w)


def kv_token_capacity(model: ModelConfig, hw: HardwareProfile, par: ParallelismConfig,
                      weight_bytes: float | None = None,
                      activation_reserve: float = 4e9) -> int:
    """KV tokens one KVP rank (a TP x SPP device group) can hold."""
    base = memory_feasible(0, model, hw, par, weight_bytes, activation_reserve)
    if base.headroom <= 0:
        return 0
    per_token = kv_cache_bytes(1, model) / (min(par.p_tp, model.num_kv_heads) * par.p_spp)
    return int(base.headroom // per_token)
