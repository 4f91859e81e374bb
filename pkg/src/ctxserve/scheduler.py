"""Prefill prioritization, adaptive chunking and batch packing.

The scheduler only ever reorders and resizes prefill work.  Requests in the
decode phase ride along in every batch they are eligible for and are never
preempted.

Slack uses time remaining until the deadline: ``relative_slack =
((deadline_ts - now) - remaining_prefill_time) / deadline_duration``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Protocol, Sequence

from .costmodel import (CHUNK_QUANTUM, ChunkWork, DecodeWork, RuntimePredictor,
                        StepWork, min_efficient_chunk)


class Phase(Enum):
    WAITING = "waiting"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    FINISHED = "finished"


_ORDER = {Phase.WAITING: 0, Phase.PREFILLING: 1, Phase.DECODING: 2, Phase.FINISHED: 3}


class PhaseError(RuntimeError):
    pass


@dataclass(eq=False)
class Request:
    id: str
    arrival_time: float
    prefill_tokens: int
    decode_tokens: int
    deadline_duration: float = math.inf
    phase: Phase = Phase.WAITING
    prefill_done_tokens: int = 0  # tokens handed to a batch so far
    assigned_kvp_ranks: list[int] = field(default_factory=list)
    shard_tokens: list[int] = field(default_factory=list)  # KV tokens per assigned rank
    first_token_ts: float | None = None
    decode_ts: list[float] = field(default_factory=list)
    tokens_emitted: int = 0
    in_flight: bool = False  # a decode step for this request has not completed yet

    @property
    def deadline_ts(self) -> float:
        return self.arrival_time + self.deadline_duration

    @property
    def remaining_prefill(self) -> int:
        return self.prefill_tokens - self.prefill_done_tokens

    @property
    def home_rank(self) -> int:
        return self.assigned_kvp_ranks[-1] if self.assigned_kvp_ranks else 0

    @property
    def kv_tokens(self) -> int:
        return sum(self.shard_tokens)

    def transition(self, new: Phase) -> None:
        old = self.phase
        if new is old:
            return
        backward = _ORDER[new] < _ORDER[old]
        if backward and not (old is Phase.PREFILLING and new is Phase.WAITING):
            raise PhaseError(f"{self.id}: illegal transition {old.value} -> {new.value}")
        self.phase = new

    def _shards(self):
        if len(self.assigned_kvp_ranks) <= 1:
            return None
        return tuple(zip(self.assigned_kvp_ranks, self.shard_tokens))

    def chunk_work(self, tokens: int) -> ChunkWork:
        return ChunkWork(self.prefill_done_tokens, tokens, self.home_rank, self._shards())

    def decode_work(self) -> DecodeWork:
        return DecodeWork(self.kv_tokens, self.home_rank, self._shards())


class Policy(str, Enum):
    FCFS = "fcfs"
    EDF = "edf"
    LRS = "lrs"
    ILRS = "ilrs"


class PrefillEstimator(Protocol):
    def remaining_prefill_time(self, req: Request) -> float: ...


class IsolatedPrefillEstimator:
    """Remaining prefill time of a request run alone at a reference chunk size."""

    def __init__(self, predictor: RuntimePredictor, chunk: int = 4096):
        self.predictor = predictor
        self.chunk = chunk

    def prefill_time(self, tokens: int) -> float:
        return self.predictor.isolated_prefill_time(tokens, 0, self.chunk)

    def remaining_prefill_time(self, req: Request) -> float:
        return self.predictor.isolated_prefill_time(
            req.prefill_tokens, req.prefill_done_tokens, self.chunk)


@dataclass(frozen=True)
class SLOSpec:
    ttft_slo_scale: float = 3.0
    ttft_slo_floor: float = 1.0
    tpot_slo: float = 0.05  # target batch time, seconds
    max_sharing_fraction: float = 0.25

    def __post_init__(self):
        if self.ttft_slo_scale < 1:
            raise ValueError("ttft_slo_scale must be >= 1")
        if self.ttft_slo_floor < 0:
            raise ValueError("ttft_slo_floor must be >= 0")
        if self.tpot_slo <= 0:
            raise ValueError("tpot_slo must be positive")
        if not 0 <= self.max_sharing_fraction <= 1:
            raise ValueError("max_sharing_fraction must be in [0, 1]")

    def deadline_duration(self, isolated_prefill_time: float) -> float:
        return max(self.ttft_slo_floor, self.ttft_slo_scale * isolated_prefill_time)


@dataclass(frozen=True)
class ChunkPolicy:
    max_chunk: int = 4096
    quantum: int = CHUNK_QUANTUM
    static_chunk: int | None = None  # fixed chunk size instead of adaptive
    token_budget: int = 16384
    packer_tolerance: float = 0.10
    ppb_max_requests: int = 8


@dataclass
class BatchPlan:
    decode_request_ids: list[str] = field(default_factory=list)
    prefill_entries: list[tuple[str, int]] = field(default_factory=list)
    token_budget: int = 0
    predicted_step_time: float = 0.0  # pipeline latency seen by co-batched decodes
    stage_time: float = 0.0
    shared_entries: int = 0  # prefill-prefill batched chunks
    work: StepWork | None = field(default=None, repr=False, compare=False)

    @property
    def tokens(self) -> int:
        return len(self.decode_request_ids) + sum(t for _, t in self.prefill_entries)

    def is_empty(self) -> bool:
        return not self.decode_request_ids and not self.prefill_entries


def relative_slack(req: Request, now: float, estimator: PrefillEstimator) -> float:
    if req.phase not in (Phase.WAITING, Phase.PREFILLING):
        raise PhaseError(f"{req.id}: slack undefined in phase {req.phase.value}")
    if not req.deadline_duration > 0:
        raise ValueError("deadline_duration must be positive")
    remaining = estimator.remaining_prefill_time(req)
    return ((req.deadline_ts - now) - remaining) / req.deadline_duration


def absolute_slack(req: Request, now: float, estimator: PrefillEstimator) -> float:
    return req.deadline_ts - now - estimator.remaining_prefill_time(req)


def prioritize(queue: Iterable[Request], policy: Policy | str, now: float,
               estimator: PrefillEstimator) -> list[Request]:
    policy = Policy(policy)
    if policy is Policy.FCFS:
        def key(r):
            return (r.arrival_time, r.arrival_time, r.id)
    elif policy is Policy.EDF:
        def key(r):
            return (r.deadline_ts, r.arrival_time, r.id)
    elif policy is Policy.LRS:
        def key(r):
            return (absolute_slack(r, now, estimator), r.arrival_time, r.id)
    else:
        def key(r):
            return (relative_slack(r, now, estimator), r.arrival_time, r.id)
    return sorted(queue, key=key)


def _chunk_bounds(req: Request, policy: ChunkPolicy, floor: int, cap: int) -> tuple[int, int]:
    hi = min(policy.max_chunk, req.remaining_prefill, cap)
    lo = min(floor, hi)
    return lo, hi


def adapt_chunk_size(req: Request, target_batch_time: float, load: StepWork,
                     predictor: RuntimePredictor, policy: ChunkPolicy = ChunkPolicy(),
                     cap: int | None = None) -> int:
    """Largest quantized chunk that keeps the batch within ``target_batch_time``.

    ``load`` is what the batch already holds.  The result never drops below
    the minimum efficient chunk (or what is left of the prefill) and never
    exceeds ``cap``, which carries token-budget and memory limits.
    """
    if req.remaining_prefill <= 0:
        raise ValueError(f"{req.id} has no prefill left")
    cap = req.remaining_prefill if cap is None else cap
    if cap <= 0:
        return 0
    if policy.static_chunk is not None:
        return min(policy.static_chunk, req.remaining_prefill, cap)
    floor = max(policy.quantum, min_efficient_chunk(predictor.model, predictor.hw, policy.quantum))
    lo, hi = _chunk_bounds(req, policy, floor, cap)

    def fits(c):
        work = StepWork(load.chunks + [req.chunk_work(c)], load.decodes)
        stage = predictor.stage_time(work)
        return predictor.pipeline_latency(stage, work.tokens) <= target_batch_time

    if fits(hi):
        return hi
    q = policy.quantum
    # search multiples of the quantum in [lo, hi)
    a, b = -(-lo // q), (hi - 1) // q  # candidate indices
    best = lo
    while a <= b:
        mid = (a + b) // 2
        c = mid * q
        if c >= lo and fits(c):
            best = c
            a = mid + 1
        else:
            b = mid - 1
    return best


def linear_saturation_tokens(predictor: RuntimePredictor) -> int:
    """Batch size at which linear layers turn compute bound."""
    m = predictor.model
    return math.ceil(predictor.hw.ridge_point * m.bytes_per_element / 2)


def pack_batch(ordered_queue: Sequence[Request], decoding: Sequence[Request],
               slo: SLOSpec, now: float, predictor: RuntimePredictor,
               estimator: PrefillEstimator, policy: ChunkPolicy = ChunkPolicy(),
               room=None) -> BatchPlan:
    """Form the next batch.

    Every eligible decode goes in.  Each KVP rank then gets the
    highest-priority prefill homed on it, sized by :func:`adapt_chunk_size`.
    When the lead chunk is too small to saturate the linear layers, other
    queued prefills share the batch; their token shares grow as their
    relative slack shrinks and together stay under ``max_sharing_fraction`` of
    the token budget.

    ``room(req)`` caps a request's next chunk (KV memory); default unlimited.
    """
    room = room or (lambda r: r.remaining_prefill)
    target = slo.tpot_slo
    limit = target * (1 + policy.packer_tolerance)
    work = StepWork(decodes=[r.decode_work() for r in decoding])
    plan = BatchPlan([r.id for r in decoding], [], policy.token_budget)
    budget = policy.token_budget - len(decoding)
    chosen: set[int] = set()
    homes: set[int] = set()
    lead = None
    multi_rank = predictor.par.p_kvp > 1
    for req in ordered_queue:
        if budget < 1:
            break
        cap = min(budget, room(req))
        if cap <= 0 or req.home_rank in homes:
            continue
        c = adapt_chunk_size(req, target, work, predictor, policy, cap)
        if c <= 0:
            continue
        work.chunks.append(req.chunk_work(c))
        plan.prefill_entries.append((req.id, c))
        chosen.add(id(req))
        homes.add(req.home_rank)
        budget -= c
        if lead is None:
            lead = c
        if not multi_rank:
            break

    if (lead is not None and slo.max_sharing_fraction > 0 and budget > 0
            and lead + len(decoding) < linear_saturation_tokens(predictor)):
        pool = min(int(slo.max_sharing_fraction * policy.token_budget), budget)
        cands = [r for r in ordered_queue if id(r) not in chosen][:policy.ppb_max_requests]
        weights = []
        for r in cands:
            s = relative_slack(r, now, estimator)
            weights.append(min(1.0, max(0.0, 1.0 - s)))
        total_w = sum(weights)
        if cands and total_w == 0:
            weights = [1.0] * len(cands)
            total_w = float(len(cands))
        q = policy.quantum
        for r, w in zip(cands, weights):
            if pool < 1:
                break
            share = int(pool * w / total_w) // q * q
            share = min(share, pool, room(r))
            if r.remaining_prefill <= share or (r.remaining_prefill < q and share > 0):
                share = min(r.remaining_prefill, pool, room(r))
            while share > 0:
                trial = StepWork(work.chunks + [r.chunk_work(share)], work.decodes)
                stage = predictor.stage_time(trial)
                if predictor.pipeline_latency(stage, trial.tokens) <= limit:
                    break
                share = share // 2 // q * q
            if share <= 0:
                continue
            work.chunks.append(r.chunk_work(share))
            plan.prefill_entries.append((r.id, share))
            plan.shared_entries += 1
            pool -= share

    plan.work = work
    stage = predictor.stage_time(work)
    plan.stage_time = stage
    plan.predicted_step_time = predictor.pipeline_latency(stage, work.tokens) if not work.is_empty() else 0.0
    return plan
