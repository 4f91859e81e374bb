"""Iteration-level discrete-event simulation of one serving replica.

Each loop turn issues one micro-batch into the pipeline.  A batch holds every
decode whose previous token has come back plus whatever prefill the packer
picks.  With ``p_spp`` stages several micro-batches are in flight at once:
the next batch can start as soon as the first stage is free, which is what
lets consecutive chunks of one long prompt overlap (sequence pipelining).

Prefill progress is committed when a chunk is issued; the first token exists
only once the request's last chunk leaves the final stage.
"""
from __future__ import annotations

import bisect
import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .balancer import KvpBalancer, NoCapacityError
from .config import ExperimentConfig, PoolSplit
from .costmodel import HardwareProfile, ParallelismConfig, RuntimePredictor, utilization
from .parallel import kv_token_capacity, memory_feasible
from .scheduler import (IsolatedPrefillEstimator, Phase, Policy, Request, pack_batch,
                        prioritize)
from .workload import ContextProbe, Trace, TraceSpec, generate_trace, load_trace

log = logging.getLogger(__name__)


class InfeasibleConfigError(ValueError):
    """The model and the longest request do not fit in device memory."""


@dataclass
class SimClock:
    now: float = 0.0
    step_index: int = 0

    def advance(self, t: float) -> None:
        if t < self.now:
            raise RuntimeError(f"clock moved backwards: {self.now} -> {t}")
        self.now = t


@dataclass
class RequestRecord:
    id: str
    arrival_s: float
    prefill_tokens: int
    decode_tokens: int
    deadline_s: float
    ttft_s: float | None = None
    tpot_s: list[float] = field(default_factory=list)
    finished: bool = False
    pool: str = ""
    kvp_ranks: tuple[int, ...] = ()  # ranks that held the request's KV cache

    @property
    def censored(self) -> bool:
        return not self.finished

    def ttft_or_bound(self, horizon: float) -> float:
        """TTFT, or the time waited so far for requests cut off by the horizon."""
        if self.ttft_s is not None:
            return self.ttft_s
        return max(0.0, horizon - self.arrival_s)

    def to_dict(self) -> dict:
        return {"id": self.id, "arrival_s": self.arrival_s,
                "prefill_tokens": self.prefill_tokens, "decode_tokens": self.decode_tokens,
                "deadline_s": self.deadline_s, "ttft_s": self.ttft_s, "tpot_s": self.tpot_s,
                "finished": self.finished, "pool": self.pool,
                "kvp_ranks": list(self.kvp_ranks)}


@dataclass(frozen=True)
class StepRecord:
    index: int
    issue: float
    done: float
    stage_time: float
    decodes: tuple[str, ...]
    prefill: tuple[tuple[str, int], ...]
    pool: str = ""

    def to_dict(self) -> dict:
        return {"i": self.index, "issue": self.issue, "done": self.done,
                "stage": self.stage_time, "decodes": list(self.decodes),
                "prefill": [list(p) for p in self.prefill], "pool": self.pool}


COUNTERS = ("slo_violations", "preemptions", "batch_overruns", "deferred_growth",
            "admission_waits", "stalled")


@dataclass
class SimMetrics:
    records: list[RequestRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=lambda: dict.fromkeys(COUNTERS, 0))
    executed_flops: float = 0.0
    moved_bytes: float = 0.0
    end_time: float = 0.0  # clock at the last processed event
    horizon: float | None = None
    devices: int = 1
    hardware: HardwareProfile | None = field(default=None, repr=False)
    busy_time: float = 0.0  # first issue to last completion

    @property
    def num_requests(self) -> int:
        return len(self.records)

    @property
    def num_finished(self) -> int:
        return sum(r.finished for r in self.records)

    @property
    def slo_violations(self) -> int:
        return self.counters["slo_violations"]

    @property
    def preemptions(self) -> int:
        return self.counters["preemptions"]

    def cutoff(self) -> float:
        return self.horizon if self.horizon is not None else self.end_time

    def ttfts(self, censored_bound: bool = True) -> list[float]:
        """TTFT per request; cut-off requests contribute their wait so far."""
        out = []
        for r in self.records:
            if r.ttft_s is not None:
                out.append(r.ttft_s)
            elif censored_bound:
                out.append(r.ttft_or_bound(self.cutoff()))
        return out

    def tpots(self) -> list[float]:
        return [t for r in self.records for t in r.tpot_s]

    def utilization(self) -> tuple[float, float]:
        """(MFU, MBU) over the busy period."""
        if self.busy_time <= 0 or self.hardware is None or self.devices < 1:
            return 0.0, 0.0
        u = utilization(self.executed_flops, self.moved_bytes, self.busy_time,
                        self.devices, self.hardware)
        return u.mfu, u.mbu

    def to_dict(self, steps: bool = True) -> dict[str, Any]:
        mfu, mbu = self.utilization()
        out = {
            "requests": [r.to_dict() for r in self.records],
            "counters": dict(self.counters),
            "executed_flops": self.executed_flops,
            "moved_bytes": self.moved_bytes,
            "end_time": self.end_time,
            "busy_time": self.busy_time,
            "horizon": self.horizon,
            "devices": self.devices,
            "mfu": mfu,
            "mbu": mbu,
            "num_requests": self.num_requests,
            "num_finished": self.num_finished,
        }
        if steps:
            out["steps"] = [s.to_dict() for s in self.steps]
        return out

    def to_json(self, steps: bool = True) -> str:
        return json.dumps(self.to_dict(steps), sort_keys=True)


def resolve_trace(cfg: ExperimentConfig) -> Trace:
    src = cfg.trace
    if src is None:
        return Trace()
    if isinstance(src, TraceSpec):
        return generate_trace(src)
    if isinstance(src, ContextProbe):
        return src.trace()
    path = Path(src)
    if not path.is_absolute():
        path = Path(cfg.base_dir) / path
    return load_trace(path)


def check_feasible(cfg: ExperimentConfig, trace: Trace,
                   par: ParallelismConfig | None = None) -> None:
    par = par or cfg.parallelism
    par.check(cfg.model)
    longest = max((e.prefill_tokens for e in trace), default=0)
    mem = memory_feasible(longest, cfg.model, cfg.hardware, par,
                          activation_reserve=cfg.activation_reserve)
    if not mem:
        raise InfeasibleConfigError(
            f"{cfg.model.name or 'model'} with a {longest}-token request does not fit "
            f"at tp={par.p_tp} spp={par.p_spp} kvp={par.p_kvp} "
            f"(short by {-mem.headroom / 1e9:.1f} GB per device)")


class _Replica:
    """Mutable state of one simulation; see :func:`run`."""

    def __init__(self, trace: Trace, cfg: ExperimentConfig, pool: str = ""):
        self.cfg = cfg
        self.pool = pool
        par = cfg.parallelism
        self.pred = RuntimePredictor(cfg.model, cfg.hardware, par, cfg.load_profile())
        self.est = IsolatedPrefillEstimator(self.pred, cfg.reference_chunk)
        cap = kv_token_capacity(cfg.model, cfg.hardware, par,
                                activation_reserve=cfg.activation_reserve)
        self.bal = KvpBalancer.uniform(par.p_kvp, cap, cfg.max_long_per_rank,
                                       cfg.worker_token_limit)
        self.total_capacity = cap * par.p_kvp
        self.reserved = 0  # admitted prefill tokens not yet placed
        self.trace = trace
        self.next_arrival = 0
        self.backlog: list[Request] = []  # arrived, waiting for KV memory
        self.waited: set[str] = set()
        self.queue: list[Request] = []  # admitted, prefill not fully issued
        self.decoding: list[Request] = []
        self.reqs: dict[str, Request] = {}
        self.completed_prefill: dict[str, int] = {}
        self.inflight: list = []  # heap of (done, index, plan entries)
        self.clock = SimClock()
        self.stage_free: list[float] = [0.0] * par.p_spp
        self.last_done = 0.0
        self.last_event = 0.0
        self.first_issue: float | None = None
        self.m = SimMetrics(horizon=cfg.horizon, devices=par.devices, hardware=cfg.hardware)
        self.static_order = cfg.policy in (Policy.FCFS, Policy.EDF)

    # -- arrivals and admission

    def _sort_key(self, r: Request):
        if self.cfg.policy is Policy.EDF:
            return (r.deadline_ts, r.arrival_time, r.id)
        return (r.arrival_time, r.arrival_time, r.id)

    def _arrive(self, t: float) -> None:
        entries = self.trace.entries
        while self.next_arrival < len(entries) and entries[self.next_arrival].arrival_s <= t:
            e = entries[self.next_arrival]
            self.next_arrival += 1
            iso = self.est.prefill_time(e.prefill_tokens)
            req = Request(e.id, e.arrival_s, e.prefill_tokens, e.decode_tokens,
                          self.cfg.slo.deadline_duration(iso))
            self.reqs[req.id] = req
            self.backlog.append(req)

    def _admit(self) -> None:
        if not self.backlog:
            return
        refreshed = False
        keep = []
        for req in self.backlog:
            free = self.total_capacity - sum(r.resident_kv_tokens for r in self.bal.ranks)
            if req.prefill_tokens > free - self.reserved:
                keep.append(req)
                continue
            if not refreshed:
                self.bal.refresh_pending(self.queue, self.est.remaining_prefill_time)
                refreshed = True
            try:
                rank = self.bal.admit(req)
            except NoCapacityError:
                keep.append(req)
                continue
            self.bal.ranks[rank].pending_prefill_time += self.est.remaining_prefill_time(req)
            self.reserved += req.prefill_tokens
            if self.static_order:
                bisect.insort(self.queue, req, key=self._sort_key)
            else:
                self.queue.append(req)
        for r in keep:
            self.waited.add(r.id)
        self.m.counters["admission_waits"] = len(self.waited)
        self.backlog = keep

    # -- completions

    def _complete(self, upto: float) -> None:
        while self.inflight and self.inflight[0][0] <= upto:
            done, _, decodes, prefill = heapq.heappop(self.inflight)
            self.last_event = max(self.last_event, done)
            for rid in decodes:
                req = self.reqs[rid]
                req.in_flight = False
                req.decode_ts.append(done)
                req.tokens_emitted += 1
                if req.tokens_emitted >= req.decode_tokens:
                    self._finish(req)
            for rid, tokens in prefill:
                req = self.reqs[rid]
                got = self.completed_prefill.get(rid, 0) + tokens
                self.completed_prefill[rid] = got
                if got == req.prefill_tokens:
                    req.first_token_ts = done
                    req.tokens_emitted = 1
                    req.transition(Phase.DECODING)
                    if req.decode_tokens <= 1:
                        self._finish(req)
                    else:
                        self.decoding.append(req)

    def _finish(self, req: Request) -> None:
        req.transition(Phase.FINISHED)
        self.bal.release(req)
        if req in self.decoding:
            self.decoding.remove(req)

    # -- issuing

    def _room(self, req: Request) -> int:
        self.bal.grow_if_needed(req)
        return self.bal.room(req)

    def _ordered(self, now: float) -> list[Request]:
        if self.static_order:
            return self.queue
        return prioritize(self.queue, self.cfg.policy, now, self.est)

    def _issue(self, now: float) -> bool:
        eligible = [r for r in self.decoding if not r.in_flight]
        if not self.queue and not eligible:
            return False
        plan = pack_batch(self._ordered(now), eligible, self.cfg.slo, now, self.pred,
                          self.est, self.cfg.chunking, room=self._room)
        if plan.is_empty():
            return False
        cost = self.pred.step_cost(plan.work)
        stage = cost.stage_time
        comm = self.pred.pp_comm_time(plan.tokens)
        p = self.cfg.parallelism.p_spp
        if self.cfg.exact_pipeline:
            ready = now
            for k in range(p):
                start = max(self.stage_free[k], ready)
                self.stage_free[k] = start + stage
                ready = start + stage + comm
            done = self.stage_free[-1]
            next_issue = self.stage_free[0]
        else:
            done = max(now + p * stage + (p - 1) * comm, self.last_done + stage)
            next_issue = now + stage
        self.last_done = max(self.last_done, done)
        if self.first_issue is None:
            self.first_issue = now
        if plan.predicted_step_time > self.cfg.slo.tpot_slo * (1 + self.cfg.chunking.packer_tolerance):
            self.m.counters["batch_overruns"] += 1

        chosen = set()
        for rid, tokens in plan.prefill_entries:
            req = self.reqs[rid]
            chosen.add(rid)
            req.transition(Phase.PREFILLING)
            self.bal.place(req, tokens)
            self.reserved -= tokens
            req.prefill_done_tokens += tokens
        for req in self.queue:
            if req.phase is Phase.PREFILLING and req.id not in chosen:
                req.transition(Phase.WAITING)
                self.m.counters["preemptions"] += 1
        if any(self.reqs[rid].remaining_prefill == 0 for rid, _ in plan.prefill_entries):
            self.queue = [r for r in self.queue if r.remaining_prefill > 0]
        for r in eligible:
            r.in_flight = True

        idx = self.clock.step_index
        self.clock.step_index += 1
        decodes = tuple(plan.decode_request_ids)
        prefill = tuple(plan.prefill_entries)
        heapq.heappush(self.inflight, (done, idx, decodes, prefill))
        self.m.steps.append(StepRecord(idx, now, done, stage, decodes, prefill, self.pool))
        self.m.executed_flops += cost.flops
        self.m.moved_bytes += cost.bytes
        self.next_issue = next_issue
        return True

    # -- main loop

    def run(self) -> SimMetrics:
        horizon = self.cfg.horizon if self.cfg.horizon is not None else math.inf
        entries = self.trace.entries
        t = 0.0
        self.next_issue = 0.0
        while t <= horizon:
            self.clock.advance(t)
            self._complete(t)
            self._arrive(t)
            self._admit()
            if self._issue(t):
                t = max(t, self.next_issue)
                continue
            # idle: jump to the next arrival or completion
            cands = []
            if self.next_arrival < len(entries):
                cands.append(entries[self.next_arrival].arrival_s)
            if self.inflight:
                cands.append(self.inflight[0][0])
            if not cands:
                if self.queue or self.backlog:
                    self.m.counters["stalled"] = len(self.queue) + len(self.backlog)
                    log.warning("%d requests stalled on KV memory", self.m.counters["stalled"])
                break
            t = max(t, min(cands))
        if math.isfinite(horizon):
            self._complete(horizon)
            if self.next_arrival < len(entries):
                self._arrive(horizon)
        log.debug("simulated %d steps, clock %.3f s", self.clock.step_index, self.clock.now)
        return self._metrics()

    def _metrics(self) -> SimMetrics:
        m = self.m
        m.end_time = max(self.clock.now, self.last_event)
        m.counters["deferred_growth"] = self.bal.deferred_growth
        if self.first_issue is not None:
            end = self.last_done if m.horizon is None else min(self.last_done, m.horizon)
            m.busy_time = max(0.0, end - self.first_issue)
        # requests that never arrived before the horizon are left out
        for req in sorted(self.reqs.values(), key=lambda r: (r.arrival_time, r.id)):
            rec = RequestRecord(req.id, req.arrival_time, req.prefill_tokens, req.decode_tokens,
                                req.deadline_duration, pool=self.pool,
                                kvp_ranks=tuple(req.assigned_kvp_ranks))
            if req.first_token_ts is not None:
                rec.ttft_s = req.first_token_ts - req.arrival_time
                times = [req.first_token_ts] + req.decode_ts
                rec.tpot_s = [b - a for a, b in zip(times, times[1:])]
            rec.finished = req.phase is Phase.FINISHED
            if rec.ttft_s is None or rec.ttft_s > req.deadline_duration:
                m.counters["slo_violations"] += 1
            m.records.append(rec)
        return m


def run(trace: Trace, cfg: ExperimentConfig) -> SimMetrics:
    """Simulate ``trace`` on the replica described by ``cfg``.

    Deterministic: the same inputs give a bit-identical :meth:`SimMetrics.to_json`.
    """
    check_feasible(cfg, trace)
    return _Replica(trace, cfg).run()


def _starved(trace: Trace, cfg: ExperimentConfig, pool: str) -> SimMetrics:
    """Metrics for requests routed to a pool with no devices."""
    m = SimMetrics(horizon=cfg.horizon, devices=0)
    # deadlines as the unified replica would have set them
    est = IsolatedPrefillEstimator(RuntimePredictor(cfg.model, cfg.hardware, cfg.parallelism),
                                   cfg.reference_chunk)
    for e in trace:
        deadline = cfg.slo.deadline_duration(est.prefill_time(e.prefill_tokens))
        m.records.append(RequestRecord(e.id, e.arrival_s, e.prefill_tokens, e.decode_tokens,
                                       deadline, pool=pool))
    m.counters["slo_violations"] = len(m.records)
    return m


def merge_metrics(parts: list[SimMetrics], horizon: float | None) -> SimMetrics:
    out = SimMetrics(horizon=horizon)
    out.devices = sum(p.devices for p in parts)
    for p in parts:
        out.records.extend(p.records)
        out.steps.extend(p.steps)
        for k, v in p.counters.items():
            out.counters[k] = out.counters.get(k, 0) + v
        out.executed_flops += p.executed_flops
        out.moved_bytes += p.moved_bytes
        out.end_time = max(out.end_time, p.end_time)
        out.busy_time = max(out.busy_time, p.busy_time)
        if p.devices:
            out.hardware = p.hardware
    out.records.sort(key=lambda r: (r.arrival_s, r.id))
    return out


def run_baseline_pools(trace: Trace, cfg: ExperimentConfig,
                       pools: PoolSplit | None = None) -> SimMetrics:
    """Static split: prompts up to the threshold run on a reserved short pool,
    the rest on the long pool.  The two pools never share devices."""
    pools = pools or cfg.pools
    if pools is None:
        raise ValueError("no pool split given")
    short = Trace([e for e in trace if e.prefill_tokens <= pools.threshold_tokens])
    long = Trace([e for e in trace if e.prefill_tokens > pools.threshold_tokens])
    parts = []
    for name, sub, par in (("short", short, pools.short), ("long", long, pools.long)):
        if par is None:
            parts.append(_starved(sub, cfg, name))
            continue
        pcfg = replace(cfg, parallelism=par, pools=None)
        check_feasible(pcfg, sub)
        parts.append(_Replica(sub, pcfg, name).run())
    return merge_metrics(parts, cfg.horizon)


def run_experiment(cfg: ExperimentConfig, trace: Trace | None = None) -> SimMetrics:
    trace = resolve_trace(cfg) if trace is None else trace
    if cfg.pools is not None:
        return run_baseline_pools(trace, cfg)
    return run(trace, cfg)


# -- post-hoc audits -----------------------------------------------------------

@dataclass
class AuditReport:
    decode_preemptions: int = 0
    work_conservation_errors: int = 0
    clock_errors: int = 0
    details: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.decode_preemptions or self.work_conservation_errors or self.clock_errors)


def audit(m: SimMetrics) -> AuditReport:
    """Check decode non-preemption, work conservation and clock sanity from the
    step log alone."""
    rep = AuditReport()
    by_pool: dict[str, list[StepRecord]] = {}
    for s in m.steps:
        by_pool.setdefault(s.pool, []).append(s)
    issues = {k: [s.issue for s in v] for k, v in by_pool.items()}
    decode_steps: dict[str, list[StepRecord]] = {}
    prefill_sum: dict[str, int] = {}
    for s in m.steps:
        for rid in s.decodes:
            decode_steps.setdefault(rid, []).append(s)
        for rid, tok in s.prefill:
            prefill_sum[rid] = prefill_sum.get(rid, 0) + tok
    for r in m.records:
        if r.ttft_s is not None and r.ttft_s < 0:
            rep.clock_errors += 1
            rep.details.append(f"{r.id}: negative ttft")
        if any(t <= 0 for t in r.tpot_s):
            rep.clock_errors += 1
            rep.details.append(f"{r.id}: nonpositive tpot")
        if r.finished and prefill_sum.get(r.id, 0) != r.prefill_tokens:
            rep.work_conservation_errors += 1
            rep.details.append(f"{r.id}: {prefill_sum.get(r.id, 0)} of {r.prefill_tokens} "
                               "prefill tokens processed")
        if r.finished and len(r.tpot_s) != r.decode_tokens - 1:
            rep.work_conservation_errors += 1
            rep.details.append(f"{r.id}: {len(r.tpot_s)} tpot samples")
        if r.ttft_s is None:
            continue
        # after each token, the very next issued step must carry the request;
        # arrival + ttft may be off by round-off from the true completion time
        ready = r.arrival_s + r.ttft_s - 1e-9 * max(1.0, r.arrival_s + r.ttft_s)
        steps = decode_steps.get(r.id, [])
        pool_issues = issues.get(r.pool, [])
        for s in steps:
            k = bisect.bisect_left(pool_issues, ready)
            if k >= len(pool_issues) or pool_issues[k] != s.issue:
                rep.decode_preemptions += 1
                rep.details.append(f"{r.id}: decode skipped at t={ready}")
                break
            ready = s.done
        else:
            owed = r.decode_tokens - 1 - len(steps)
            if owed > 0:
                k = bisect.bisect_left(pool_issues, ready)
                if k < len(pool_issues):
                    rep.decode_preemptions += 1
                    rep.details.append(f"{r.id}: left out after t={ready}")
    return rep
