from __future__ import annotations

from dataclasses import replace

import pytest

from ctxserve.config import ExperimentConfig, PoolSplit
from ctxserve.costmodel import (ChunkWork, DecodeWork, ParallelismConfig, RuntimePredictor,
                                StepWork, get_hardware, get_model)
from ctxserve.scheduler import ChunkPolicy, Policy
from ctxserve.simulator import (InfeasibleConfigError, SimClock, audit, run,
                                run_baseline_pools, run_experiment)
from ctxserve.workload import Trace, TraceEntry, TraceSpec, generate_trace


def _cfg(**kw):
    base = dict(model=get_model("llama3-8b"), hardware=get_hardware("a100"),
                parallelism=ParallelismConfig(8, 1, 1))
    base.update(kw)
    return ExperimentConfig(**base)


def _trace(*rows):
    return Trace([TraceEntry(a, p, d, rid) for rid, a, p, d in rows])


def test_clock_refuses_to_go_back():
    c = SimClock()
    c.advance(1.0)
    with pytest.raises(RuntimeError):
        c.advance(0.5)


def test_empty_trace():
    m = run(Trace(), _cfg())
    assert m.num_requests == 0 and m.steps == [] and m.ttfts() == []
    assert m.utilization() == (0.0, 0.0)
    assert audit(m).ok


def test_single_request_by_hand():
    cfg = _cfg()
    m = run(_trace(("a", 0.0, 64, 3)), cfg)
    pred = RuntimePredictor(cfg.model, cfg.hardware, cfg.parallelism)
    prefill = pred.stage_time(StepWork(chunks=[ChunkWork(0, 64)]))
    decode = pred.stage_time(StepWork(decodes=[DecodeWork(64, 0, ((0, 64),))]))
    (rec,) = m.records
    assert rec.finished and rec.ttft_s == pytest.approx(prefill, rel=1e-12)
    assert rec.tpot_s == pytest.approx([decode, decode], rel=1e-12)
    assert len(m.steps) == 3


def test_one_token_request_finishes_at_first_token():
    m = run(_trace(("a", 1.0, 100, 1)), _cfg())
    (rec,) = m.records
    assert rec.finished and rec.tpot_s == [] and rec.ttft_s > 0


def _hol_trace():
    return _trace(("L", 0.0, 500_000, 4), ("S1", 5.0, 2000, 4), ("S2", 5.1, 2000, 4))


def test_fcfs_vs_ilrs_micro_trace():
    cfg = _cfg()
    pred = RuntimePredictor(cfg.model, cfg.hardware, cfg.parallelism)
    alone = pred.isolated_prefill_time(500_000)
    fcfs = {r.id: r for r in run(_hol_trace(), replace(cfg, policy=Policy.FCFS)).records}
    ilrs = {r.id: r for r in run(_hol_trace(), replace(cfg, policy=Policy.ILRS)).records}

    def first_tokens(recs):
        return sorted(recs, key=lambda k: recs[k].arrival_s + recs[k].ttft_s)

    # FCFS: both shorts wait behind the whole long prompt
    assert first_tokens(fcfs) == ["L", "S1", "S2"]
    assert fcfs["S1"].ttft_s > alone - 5.0
    # ILRS: the shorts jump in, the long prompt pays a little
    assert first_tokens(ilrs) == ["S1", "S2", "L"]
    assert ilrs["S1"].ttft_s < ilrs["S1"].deadline_s
    assert ilrs["S2"].ttft_s < ilrs["S2"].deadline_s
    assert fcfs["L"].ttft_s <= ilrs["L"].ttft_s < fcfs["L"].ttft_s * 1.05
    assert audit(run(_hol_trace(), cfg)).ok


def _mixed(seed=1, qps=4.0, duration=40.0):
    return generate_trace(TraceSpec(qps=qps, duration=duration, long_fraction=0.05, seed=seed))


def test_deterministic_json():
    cfg = _cfg(horizon=80.0)
    t = _mixed()
    assert run(t, cfg).to_json() == run(t, cfg).to_json()


@pytest.mark.parametrize("policy", list(Policy))
def test_audits_pass(policy):
    m = run(_mixed(seed=3), _cfg(policy=policy, horizon=100.0))
    rep = audit(m)
    assert rep.ok, rep.details[:5]
    assert m.num_finished > 0


def test_audit_catches_tampering():
    m = run(_trace(("a", 0.0, 64, 4)), _cfg())
    m.records[0].tpot_s.append(0.01)
    assert audit(m).work_conservation_errors == 1
    m = run(_trace(("a", 0.0, 64, 4), ("b", 0.0, 64, 4)), _cfg())
    # drop one decode from the step log: the request now looks skipped
    s = m.steps[-1]
    m.steps[-1] = replace(s, decodes=s.decodes[:-1])
    assert not audit(m).ok


def test_censored_requests_count_as_violations():
    cfg = _cfg(horizon=2.0)
    m = run(_trace(("big", 0.0, 500_000, 2), ("late", 1.5, 100, 2)), cfg)
    big = next(r for r in m.records if r.id == "big")
    assert big.ttft_s is None and not big.finished
    assert m.slo_violations >= 1
    assert 2.0 in m.ttfts()  # the lower bound for the cut-off request


def test_horizon_drops_future_arrivals():
    m = run(_trace(("a", 0.0, 64, 2), ("b", 50.0, 64, 2)), _cfg(horizon=10.0))
    assert [r.id for r in m.records] == ["a"]


def test_exact_pipeline_matches_folded_for_single_request():
    cfg = _cfg(hardware=get_hardware("h100"), parallelism=ParallelismConfig(8, 4, 1),
               chunking=ChunkPolicy(static_chunk=4096))
    t = _trace(("a", 0.0, 200_000, 3))
    folded = run(t, cfg).records[0]
    exact = run(t, replace(cfg, exact_pipeline=True)).records[0]
    assert exact.ttft_s == pytest.approx(folded.ttft_s, rel=1e-3)
    assert exact.tpot_s == pytest.approx(folded.tpot_s, rel=1e-9)


def test_exact_pipeline_on_mixed_load():
    cfg = _cfg(parallelism=ParallelismConfig(8, 2, 1), horizon=60.0)
    t = _mixed(seed=2, duration=30.0)
    a, b = run(t, cfg), run(t, replace(cfg, exact_pipeline=True))
    assert audit(b).ok
    assert b.num_finished > 0 and abs(a.num_finished - b.num_finished) <= max(3, a.num_finished // 10)


def test_ten_million_tokens_end_on_four_ranks():
    cfg = _cfg(hardware=get_hardware("h100"), parallelism=ParallelismConfig(8, 4, 4),
               worker_token_limit=2_500_000, chunking=ChunkPolicy(static_chunk=4096))
    m = run(_trace(("big", 0.0, 10_000_000, 2)), cfg)
    (rec,) = m.records
    assert rec.finished
    assert sorted(rec.kvp_ranks) == [0, 1, 2, 3]
    assert audit(m).ok


def test_infeasible_config_raises():
    cfg = _cfg(model=get_model("llama3-70b"), parallelism=ParallelismConfig(8, 1, 1))
    with pytest.raises(InfeasibleConfigError):
        run(_trace(("big", 0.0, 10_000_000, 2)), cfg)


def test_starved_pool():
    cfg = _cfg(horizon=60.0)
    t = _mixed(duration=20.0)
    pools = PoolSplit(8192, None, ParallelismConfig(8, 1, 1))
    m = run_baseline_pools(t, cfg, pools)
    shorts = [r for r in m.records if r.pool == "short"]
    assert shorts and all(r.ttft_s is None for r in shorts)
    longs = [e for e in t if e.prefill_tokens > 8192]
    assert m.slo_violations >= len(shorts)
    assert len(m.records) == len(t) and len([r for r in m.records if r.pool == "long"]) == len(longs)


def test_threshold_above_everything_is_one_pool():
    cfg = _cfg(horizon=60.0)
    t = _mixed(duration=20.0)
    pools = PoolSplit(10**9, ParallelismConfig(8, 1, 1), None)
    split = run_baseline_pools(t, cfg, pools)
    whole = run(t, cfg)
    assert [(r.id, r.ttft_s, r.tpot_s) for r in split.records] == \
        [(r.id, r.ttft_s, r.tpot_s) for r in whole.records]


def test_run_experiment_dispatches_to_pools():
    cfg = _cfg(horizon=30.0, trace=TraceSpec(qps=2, duration=10, seed=1),
               pools=PoolSplit(8192, ParallelismConfig(4, 1, 1), ParallelismConfig(4, 1, 1)))
    m = run_experiment(cfg)
    assert m.devices == 8 and {r.pool for r in m.records} <= {"short", "long"}
