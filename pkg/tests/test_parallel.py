from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctxserve.costmodel import ModelConfig, ParallelismConfig, RuntimePredictor
from ctxserve.parallel import (build_spp_schedule, kv_token_capacity, kvp_chunk_time,
                               kvp_decode_time, memory_feasible, spp_prefill_time,
                               spp_schedule_makespan)

from spp_oracle import all_tables, enumerate_orders, tick_makespans


def test_degenerate_pipeline():
    assert spp_prefill_time(1000, 100, 2.0, 0.0, 1) == 20.0
    assert spp_schedule_makespan(1000, 100, 2.0, 0.0, 1) == 20.0


def test_three_chunks_two_stages():
    sched = build_spp_schedule([[1, 1]] * 3)
    assert sched.makespan == 4
    sched.validate()


def test_eq4_example():
    # T_p = 100 s over 1000 chunks, 4 stages, 1 ms per chunk send
    assert spp_prefill_time(1000 * 64, 64, 0.1, 1e-3, 4) == pytest.approx(26.0)


def test_single_chunk_is_sum_plus_comm():
    sched = build_spp_schedule([[1.0, 2.5, 0.5]], comm=0.25)
    assert sched.makespan == pytest.approx(4.0 + 2 * 0.25)


def test_schedule_errors():
    with pytest.raises(ValueError):
        build_spp_schedule([])
    with pytest.raises(ValueError):
        build_spp_schedule([[1, 2], [1]])
    with pytest.raises(ValueError):
        build_spp_schedule([[1, -1]])


@pytest.mark.parametrize("n,k", [(1, 1), (2, 2), (2, 3), (3, 2), (3, 3)])
def test_matches_every_dispatch_order(n, k):
    for tab in all_tables(n, k).tolist()[:: max(1, 3 ** (n * k) // 200)]:
        for comm in (0, 1):
            orders = enumerate_orders(tab, comm)
            assert orders == {build_spp_schedule(tab, comm).makespan}


@pytest.mark.parametrize("n,k", [(2, 2), (3, 3), (4, 2)])
def test_matches_tick_simulation(n, k):
    tabs = all_tables(n, k)
    for comm in (0, 1):
        ref = tick_makespans(tabs, comm)
        got = [build_spp_schedule(t, comm).makespan for t in tabs.tolist()]
        assert np.array_equal(np.array(got), ref)


@given(st.lists(st.lists(st.integers(1, 5), min_size=3, max_size=3), min_size=1, max_size=5),
       st.integers(0, 4), st.integers(0, 2), st.integers(0, 4))
def test_makespan_monotone_in_stage_time(tab, i, s, extra):
    i %= len(tab)
    base = build_spp_schedule(tab, 0.5)
    base.validate()
    bumped = [row[:] for row in tab]
    bumped[i][s] += extra
    assert build_spp_schedule(bumped, 0.5).makespan >= base.makespan


@given(st.integers(1, 200_000), st.integers(1, 4096), st.floats(1e-4, 1.0),
       st.floats(0, 1e-2), st.integers(1, 16))
def test_closed_form_within_one_stage_plus_comm(n, c, t, comm, p):
    if c > n:
        c = n
    chunks = -(-n // c)
    exact = spp_schedule_makespan(n, c, t, comm, p)
    closed = spp_prefill_time(n, c, t, comm, p)
    # one unpipelined chunk time plus the comm on the schedule's critical path
    # (a short prompt still needs p - 1 hops to fill the pipeline)
    assert abs(exact - closed) <= t + comm * max(chunks, p - 1) + 1e-9 * max(exact, 1)


def test_comm_gap_shrinks_with_length():
    def gap(n):
        closed = spp_prefill_time(n, 256, lambda i: 1e-3 * (1 + i * 1e-3), 1e-4, 4)
        pure = sum(1e-3 * (1 + i * 1e-3) for i in range(1, -(-n // 256) + 1)) / 4
        return (closed - pure) / pure
    assert gap(10 * 50_000) < gap(50_000)


def test_kvp_decode_examples():
    assert kvp_decode_time(3.0, 10.0, 1) == 10.0
    assert kvp_decode_time(8e-3, 10e-3, 2, 0.5e-3) == pytest.approx(6.5e-3)
    with pytest.raises(ValueError):
        kvp_decode_time(11.0, 10.0, 2)
    with pytest.raises(ValueError):
        kvp_decode_time(1.0, 10.0, 0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1e-3), st.integers(1, 63))
def test_kvp_nonincreasing_with_amdahl_floor(a, b, comm, p):
    attn, total = min(a, b), max(a, b)
    assert kvp_decode_time(attn, total, p + 1, comm) <= kvp_decode_time(attn, total, p, comm)
    assert kvp_decode_time(attn, total, 10**9, comm) == pytest.approx(total - attn + comm, abs=2e-9)


def test_kvp_chunk_speedup_grows_with_index(llama8b, h100):
    pred = RuntimePredictor(llama8b, h100, ParallelismConfig(8, 1, 1))
    c = 512
    speedups = []
    for i in (1, 10, 100, 1000):
        attn = pred.attention_time(c, i * c)
        total = attn + pred.linear_time(c) + pred.tp_comm_time(c)
        assert kvp_chunk_time(i, c, attn, total, 1) == total
        speedups.append(total / kvp_chunk_time(i, c, attn, total, 4))
    assert speedups == sorted(speedups) and speedups[0] < speedups[-1]
    with pytest.raises(ValueError):
        kvp_chunk_time(0, c, 1.0, 2.0, 2)


def test_memory_examples(llama70b, h100):
    # 8 devices per stage; weights + reserve alone fit at zero context
    par = ParallelismConfig(8, 4, 1)
    zero = memory_feasible(0, llama70b, h100, par)
    assert zero.feasible
    assert zero.headroom == pytest.approx(h100.mem_capacity - llama70b.weight_bytes / 32 - 4e9)
    assert not memory_feasible(10_000_000, llama70b, h100, par)
    assert memory_feasible(10_000_000, llama70b, h100, ParallelismConfig(8, 8, 1))


@given(st.integers(0, 20_000_000), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4]),
       st.sampled_from([1, 2, 4, 8]))
def test_memory_monotone_in_kvp(n, tp, spp, kvp):
    from ctxserve.costmodel import get_hardware, get_model
    m, hw = get_model("llama3-70b"), get_hardware("h100")
    more = memory_feasible(n, m, hw, ParallelismConfig(tp, spp, kvp * 2))
    fewer = memory_feasible(n, m, hw, ParallelismConfig(tp, spp, kvp))
    assert more.headroom >= fewer.headroom
    if fewer:
        assert more


def test_kv_token_capacity_consistent(llama8b, h100):
    par = ParallelismConfig(8, 2, 1)
    cap = kv_token_capacity(llama8b, h100, par)
    assert memory_feasible(cap, llama8b, h100, par)
    assert not memory_feasible(cap + 1000, llama8b, h100, par)
    tiny = ModelConfig(1, 1, 1, 1, 2, 1e12, param_count=1e12)
    assert kv_token_capacity(tiny, h100, ParallelismConfig()) == 0
