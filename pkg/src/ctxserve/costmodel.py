"""Analytical resource model and roofline runtime predictor.

Everything here is a pure function of its inputs.  Token counts are plain
ints, times are seconds, rates are per-device.

The predictor charges each operator class separately (attention, linear
layers, tensor-parallel collectives) with a roofline
``max(flops / effective_peak, bytes / effective_bandwidth)`` and sums the
classes; a batch step costs one pipeline stage's share of layers plus a fixed
launch overhead.  Because attention intensity depends only on chunk size, the
time of a fixed-chunk prefill has a closed form, which the scheduler leans on
for slack estimates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

CHUNK_QUANTUM = 32


class InfeasibleParallelismError(ValueError):
    """Parallelism degrees that cannot be laid out on the model."""


@dataclass(frozen=True)
class ModelConfig:
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    num_layers: int
    bytes_per_element: float
    mlp_flops_per_token: float  # per layer, all non-attention linear work
    param_count: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        if self.num_kv_heads < 1 or self.num_query_heads < self.num_kv_heads:
            raise ValueError("need num_query_heads >= num_kv_heads >= 1")
        if self.num_query_heads % self.num_kv_heads:
            raise ValueError("query heads must be a multiple of kv heads")
        for attr in ("head_dim", "num_layers", "bytes_per_element", "mlp_flops_per_token"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{attr} must be positive")

    @property
    def hidden_size(self) -> int:
        return self.head_dim * self.num_query_heads

    @property
    def gqa_ratio(self) -> float:
        return self.num_query_heads / self.num_kv_heads

    @property
    def linear_weight_bytes_per_layer(self) -> float:
        # two FLOPs (multiply + add) per weight per token
        return self.mlp_flops_per_token / 2 * self.bytes_per_element

    @property
    def weight_bytes(self) -> float:
        if self.param_count > 0:
            return self.param_count * self.bytes_per_element
        return self.linear_weight_bytes_per_layer * self.num_layers

    @property
    def kv_bytes_per_token(self) -> float:
        return kv_cache_bytes(1, self)


@dataclass(frozen=True)
class LinkModel:
    """Latency plus bandwidth transfer cost for one device's link."""

    latency: float
    bandwidth: float

    def __call__(self, nbytes: float) -> float:
        if nbytes <= 0:
            return 0.0
        return self.latency + nbytes / self.bandwidth


@dataclass(frozen=True)
class HardwareProfile:
    peak_flops: float
    mem_bandwidth: float
    mem_capacity: float
    intra_server_link: LinkModel = LinkModel(5e-6, 300e9)
    cross_server_link: LinkModel = LinkModel(10e-6, 25e9)
    fixed_step_overhead: float = 0.0
    devices_per_server: int = 8
    compute_efficiency: float = 1.0
    bandwidth_efficiency: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        for attr in ("peak_flops", "mem_bandwidth", "mem_capacity", "devices_per_server"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{attr} must be positive")
        if self.fixed_step_overhead < 0:
            raise ValueError("fixed_step_overhead must be >= 0")
        for attr in ("compute_efficiency", "bandwidth_efficiency"):
            if not 0 < getattr(self, attr) <= 1:
                raise ValueError(f"{attr} must be in (0, 1]")

    @property
    def effective_flops(self) -> float:
        return self.peak_flops * self.compute_efficiency

    @property
    def effective_bandwidth(self) -> float:
        return self.mem_bandwidth * self.bandwidth_efficiency

    @property
    def ridge_point(self) -> float:
        """FLOPs per byte above which a kernel is compute bound."""
        return self.effective_flops / self.effective_bandwidth

    def intra_server_link_time(self, tokens: int, model: ModelConfig, tp: int = 1) -> float:
        """One tensor-parallel ring all-reduce of ``tokens`` activations."""
        if tp <= 1 or tokens <= 0:
            return 0.0
        nbytes = tokens * model.hidden_size * model.bytes_per_element
        return self.intra_server_link(2 * (tp - 1) / tp * nbytes)

    def cross_server_link_time(self, tokens: int, model: ModelConfig, tp: int = 1) -> float:
        """Inter-stage activation send; each TP rank ships its own slice."""
        if tokens <= 0:
            return 0.0
        nbytes = tokens * model.hidden_size * model.bytes_per_element / max(tp, 1)
        return self.cross_server_link(nbytes)


@dataclass(frozen=True)
class ParallelismConfig:
    p_tp: int = 1
    p_spp: int = 1
    p_kvp: int = 1

    def __post_init__(self):
        if min(self.p_tp, self.p_spp, self.p_kvp) < 1:
            raise ValueError("parallelism degrees must be >= 1")

    @property
    def devices(self) -> int:
        return self.p_tp * self.p_spp * self.p_kvp

    def check(self, model: ModelConfig) -> None:
        h = model.num_kv_heads
        if h % self.p_tp and self.p_tp % h:
            raise InfeasibleParallelismError(
                f"p_tp={self.p_tp} cannot shard {h} kv heads")
        if model.num_query_heads % self.p_tp:
            raise InfeasibleParallelismError(
                f"p_tp={self.p_tp} cannot shard {model.num_query_heads} query heads")
        if self.p_spp > model.num_layers:
            raise InfeasibleParallelismError("more pipeline stages than layers")


# -- closed-form resource counts ---------------------------------------------

def attention_flops(n: int, model: ModelConfig) -> float:
    """Causal self-attention FLOPs for an ``n``-token prefill, all layers."""
    return model.num_layers * 2 * n * n * model.head_dim * model.num_query_heads


def kv_cache_bytes(n: int, model: ModelConfig) -> float:
    """KV-cache footprint of ``n`` tokens; also the bytes one decode reads."""
    return (model.num_layers * 4 * n * model.head_dim * model.num_kv_heads
            * model.bytes_per_element / 2)


@dataclass(frozen=True)
class ChunkCost:
    flops: float
    read_bytes: float
    arithmetic_intensity: float


def chunk_attention_cost(i: int, c: int, model: ModelConfig) -> ChunkCost:
    """Attention cost of the ``i``-th chunk (1-based) of size ``c``.

    The chunk's ``c`` queries attend to all ``i * c`` tokens processed so far.
    """
    if i < 1 or c < 1:
        raise ValueError("chunk index and chunk size must be >= 1")
    flops = model.num_layers * 4 * i * c * c * model.head_dim * model.num_query_heads
    reads = model.num_layers * 4 * i * c * model.head_dim * model.num_kv_heads * (
        model.bytes_per_element / 2)
    return ChunkCost(flops, reads, flops / reads)


def quantize_chunk(tokens: float, quantum: int = CHUNK_QUANTUM) -> int:
    """Round up to a multiple of ``quantum`` with ``quantum`` as the floor."""
    return max(quantum, int(math.ceil(tokens / quantum)) * quantum)


def min_efficient_chunk(model: ModelConfig, hw: HardwareProfile,
                        quantum: int = CHUNK_QUANTUM) -> int:
    """Smallest chunk whose attention intensity reaches the ridge point."""
    needed = hw.peak_flops / hw.mem_bandwidth / model.gqa_ratio
    return quantize_chunk(needed, quantum)


@dataclass(frozen=True)
class Utilization:
    mfu: float
    mbu: float


def utilization(executed_flops: float, moved_bytes: float, elapsed: float,
                device_count: int, hw: HardwareProfile) -> Utilization:
    """Model FLOPs / bandwidth utilization.  Values above 1 are returned as is."""
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    if device_count < 1:
        raise ValueError("device_count must be >= 1")
    denom = elapsed * device_count
    return Utilization(executed_flops / (denom * hw.peak_flops),
                       moved_bytes / (denom * hw.mem_bandwidth))


# -- runtime predictor -------------------------------------------------------

@dataclass(frozen=True)
class ChunkWork:
    """A prefill chunk of ``tokens`` queries appended after ``kv_before`` tokens.

    ``shards`` gives how many context tokens live on each KVP rank (the last
    entry is the newest rank, which also receives the chunk).  ``None`` means
    the whole context sits on ``home_rank``.
    """

    kv_before: int
    tokens: int
    home_rank: int = 0
    shards: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class DecodeWork:
    context: int
    home_rank: int = 0
    shards: tuple[tuple[int, int], ...] | None = None


@dataclass
class StepWork:
    chunks: list[ChunkWork] = field(default_factory=list)
    decodes: list[DecodeWork] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return sum(c.tokens for c in self.chunks) + len(self.decodes)

    def is_empty(self) -> bool:
        return not self.chunks and not self.decodes


@dataclass(frozen=True)
class StepCost:
    """Time and work of one micro-batch on one pipeline stage."""

    stage_time: float
    attention_time: float
    linear_time: float
    comm_time: float
    kvp_comm_time: float
    flops: float  # whole model, all devices
    bytes: float


class ProfileTable:
    """Measured stage times indexed by (kv_len, chunk_tokens, decode_tokens).

    Lookup returns the cheapest row that dominates the query in all three
    coordinates, which keeps the answer monotone; ``None`` when no row does.
    """

    header = ("kv_len", "chunk_tokens", "decode_tokens", "seconds")

    def __init__(self, rows: Iterable[tuple[int, int, int, float]]):
        self.rows = sorted(rows, key=lambda r: r[3])

    @classmethod
    def from_csv(cls, path) -> "ProfileTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != cls.header:
                raise ValueError(f"{path}: expected header {','.join(cls.header)}")
            for lineno, rec in enumerate(reader, start=2):
                try:
                    row = (int(rec["kv_len"]), int(rec["chunk_tokens"]),
                           int(rec["decode_tokens"]), float(rec["seconds"]))
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                if min(row) < 0:
                    raise ValueError(f"{path}:{lineno}: negative value")
                rows.append(row)
        return cls(rows)

    def lookup(self, kv_len: int, chunk: int, decodes: int) -> float | None:
        for k, c, d, t in self.rows:
            if k >= kv_len and c >= chunk and d >= decodes:
                return t
        return None


class RuntimePredictor:
    """Roofline step-time model for a (model, hardware, parallelism) triple."""

    def __init__(self, model: ModelConfig, hw: HardwareProfile,
                 par: ParallelismConfig | None = None,
                 profile: ProfileTable | None = None):
        par = par or ParallelismConfig()
        par.check(model)
        self.model = model
        self.hw = hw
        self.par = par
        self.profile = profile
        self.stage_layers = model.num_layers / par.p_spp
        self._decode_cache = None
        self._kv_split = min(par.p_tp, model.num_kv_heads)
        self._peak = hw.effective_flops
        self._bw = hw.effective_bandwidth
        m = model
        # per-stage, per-device coefficients
        self._attn_flops_coef = 4 * m.head_dim * m.num_query_heads * self.stage_layers / par.p_tp
        self._attn_bytes_coef = (4 * m.head_dim * m.num_kv_heads * (m.bytes_per_element / 2)
                                 * self.stage_layers / self._kv_split)
        self._lin_flops_coef = m.mlp_flops_per_token * self.stage_layers / par.p_tp
        self._lin_bytes = m.linear_weight_bytes_per_layer * self.stage_layers / par.p_tp

    # operator-level pieces (per device, one stage)

    def attention_time(self, queries: int, keys: int) -> float:
        if queries <= 0 or keys <= 0:
            return 0.0
        return max(queries * keys * self._attn_flops_coef / self._peak,
                   keys * self._attn_bytes_coef / self._bw)

    def linear_time(self, tokens: int) -> float:
        if tokens <= 0:
            return 0.0
        return max(tokens * self._lin_flops_coef / self._peak, self._lin_bytes / self._bw)

    def tp_comm_time(self, tokens: int) -> float:
        per_layer = self.hw.intra_server_link_time(tokens, self.model, self.par.p_tp)
        return 2 * self.stage_layers * per_layer

    def kvp_comm_time(self, query_tokens: int) -> float:
        """Partial-output exchange for KVP; independent of context length."""
        if query_tokens <= 0:
            return 0.0
        nbytes = query_tokens * self.model.hidden_size * self.model.bytes_per_element
        return self.stage_layers * self.hw.cross_server_link(nbytes / self.par.p_tp)

    def pp_comm_time(self, tokens: int) -> float:
        if self.par.p_spp <= 1:
            return 0.0
        return self.hw.cross_server_link_time(tokens, self.model, self.par.p_tp)

    # batch level

    def step_cost(self, work: StepWork) -> StepCost:
        """Cost of one micro-batch on one pipeline stage.

        KVP ranks run concurrently, so the stage time is the slowest rank plus
        the merge exchange when any item spans more than one rank.
        """
        if work.is_empty():
            return StepCost(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        if self.profile is not None and len(work.chunks) <= 1 and all(
                d.shards is None for d in work.decodes):
            hit = self._profile_hit(work)
            if hit is not None:
                return hit
        m = self.model
        attn: dict[int, float] = {}
        tokens: dict[int, int] = {}
        flops = bytes_ = 0.0
        kvp_queries = 0
        hq_d, hkv_d = m.head_dim * m.num_query_heads, m.head_dim * m.num_kv_heads
        kv_scale = m.bytes_per_element / 2
        for ch in work.chunks:
            total_keys = ch.kv_before + ch.tokens
            for rank, keys in (ch.shards or ((ch.home_rank, ch.kv_before),)):
                if rank == ch.home_rank:
                    keys = keys + ch.tokens if ch.shards is not None else total_keys
                attn[rank] = attn.get(rank, 0.0) + self.attention_time(ch.tokens, keys)
            tokens[ch.home_rank] = tokens.get(ch.home_rank, 0) + ch.tokens
            if ch.shards is not None and len(ch.shards) > 1:
                kvp_queries += ch.tokens
            flops += 4 * ch.tokens * total_keys * hq_d * m.num_layers
            bytes_ += 4 * total_keys * hkv_d * kv_scale * m.num_layers
        if work.decodes:
            d_attn, d_tokens, d_kvp, d_flops, d_bytes = self._decode_aggregate(work.decodes)
            for rank, t in d_attn.items():
                attn[rank] = attn.get(rank, 0.0) + t
            for rank, t in d_tokens.items():
                tokens[rank] = tokens.get(rank, 0) + t
            kvp_queries += d_kvp
            flops += d_flops
            bytes_ += d_bytes
        n_tok = sum(tokens.values())
        flops += n_tok * m.mlp_flops_per_token * m.num_layers
        # every active KVP rank streams the full weights once per micro-batch
        bytes_ += m.linear_weight_bytes_per_layer * m.num_layers * len(tokens)

        worst = None
        for rank in set(attn) | set(tokens):
            a = attn.get(rank, 0.0)
            t = tokens.get(rank, 0)
            lin = self.linear_time(t)
            comm = self.tp_comm_time(t)
            total = a + lin + comm
            if worst is None or total > worst[0]:
                worst = (total, a, lin, comm)
        kvp = self.kvp_comm_time(kvp_queries)
        total, a, lin, comm = worst
        stage = total + kvp + self.hw.fixed_step_overhead
        return StepCost(stage, a, lin, comm, kvp, flops, bytes_)

    def _decode_aggregate(self, decodes: list[DecodeWork]):
        """Per-rank decode attention and token counts.

        The packer evaluates many candidate batches that share one decode
        list, so the last result is kept.
        """
        cached = self._decode_cache
        if cached is not None and cached[0] is decodes and cached[1] == len(decodes):
            return cached[2]
        m = self.model
        keys_per_rank: dict[int, int] = {}
        tokens: dict[int, int] = {}
        kvp = 0
        total_ctx = 0
        for dw in decodes:
            if dw.shards is None:
                keys_per_rank[dw.home_rank] = keys_per_rank.get(dw.home_rank, 0) + dw.context
            else:
                for rank, keys in dw.shards:
                    keys_per_rank[rank] = keys_per_rank.get(rank, 0) + keys
                if len(dw.shards) > 1:
                    kvp += 1
            tokens[dw.home_rank] = tokens.get(dw.home_rank, 0) + 1
            total_ctx += dw.context
        # single-query attention is linear in keys, so shards can be summed first
        attn = {r: self.attention_time(1, k) for r, k in keys_per_rank.items()}
        flops = 4 * total_ctx * m.head_dim * m.num_query_heads * m.num_layers
        bytes_ = (4 * total_ctx * m.head_dim * m.num_kv_heads * (m.bytes_per_element / 2)
                  * m.num_layers)
        agg = (attn, tokens, kvp, flops, bytes_)
        self._decode_cache = (decodes, len(decodes), agg)
        return agg

    def _profile_hit(self, work: StepWork) -> StepCost | None:
        kv = work.chunks[0].kv_before if work.chunks else 0
        c = work.chunks[0].tokens if work.chunks else 0
        t = self.profile.lookup(kv, c, len(work.decodes))
        if t is None:
            return None
        analytic = self.step_cost_analytic(work)
        return replace(analytic, stage_time=t)

    def step_cost_analytic(self, work: StepWork) -> StepCost:
        saved, self.profile = self.profile, None
        try:
            return self.step_cost(work)
        finally:
            self.profile = saved

    def stage_time(self, work: StepWork) -> float:
        return self.step_cost(work).stage_time

    def pipeline_latency(self, stage_time: float, tokens: int) -> float:
        """Issue-to-completion latency of a micro-batch through every stage."""
        p = self.par.p_spp
        return p * stage_time + (p - 1) * self.pp_comm_time(tokens)

    # closed forms for a request running alone

    def _single_chunk_coeffs(self, c: int) -> tuple[float, float]:
        """Stage time of a lone chunk of size c is ``a * keys + b``."""
        a = max(c * self._attn_flops_coef / self._peak, self._attn_bytes_coef / self._bw)
        b = (self.linear_time(c) + self.tp_comm_time(c) + self.hw.fixed_step_overhead
             + self.pp_comm_time(c))
        return a, b

    def isolated_prefill_time(self, total: int, done: int = 0, chunk: int = 4096) -> float:
        """Time to finish tokens ``done..total`` alone with a static chunk size.

        Includes the per-chunk pipeline send and the final pipeline drain.
        """
        remaining = total - done
        if remaining <= 0:
            return 0.0
        if self.profile is not None:
            return self._isolated_by_steps(total, done, chunk)
        full, rest = divmod(remaining, chunk)
        t = 0.0
        if full:
            a, b = self._single_chunk_coeffs(chunk)
            key_sum = full * done + chunk * full * (full + 1) / 2
            t += a * key_sum + b * full
        last_c = rest if rest else chunk
        if rest:
            a, b = self._single_chunk_coeffs(rest)
            t += a * total + b
        a, b = self._single_chunk_coeffs(last_c)
        last_stage = a * total + b - self.pp_comm_time(last_c)
        t += (self.par.p_spp - 1) * (last_stage + self.pp_comm_time(last_c))
        return t

    def _isolated_by_steps(self, total: int, done: int, chunk: int) -> float:
        t = 0.0
        kv = done
        stage = 0.0
        c = chunk
        while kv < total:
            c = min(chunk, total - kv)
            stage = self.stage_time(StepWork(chunks=[ChunkWork(kv, c)]))
            t += stage + self.pp_comm_time(c)
            kv += c
        return t + (self.par.p_spp - 1) * (stage + self.pp_comm_time(c))

    def decode_time(self, context: int, kvp: int = 1) -> float:
        """TPOT of a lone decode whose context is split evenly over ``kvp`` ranks."""
        if kvp <= 1:
            work = StepWork(decodes=[DecodeWork(context)])
        else:
            base, extra = divmod(context, kvp)
            shards = tuple((r, base + (1 if r < extra else 0)) for r in range(kvp))
            work = StepWork(decodes=[DecodeWork(context, home_rank=kvp - 1, shards=shards)])
        return self.pipeline_latency(self.stage_time(work), 1)


def predict_chunk_time(kv_len_before: int, c: int, batch_decode_tokens: int,
                       model: ModelConfig, hw: HardwareProfile,
                       par: ParallelismConfig | None = None,
                       decode_context: int = 0,
                       profile: ProfileTable | None = None) -> float:
    """Stage time of one chunk co-batched with ``batch_decode_tokens`` decodes.

    The decodes share ``decode_context`` KV tokens between them.  The chunk's
    context is spread evenly over ``par.p_kvp`` ranks.
    """
    if min(kv_len_before, c, batch_decode_tokens, decode_context) < 0:
        raise ValueError("token counts must be nonnegative")
    if c + batch_decode_tokens < 1:
        raise ValueError("empty batch")
    par = par or ParallelismConfig()
    pred = RuntimePredictor(model, hw, par, profile)
    work = StepWork()
    if c:
        shards = None
        if par.p_kvp > 1 and kv_len_before:
            base, extra = divmod(kv_len_before, par.p_kvp)
            shards = tuple((r, base + (1 if r < extra else 0)) for r in range(par.p_kvp))
        work.chunks.append(ChunkWork(kv_len_before, c, par.p_kvp - 1 if shards else 0, shards))
    if batch_decode_tokens:
        per, extra = divmod(decode_context, batch_decode_tokens)
        work.decodes.extend(DecodeWork(per + (1 if j < extra else 0))
                            for j in range(batch_decode_tokens))
    return pred.stage_time(work)


# -- presets -----------------------------------------------------------------

def _llama(name, hidden, heads, kv_heads, layers, inter, params) -> ModelConfig:
    d = hidden // heads
    per_layer_params = hidden * (2 * hidden + 2 * kv_heads * d) + 3 * hidden * inter
    return ModelConfig(heads, kv_heads, d, layers, 2, 2.0 * per_layer_params,
                       param_count=params, name=name)


MODELS = {
    "llama3-8b": _llama("llama3-8b", 4096, 32, 8, 32, 14336, 8.03e9),
    "llama3-70b": _llama("llama3-70b", 8192, 64, 8, 80, 28672, 70.6e9),
}

# Compute efficiency is fitted by calibration.fit_compute_efficiency to the
# 8B / 8xH100 chunk-32 vs chunk-4096 prefill ratio of 1.75, holding the
# bandwidth efficiency and step overhead below fixed.
DEFAULT_COMPUTE_EFFICIENCY = 0.515
DEFAULT_BANDWIDTH_EFFICIENCY = 0.90
DEFAULT_STEP_OVERHEAD = 0.25e-3

HARDWARE = {
    "h100": HardwareProfile(
        peak_flops=989e12, mem_bandwidth=3.35e12, mem_capacity=80e9,
        intra_server_link=LinkModel(5e-6, 450e9),
        cross_server_link=LinkModel(10e-6, 50e9),
        fixed_step_overhead=DEFAULT_STEP_OVERHEAD,
        compute_efficiency=DEFAULT_COMPUTE_EFFICIENCY,
        bandwidth_efficiency=DEFAULT_BANDWIDTH_EFFICIENCY, name="h100"),
    "a100": HardwareProfile(
        peak_flops=312e12, mem_bandwidth=2.039e12, mem_capacity=80e9,
        intra_server_link=LinkModel(5e-6, 300e9),
        cross_server_link=LinkModel(10e-6, 25e9),
        fixed_step_overhead=DEFAULT_STEP_OVERHEAD,
        compute_efficiency=DEFAULT_COMPUTE_EFFICIENCY,
        bandwidth_efficiency=DEFAULT_BANDWIDTH_EFFICIENCY, name="a100"),
}


def get_model(name: str) -> ModelConfig:
    try:
        return MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None


def get_hardware(name: str) -> HardwareProfile:
    try:
        return HARDWARE[name]
    except KeyError:
        raise KeyError(f"unknown hardware {name!r}; known: {sorted(HARDWARE)}") from None


def static_prefill_time(n: int, chunk: int, pred: RuntimePredictor) -> float:
    """Sum of stage times for an ``n``-token prefill in fixed chunks (no pipeline)."""
    return pred.isolated_prefill_time(n, 0, chunk)
