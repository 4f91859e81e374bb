"""Experiment configuration: one YAML file describes a run or a sweep.

See ``docs/config.md`` for every field.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .costmodel import (HardwareProfile, LinkModel, ModelConfig, ParallelismConfig,
                        ProfileTable, get_hardware, get_model)
from .scheduler import ChunkPolicy, Policy, SLOSpec
from .workload import ContextProbe, TraceSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolSplit:
    """Static short/long pools: prompts of at most ``threshold_tokens`` go short."""

    threshold_tokens: int
    short: ParallelismConfig | None
    long: ParallelismConfig | None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    hardware: HardwareProfile
    parallelism: ParallelismConfig = ParallelismConfig()
    slo: SLOSpec = SLOSpec()
    policy: Policy = Policy.ILRS
    chunking: ChunkPolicy = ChunkPolicy()
    reference_chunk: int = 4096
    trace: TraceSpec | ContextProbe | str | None = None
    horizon: float | None = None
    seed: int = 0
    exact_pipeline: bool = False
    activation_reserve: float = 4e9
    max_long_per_rank: int = 1
    worker_token_limit: int | None = None
    pools: PoolSplit | None = None
    profile_table: str | None = None
    sweep: dict[str, list] = field(default_factory=dict)
    base_dir: str = "."

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def load_profile(self) -> ProfileTable | None:
        if self.profile_table is None:
            return None
        path = Path(self.base_dir) / self.profile_table
        try:
            return ProfileTable.from_csv(path)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_HW_KEYS = {f.name for f in fields(HardwareProfile)}


def _model(spec) -> ModelConfig:
    if isinstance(spec, str):
        return get_model(spec)
    if not isinstance(spec, dict):
        raise ConfigError("model must be a preset name or a mapping")
    spec = dict(spec)
    base = spec.pop("preset", None)
    unknown = set(spec) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model fields: {sorted(unknown)}")
    if base:
        return replace(get_model(base), **spec)
    return ModelConfig(**spec)


def _link(spec, default: LinkModel) -> LinkModel:
    if spec is None:
        return default
    if not isinstance(spec, dict) or set(spec) - {"latency", "bandwidth"}:
        raise ConfigError("links take {latency, bandwidth}")
    return replace(default, **spec)


def _hardware(spec) -> HardwareProfile:
    if isinstance(spec, str):
        return get_hardware(spec)
    if not isinstance(spec, dict):
        raise ConfigError("hardware must be a preset name or a mapping")
    spec = dict(spec)
    base = spec.pop("preset", None)
    unknown = set(spec) - _HW_KEYS
    if unknown:
        raise ConfigError(f"unknown hardware fields: {sorted(unknown)}")
    hw = get_hardware(base) if base else None
    for key in ("intra_server_link", "cross_server_link"):
        if key in spec:
            default = getattr(hw, key) if hw else getattr(HardwareProfile, key)
            spec[key] = _link(spec[key], default)
    return replace(hw, **spec) if hw else HardwareProfile(**spec)


def _par(spec) -> ParallelismConfig | None:
    if spec is None:
        return None
    if not isinstance(spec, dict) or set(spec) - {"p_tp", "p_spp", "p_kvp"}:
        raise ConfigError("parallelism takes {p_tp, p_spp, p_kvp}")
    return ParallelismConfig(**spec)


def _subset(spec, cls, name, drop=()):
    spec = dict(spec or {})
    allowed = {f.name for f in fields(cls)}
    unknown = set(spec) - allowed - set(drop)
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    return {k: v for k, v in spec.items() if k in allowed}


def _trace(spec, seed):
    if spec is None:
        return None
    if isinstance(spec, str):
        return spec
    if not isinstance(spec, dict):
        raise ConfigError("trace must be a path or a mapping")
    if "path" in spec:
        return str(spec["path"])
    if "context" in spec:
        return ContextProbe(int(spec["context"]), int(spec.get("decode_tokens", 1)))
    kw = _subset(spec, TraceSpec, "trace")
    kw.setdefault("seed", seed)
    return TraceSpec(**kw)


def from_dict(raw: dict[str, Any], base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = {"model", "hardware", "parallelism", "slo", "scheduler", "kvp", "memory",
             "trace", "horizon", "seed", "exact_pipeline", "pools", "profile_table",
             "sweep", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("model", "hardware"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    try:
        sched = dict(raw.get("scheduler") or {})
        policy = Policy(str(sched.pop("policy", "ilrs")).lower())
        ref_chunk = int(sched.pop("reference_chunk", 4096))
        chunking = ChunkPolicy(**_subset(sched, ChunkPolicy, "scheduler"))
        kvp = dict(raw.get("kvp") or {})
        if set(kvp) - {"max_long_per_rank", "worker_token_limit"}:
            raise ConfigError("kvp takes {max_long_per_rank, worker_token_limit}")
        mem = dict(raw.get("memory") or {})
        if set(mem) - {"activation_reserve_gb"}:
            raise ConfigError("memory takes {activation_reserve_gb}")
        seed = int(raw.get("seed", 0))
        pools = None
        if raw.get("pools") is not None:
            p = dict(raw["pools"])
            if set(p) - {"threshold_tokens", "short", "long"}:
                raise ConfigError("pools takes {threshold_tokens, short, long}")
            pools = PoolSplit(int(p["threshold_tokens"]), _par(p.get("short")), _par(p.get("long")))
        sweep = raw.get("sweep") or {}
        if not isinstance(sweep, dict) or set(sweep) - set(SWEEP_AXES):
            raise ConfigError(f"sweep axes must be among {SWEEP_AXES}")
        cfg = ExperimentConfig(
            model=_model(raw["model"]),
            hardware=_hardware(raw["hardware"]),
            parallelism=_par(raw.get("parallelism")) or ParallelismConfig(),
            slo=SLOSpec(**_subset(raw.get("slo"), SLOSpec, "slo")),
            policy=policy,
            chunking=chunking,
            reference_chunk=ref_chunk,
            trace=_trace(raw.get("trace"), seed),
            horizon=None if raw.get("horizon") is None else float(raw["horizon"]),
            seed=seed,
            exact_pipeline=bool(raw.get("exact_pipeline", False)),
            activation_reserve=float(mem.get("activation_reserve_gb", 4)) * 1e9,
            max_long_per_rank=int(kvp.get("max_long_per_rank", 1)),
            worker_token_limit=kvp.get("worker_token_limit"),
            pools=pools,
            profile_table=raw.get("profile_table"),
            sweep={k: list(v) for k, v in sweep.items()},
            base_dir=base_dir,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


SWEEP_AXES = ("qps", "policy", "chunk", "p_spp", "p_kvp", "context")


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a YAML config; returns the config and the raw mapping."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is None:
        raw = {}
    return from_dict(raw, base_dir=str(path.parent)), raw


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Config for one sweep cell along ``axis``."""
    if axis == "qps":
        if not isinstance(cfg.trace, TraceSpec):
            raise ConfigError("qps axis needs a generated trace")
        return replace(cfg, trace=replace(cfg.trace, qps=float(value)))
    if axis == "policy":
        return replace(cfg, policy=Policy(str(value).lower()))
    if axis == "chunk":
        return replace(cfg, chunking=replace(cfg.chunking, static_chunk=int(value),
                                             max_chunk=max(cfg.chunking.max_chunk, int(value))))
    if axis == "p_spp":
        return replace(cfg, parallelism=replace(cfg.parallelism, p_spp=int(value)))
    if axis == "p_kvp":
        return replace(cfg, parallelism=replace(cfg.parallelism, p_kvp=int(value)))
    if axis == "context":
        decode = cfg.trace.decode_tokens if isinstance(cfg.trace, ContextProbe) else 1
        return replace(cfg, trace=ContextProbe(int(value), decode))
    raise ConfigError(f"unknown sweep axis {axis!r}")
