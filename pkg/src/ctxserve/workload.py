"""Synthetic request traces and the JSONL trace format.

A trace line is ``{"arrival_s": float, "prefill_tokens": int,
"decode_tokens": int, "id": str}`` with ``id`` optional.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

Z90 = float(norm.ppf(0.9))


@dataclass(frozen=True)
class TraceEntry:
    arrival_s: float
    prefill_tokens: int
    decode_tokens: int
    id: str = ""

    def to_json(self) -> str:
        return json.dumps({"arrival_s": self.arrival_s, "prefill_tokens": self.prefill_tokens,
                           "decode_tokens": self.decode_tokens, "id": self.id})


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)
    reordered: int = 0  # lines found out of arrival order on load

    def __iter__(self) -> Iterator[TraceEntry]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")


@dataclass(frozen=True)
class LogNormal:
    """Lognormal size law pinned by its median and 90th percentile, clamped."""

    p50: float
    p90: float
    lo: int = 1
    hi: int | None = None

    @property
    def mu(self) -> float:
        return math.log(self.p50)

    @property
    def sigma(self) -> float:
        return math.log(self.p90 / self.p50) / Z90

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        x = np.rint(rng.lognormal(self.mu, self.sigma, size))
        return np.clip(x, self.lo, self.hi if self.hi is not None else np.inf).astype(np.int64)


@dataclass(frozen=True)
class SizeDist:
    prefill: LogNormal
    decode: LogNormal


SHORT_DIST = SizeDist(LogNormal(1024, 6144, 1, 8192), LogNormal(256, 512, 1, 2048))
LONG_DIST = SizeDist(LogNormal(393_000, 839_000, 128_000, 1_000_000),
                     LogNormal(518, 808, 1, 8192))


@dataclass(frozen=True)
class TraceSpec:
    qps: float
    duration: float
    long_fraction: float = 0.0
    seed: int = 0
    short_dist: SizeDist = SHORT_DIST
    long_dist: SizeDist = LONG_DIST

    def __post_init__(self):
        if self.qps <= 0:
            raise ValueError("qps must be positive")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if not 0 <= self.long_fraction <= 1:
            raise ValueError("long_fraction must be in [0, 1]")


def generate_trace(spec: TraceSpec) -> Trace:
    """Poisson arrivals; each request independently long with ``long_fraction``."""
    rng = np.random.default_rng(spec.seed)
    # draw inter-arrivals in blocks until the horizon is passed
    gaps = []
    t = 0.0
    block = max(16, int(spec.qps * spec.duration * 1.2) + 16)
    while t <= spec.duration:
        g = rng.exponential(1.0 / spec.qps, block)
        gaps.append(g)
        t += g.sum()
    arrivals = np.cumsum(np.concatenate(gaps)) if gaps else np.empty(0)
    arrivals = arrivals[arrivals <= spec.duration]
    n = len(arrivals)
    is_long = rng.random(n) < spec.long_fraction
    sp = spec.short_dist.prefill.sample(rng, n)
    sd = spec.short_dist.decode.sample(rng, n)
    lp = spec.long_dist.prefill.sample(rng, n)
    ld = spec.long_dist.decode.sample(rng, n)
    prefill = np.where(is_long, lp, sp)
    decode = np.where(is_long, ld, sd)
    width = max(4, len(str(n)))
    entries = [TraceEntry(float(a), int(p), int(d), f"r{i:0{width}d}")
               for i, (a, p, d) in enumerate(zip(arrivals, prefill, decode))]
    return Trace(entries)


class TraceFormatError(ValueError):
    pass


def _parse_line(obj, lineno, path):
    if not isinstance(obj, dict):
        raise TraceFormatError(f"{path}:{lineno}: expected a JSON object")
    try:
        arrival = obj["arrival_s"]
        prefill = obj["prefill_tokens"]
        decode = obj["decode_tokens"]
    except KeyError as exc:
        raise TraceFormatError(f"{path}:{lineno}: missing field {exc}") from None
    if isinstance(arrival, bool) or not isinstance(arrival, (int, float)) or not math.isfinite(arrival):
        raise TraceFormatError(f"{path}:{lineno}: arrival_s must be a finite number")
    for name, v in (("prefill_tokens", prefill), ("decode_tokens", decode)):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TraceFormatError(f"{path}:{lineno}: {name} must be an integer")
    if arrival < 0 or prefill < 0 or decode < 0:
        raise TraceFormatError(f"{path}:{lineno}: negative field")
    if prefill < 1 or decode < 1:
        raise TraceFormatError(f"{path}:{lineno}: requests need >= 1 prefill and decode token")
    rid = obj.get("id")
    return float(arrival), prefill, decode, None if rid is None else str(rid)


def load_trace(path) -> Trace:
    """Read a JSONL trace; out-of-order arrivals are stably sorted and counted."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc.msg}") from None
            rows.append(_parse_line(obj, lineno, path))
    reordered = sum(1 for a, b in zip(rows, rows[1:]) if b[0] < a[0])
    if reordered:
        log.warning("%s: %d arrivals out of order; sorting", path, reordered)
    width = max(4, len(str(len(rows))))
    entries = [TraceEntry(a, p, d, rid if rid is not None else f"r{i:0{width}d}")
               for i, (a, p, d, rid) in enumerate(rows)]
    entries.sort(key=lambda e: e.arrival_s)
    if len({e.id for e in entries}) != len(entries):
        raise TraceFormatError(f"{path}: duplicate request ids")
    return Trace(entries, reordered)


@dataclass(frozen=True)
class ContextProbe:
    """A lone request of a given context length, arriving at time zero."""

    prefill_tokens: int
    decode_tokens: int = 1

    def trace(self) -> Trace:
        return single_request_trace(self.prefill_tokens, self.decode_tokens)


def single_request_trace(prefill: int, decode: int = 1, arrival: float = 0.0) -> Trace:
    return Trace([TraceEntry(arrival, prefill, decode, "r0000")])
