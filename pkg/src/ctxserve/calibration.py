"""Fit hardware efficiency constants against reference prefill measurements."""
from __future__ import annotations

from dataclasses import replace

from scipy.optimize import brentq

from .costmodel import (HardwareProfile, ModelConfig, ParallelismConfig,
                        RuntimePredictor)

# Llama-3 8B on one 8xH100 server: 1M-token prefill with 32-token chunks is
# 1.75x slower than with 4096-token chunks.
REFERENCE_RATIO = 1.75
REFERENCE_TOKENS = 1_000_000
REFERENCE_CHUNKS = (32, 4096)


def chunk_ratio(model: ModelConfig, hw: HardwareProfile, par: ParallelismConfig,
                n: int = REFERENCE_TOKENS, chunks=REFERENCE_CHUNKS) -> float:
    pred = RuntimePredictor(model, hw, par)
    small, large = chunks
    return pred.isolated_prefill_time(n, 0, small) / pred.isolated_prefill_time(n, 0, large)


def fit_compute_efficiency(model: ModelConfig, hw: HardwareProfile,
                           par: ParallelismConfig, target: float = REFERENCE_RATIO,
                           lo: float = 0.2, hi: float = 1.0) -> float:
    """Compute efficiency that makes ``chunk_ratio`` hit ``target``.

    Small chunks are bandwidth bound, large ones compute bound, so the ratio
    rises monotonically with compute efficiency.
    """
    def f(eta):
        return chunk_ratio(model, replace(hw, compute_efficiency=eta), par) - target

    if f(lo) > 0 or f(hi) < 0:
        raise ValueError(f"target ratio {target} not reachable in [{lo}, {hi}]")
    return brentq(f, lo, hi, xtol=1e-6)


def attention_chunk_overhead(model: ModelConfig, hw: HardwareProfile,
                             par: ParallelismConfig, small: int = 32,
                             large: int = 2048, n: int = REFERENCE_TOKENS) -> float:
    """Relative extra self-attention time of ``small`` vs ``large`` chunks."""
    pred = RuntimePredictor(model, hw, par)

    def total(c):
        return sum(pred.attention_time(c, k) for k in range(c, n + 1, c))

    return total(small) / total(large) - 1
