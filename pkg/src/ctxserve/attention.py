"""Exact softmax attention and online-softmax merging of sharded partials.

Used as a float64 correctness oracle for KV-cache parallelism: each rank holds
a contiguous slice of the KV cache, computes a partial state for the
replicated queries, and the partials are merged exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PartialAttention:
    """Unnormalized attention over one KV shard.

    ``output`` is ``sum_j exp(s_j - running_max) v_j`` per query row, and
    ``denominator`` is ``sum_j exp(s_j - running_max)``.  Rows whose keys are
    all masked carry ``running_max = -inf`` and zero denominator.
    """

    output: np.ndarray  # (q, d)
    running_max: np.ndarray  # (q,)
    denominator: np.ndarray  # (q,)

    def finalize(self) -> np.ndarray:
        return self.output / self.denominator[:, None]


def _check(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"query dim {Q.shape[1]} != key dim {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"{K.shape[0]} keys but {V.shape[0]} values")
    return Q, K, V


def _logits(Q, K, causal_offset, key_start):
    scores = Q @ K.T / np.sqrt(Q.shape[1])
    if causal_offset is not None:
        q_pos = causal_offset + np.arange(Q.shape[0])[:, None]
        k_pos = key_start + np.arange(K.shape[0])[None, :]
        scores = np.where(k_pos <= q_pos, scores, -np.inf)
    return scores


def reference_attention(Q, K, V, causal_offset: int | None = None) -> np.ndarray:
    """Single-pass softmax attention.

    With ``causal_offset`` set, query row ``r`` sits at absolute position
    ``causal_offset + r`` and sees keys at positions ``<=`` its own.
    """
    Q, K, V = _check(Q, K, V)
    s = _logits(Q, K, causal_offset, 0)
    m = s.max(axis=1, keepdims=True)
    w = np.exp(s - m)
    return (w @ V) / w.sum(axis=1, keepdims=True)


def partial_attention(Q, K_shard, V_shard, causal_offset: int | None = None,
                      key_start: int = 0) -> PartialAttention:
    """Partial state over keys at positions ``key_start .. key_start + len - 1``."""
    Q, K, V = _check(Q, K_shard, V_shard)
    if K.shape[0] == 0:
        raise ValueError("empty KV shard")
    s = _logits(Q, K, causal_offset, key_start)
    m = s.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(s - safe[:, None])
    return PartialAttention(w @ V, m, w.sum(axis=1))


def merge_partials(parts: Sequence[PartialAttention]) -> np.ndarray:
    """Combine shard partials into the exact attention output."""
    if not parts:
        raise ValueError("nothing to merge")
    shape = parts[0].output.shape
    if any(p.output.shape != shape for p in parts):
        raise ValueError("partials disagree on shape")
    maxes = np.stack([p.running_max for p in parts])
    g = maxes.max(axis=0)
    out = np.zeros(shape)
    den = np.zeros(shape[0])
    for p in parts:
        scale = np.where(np.isfinite(p.running_max), np.exp(p.running_max - g), 0.0)
        out += scale[:, None] * p.output
        den += scale * p.denominator
    return out / den[:, None]


def sharded_attention(Q, K, V, bounds: Sequence[int],
                      causal_offset: int | None = None) -> np.ndarray:
    """Attention computed shard by shard; ``bounds`` are the interior split points."""
    edges = [0, *bounds, len(K)]
    parts = [partial_attention(Q, K[a:b], V[a:b], causal_offset, key_start=a)
             for a, b in zip(edges, edges[1:]) if b > a]
    return merge_partials(parts)
