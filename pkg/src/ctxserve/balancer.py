"""Placement of requests on KV-cache-parallel ranks.

Every request starts on one rank.  Its KV cache grows on its newest rank
until that rank holds ``worker_token_limit`` of its tokens, at which point the
least-loaded free rank is appended.  Ranks are released together when the
request finishes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .scheduler import Request


class NoCapacityError(RuntimeError):
    """No rank can take the request's first shard right now."""


@dataclass
class KvpRankState:
    rank: int
    token_limit: int  # KV tokens the rank can hold
    resident_kv_tokens: int = 0
    pending_prefill_time: float = 0.0

    @property
    def free_tokens(self) -> int:
        return self.token_limit - self.resident_kv_tokens

    def load_key(self):
        return (self.pending_prefill_time, self.resident_kv_tokens, self.rank)


def assign_request(req: Request, ranks: Sequence[KvpRankState], first_shard: int = 1) -> int:
    """Least-loaded rank with room for ``first_shard`` tokens."""
    fits = [r for r in ranks if r.free_tokens >= first_shard]
    if not fits:
        raise NoCapacityError(f"no KVP rank can hold {first_shard} tokens for {req.id}")
    return min(fits, key=KvpRankState.load_key).rank


def maybe_grow_workers(req: Request, current: Sequence[int], ranks: Sequence[KvpRankState],
                       token_limit: int) -> list[int]:
    """Rank list after growth, or ``current`` unchanged.

    Grows only when the newest rank already holds ``token_limit`` of this
    request's tokens and some other rank has free space.
    """
    current = list(current)
    if not current or not req.shard_tokens or req.shard_tokens[-1] < token_limit:
        return current
    free = [r for r in ranks if r.rank not in current and r.free_tokens > 0]
    if not free:
        return current
    return current + [min(free, key=KvpRankState.load_key).rank]


@dataclass
class KvpBalancer:
    """Rank bookkeeping for one replica."""

    ranks: list[KvpRankState]
    worker_token_limit: int
    placements: dict[str, int] = field(default_factory=dict)
    deferred: set[str] = field(default_factory=set)  # requests whose growth was blocked

    @property
    def deferred_growth(self) -> int:
        return len(self.deferred)

    @classmethod
    def uniform(cls, p_kvp: int, rank_capacity: int, max_long_per_rank: int = 1,
                worker_token_limit: int | None = None) -> "KvpBalancer":
        limit = worker_token_limit or max(1, rank_capacity // max(1, max_long_per_rank))
        return cls([KvpRankState(i, rank_capacity) for i in range(p_kvp)], limit)

    def refresh_pending(self, active: Sequence[Request],
                        remaining_time: Callable[[Request], float]) -> None:
        for r in self.ranks:
            r.pending_prefill_time = 0.0
        for req in active:
            if req.assigned_kvp_ranks and req.remaining_prefill > 0:
                self.ranks[req.home_rank].pending_prefill_time += remaining_time(req)

    def admit(self, req: Request) -> int:
        rank = assign_request(req, self.ranks, 1)
        req.assigned_kvp_ranks = [rank]
        req.shard_tokens = [0]
        self.placements[req.id] = rank
        return rank

    def grow_if_needed(self, req: Request) -> bool:
        """Apply the growth rule at a chunk boundary; True if a rank was added."""
        if req.shard_tokens and req.shard_tokens[-1] >= self.worker_token_limit:
            new = maybe_grow_workers(req, req.assigned_kvp_ranks, self.ranks,
                                     self.worker_token_limit)
            if len(new) == len(req.assigned_kvp_ranks):
                self.deferred.add(req.id)
                return False
            req.assigned_kvp_ranks = new
            req.shard_tokens.append(0)
            return True
        return False

    def room(self, req: Request) -> int:
        """Tokens the request may still place on its newest rank."""
        if not req.assigned_kvp_ranks:
            return 0
        rank = self.ranks[req.home_rank]
        own = self.worker_token_limit - req.shard_tokens[-1]
        if own <= 0 and self._can_grow(req):
            own = 0
        elif own <= 0:
            # growth impossible: keep filling the newest rank while it has space
            own = rank.free_tokens
        return max(0, min(own, rank.free_tokens))

    def _can_grow(self, req: Request) -> bool:
        return any(r.rank not in req.assigned_kvp_ranks and r.free_tokens > 0
                   for r in self.ranks)

    def place(self, req: Request, tokens: int, force: bool = False) -> None:
        """Append ``tokens`` of KV to the request's newest rank."""
        rank = self.ranks[req.home_rank]
        if not force and tokens > rank.free_tokens:
            raise NoCapacityError(f"rank {rank.rank} cannot hold {tokens} more tokens")
        rank.resident_kv_tokens += tokens
        req.shard_tokens[-1] += tokens

    def release(self, req: Request) -> None:
        for rank, tokens in zip(req.assigned_kvp_ranks, req.shard_tokens):
            self.ranks[rank].resident_kv_tokens -= tokens
        req.shard_tokens = [0] * len(req.assigned_kvp_ranks)
