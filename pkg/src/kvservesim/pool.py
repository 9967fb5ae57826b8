"""Centralized KV-cache pool with exact byte accounting.

The pool stores no tensor payloads; it is a ledger of cache lifetimes. A
cache's raw-to-compressed transition is a relabeling of its handle plus a
single accounting step, so in pooled mode there is no instant at which raw
and compressed bytes for the same request are both counted. Legacy mode
retains the raw bytes until release, reproducing the lingering
pre-compression caches the pooled design eliminates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

from .kv import KVCacheSpec, ModelConfig, kv_bytes


class HandleState(str, Enum):
    RAW = "raw"
    COMPRESSED = "compressed"
    FREED = "freed"


class PoolMode(str, Enum):
    POOLED = "pooled"
    LEGACY_ZOMBIE = "legacy"


class CapacityExceeded(RuntimeError):
    """An operation would push current bytes past pool capacity."""

    def __init__(self, requested: int, available: int):
        super().__init__(
            f"requested {requested} bytes but only {available} available"
        )
        self.requested = requested
        self.available = available


class InvalidState(RuntimeError):
    """Operation applied to a handle in the wrong lifecycle state."""


class DoubleFree(RuntimeError):
    """A handle was released twice."""


@dataclass
class CacheHandle:
    """One request's cache entry; identity is stable across compression."""

    handle_id: int
    request_id: int
    state: HandleState
    spec: KVCacheSpec
    bytes: int
    created_at: float
    retained_raw_bytes: int = 0  # legacy mode only: raw kept past compression


@dataclass(frozen=True)
class PoolStats:
    current_bytes: int
    peak_bytes: int
    capacity_bytes: int
    live_handles: int
    zombie_bytes_reclaimed: int
    allocation_count: int


class MemorySample(NamedTuple):
    time_s: float
    current_bytes: int
    peak_bytes: int
    live_handles: int


class LedgerEntry(NamedTuple):
    time_s: float
    op: str
    handle_id: int
    delta_bytes: int


class KVCachePool:
    """Byte-exact cache accounting with strict admission.

    Every mutation appends one memory-trace sample and one ledger entry, so
    conservation (current == sum of live handle bytes == sum of ledger
    deltas) can be replayed and checked at any point.
    """

    def __init__(
        self,
        config: ModelConfig,
        capacity_bytes: int,
        mode: PoolMode = PoolMode.POOLED,
    ):
        if capacity_bytes < 1:
            raise ValueError("capacity_bytes must be >= 1")
        self.config = config
        self.capacity_bytes = capacity_bytes
        self.mode = mode
        self.handles: dict[int, CacheHandle] = {}
        self.memory_trace: list[MemorySample] = []
        self.ledger: list[LedgerEntry] = []
        self._current = 0
        self._peak = 0
        self._live = 0
        self._zombie_reclaimed = 0
        self._alloc_count = 0
        self._retained_handles = 0
        self._next_id = 0
        # True if raw and compressed bytes for some request ever coexisted.
        self.zombie_coexistence_observed = False

    # -- accounting internals ------------------------------------------------

    @property
    def current_bytes(self) -> int:
        return self._current

    @property
    def peak_bytes(self) -> int:
        return self._peak

    @property
    def available_bytes(self) -> int:
        return self.capacity_bytes - self._current

    def _apply(self, now: float, op: str, handle_id: int, delta: int) -> None:
        self._current += delta
        assert 0 <= self._current <= self.capacity_bytes, "pool accounting broke"
        if self._current > self._peak:
            self._peak = self._current
        if self._retained_handles > 0:
            self.zombie_coexistence_observed = True
        self.ledger.append(LedgerEntry(now, op, handle_id, delta))
        self.memory_trace.append(
            MemorySample(now, self._current, self._peak, self._live)
        )

    # -- operations ----------------------------------------------------------

    def allocate(self, request_id: int, spec: KVCacheSpec, now: float) -> CacheHandle:
        """Admit a raw cache; strict: the full footprint must fit right now."""
        needed = kv_bytes(self.config, spec.total_tokens)
        if needed > self.available_bytes:
            raise CapacityExceeded(needed, self.available_bytes)
        handle = CacheHandle(
            handle_id=self._next_id,
            request_id=request_id,
            state=HandleState.RAW,
            spec=spec,
            bytes=needed,
            created_at=now,
        )
        self._next_id += 1
        self.handles[handle.handle_id] = handle
        self._live += 1
        self._alloc_count += 1
        self._apply(now, "allocate", handle.handle_id, needed)
        return handle

    def transition_compressed(
        self, handle: CacheHandle, new_spec: KVCacheSpec, now: float
    ) -> CacheHandle:
        """Swap a raw cache for its compressed form in one accounting step.

        Pooled mode releases the raw bytes in the same step that charges the
        compressed bytes (the zero-copy reclamation). Legacy mode keeps the
        raw bytes counted until release, so raw and compressed coexist.
        """
        if handle.state is not HandleState.RAW:
            raise InvalidState(f"transition requires a raw handle, got {handle.state}")
        compressed = kv_bytes(self.config, new_spec.total_tokens)
        if self.mode is PoolMode.POOLED:
            delta = compressed - handle.bytes
            self._zombie_reclaimed += handle.bytes - compressed
        else:
            delta = compressed
            if delta > self.available_bytes:
                raise CapacityExceeded(delta, self.available_bytes)
            handle.retained_raw_bytes = handle.bytes
            self._retained_handles += 1
        handle.spec = new_spec
        handle.bytes = compressed
        handle.state = HandleState.COMPRESSED
        self._apply(now, "transition", handle.handle_id, delta)
        return handle

    def append_decode_tokens(
        self, handle: CacheHandle, token_count: int, now: float
    ) -> CacheHandle:
        """Grow a compressed cache by freshly decoded (uncompressed) tokens."""
        if handle.state is not HandleState.COMPRESSED:
            raise InvalidState(f"append requires a compressed handle, got {handle.state}")
        if token_count < 1:
            raise ValueError("token_count must be >= 1")
        needed = kv_bytes(self.config, token_count)
        if needed > self.available_bytes:
            raise CapacityExceeded(needed, self.available_bytes)
        handle.spec = replace(
            handle.spec,
            decode_appended_tokens=handle.spec.decode_appended_tokens + token_count,
        )
        handle.bytes += needed
        self._apply(now, "append", handle.handle_id, needed)
        return handle

    def release(self, handle: CacheHandle, now: float) -> None:
        """Free a cache; in legacy mode this also drops the retained raw bytes."""
        if handle.state is HandleState.FREED:
            raise DoubleFree(f"handle {handle.handle_id} already freed")
        delta = -(handle.bytes + handle.retained_raw_bytes)
        if handle.retained_raw_bytes > 0:
            self._retained_handles -= 1
            handle.retained_raw_bytes = 0
        handle.state = HandleState.FREED
        self._live -= 1
        self._apply(now, "release", handle.handle_id, delta)
        handle.bytes = 0

    # -- observation ---------------------------------------------------------

    def stats(self) -> PoolStats:
        return PoolStats(
            current_bytes=self._current,
            peak_bytes=self._peak,
            capacity_bytes=self.capacity_bytes,
            live_handles=self._live,
            zombie_bytes_reclaimed=self._zombie_reclaimed,
            allocation_count=self._alloc_count,
        )

    def snapshot(self, now: float) -> PoolStats:
        """Record an explicit trace sample and return current stats."""
        self.memory_trace.append(
            MemorySample(now, self._current, self._peak, self._live)
        )
        return self.stats()

    def verify_conservation(self) -> None:
        """Replay-check the ledger against live-handle byte totals."""
        live_total = sum(
            h.bytes + h.retained_raw_bytes
            for h in self.handles.values()
            if h.state is not HandleState.FREED
        )
        ledger_total = sum(e.delta_bytes for e in self.ledger)
        if live_total != self._current or ledger_total != self._current:
            raise AssertionError(
                "conservation violated: "
                f"live={live_total} ledger={ledger_total} current={self._current}"
            )
