"""Batching policies and stage-queue batch formation.

Three policy families:

* ``fcfs`` — singleton batches, strict arrival order.
* ``static:pXcYdZ`` — fixed-size FIFO batches per stage (X prefill,
  Y compress, Z decode), with an anti-stall timeout that flushes a partial
  tail batch.
* ``dynamic:bmin=A,bmax=B,wmax_ms=C[,aging=on|off]`` — memory-aware batching:
  dispatch once B_min requests wait (or the oldest has waited W_max), then
  pack the largest batch that fits the byte budget, preferring small
  requests over arrival order; aging force-includes requests that have
  waited past W_max so reordering cannot starve them.

Decision functions are pure: the engine owns queue mutation and budgets.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

EMA_ALPHA = 0.3


class Stage(str, Enum):
    PREFILL = "prefill"
    COMPRESS = "compress"
    DECODE = "decode"


class EmptyBatch(RuntimeError):
    """No queue entry fits the current byte budget."""


class PolicyParseError(ValueError):
    """A policy string did not match the policy grammar."""


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FCFSPolicy:
    pass


@dataclass(frozen=True)
class StaticPolicy:
    """Fixed batch sizes per stage."""

    prefill_batch: int
    compress_batch: int
    decode_batch: int
    anti_stall_s: float = 2.0

    def __post_init__(self) -> None:
        for attr in ("prefill_batch", "compress_batch", "decode_batch"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.anti_stall_s < 0:
            raise ValueError("anti_stall_s must be >= 0")

    def stage_size(self, stage: Stage) -> int:
        return {
            Stage.PREFILL: self.prefill_batch,
            Stage.COMPRESS: self.compress_batch,
            Stage.DECODE: self.decode_batch,
        }[stage]


@dataclass
class DynamicPolicy:
    """Adaptive min/max batch bounds shared by all stages.

    ``min_batch`` is the only mutable scheduler state; adjust_min_batch
    retunes it from observed queue depths during a run.
    """

    min_batch: int = 6
    max_batch: int = 64
    max_wait_s: float = 3.0
    aging: bool = True

    def __post_init__(self) -> None:
        if not (1 <= self.min_batch <= self.max_batch):
            raise ValueError("need 1 <= min_batch <= max_batch")
        if self.max_wait_s < 0:
            raise ValueError("max_wait_s must be >= 0")


SchedulerPolicy = FCFSPolicy | StaticPolicy | DynamicPolicy


def parse_policy(text: str) -> SchedulerPolicy:
    """Parse a policy string; see the module docstring for the grammar."""
    text = text.strip()
    if text == "fcfs":
        return FCFSPolicy()
    if text == "dynamic":
        return DynamicPolicy()
    if text.startswith("static:"):
        body = text[len("static:") :]
        m = re.fullmatch(r"p(\d+)c(\d+)d(\d+)", body)
        if not m:
            raise PolicyParseError(f"bad static policy {text!r}, expected static:pXcYdZ")
        x, y, z = (int(g) for g in m.groups())
        if min(x, y, z) < 1:
            raise PolicyParseError("static batch sizes must be >= 1")
        return StaticPolicy(x, y, z)
    if text.startswith("dynamic:"):
        fields: dict[str, str] = {}
        for part in text[len("dynamic:") :].split(","):
            if "=" not in part:
                raise PolicyParseError(f"bad dynamic policy field {part!r}")
            key, value = part.split("=", 1)
            fields[key.strip()] = value.strip()
        unknown = set(fields) - {"bmin", "bmax", "wmax_ms", "aging"}
        if unknown:
            raise PolicyParseError(f"unknown dynamic policy fields {sorted(unknown)}")
        try:
            bmin = int(fields.get("bmin", "6"))
            bmax = int(fields.get("bmax", "64"))
            wmax_ms = float(fields.get("wmax_ms", "3000"))
        except ValueError as exc:
            raise PolicyParseError(f"bad dynamic policy number: {exc}") from exc
        aging_text = fields.get("aging", "on")
        if aging_text not in ("on", "off"):
            raise PolicyParseError("aging must be 'on' or 'off'")
        if not (1 <= bmin <= bmax):
            raise PolicyParseError("need 1 <= bmin <= bmax")
        if wmax_ms < 0:
            raise PolicyParseError("wmax_ms must be >= 0")
        return DynamicPolicy(bmin, bmax, wmax_ms / 1000.0, aging_text == "on")
    raise PolicyParseError(f"unrecognized policy {text!r}")


def policy_to_string(policy: SchedulerPolicy) -> str:
    if isinstance(policy, FCFSPolicy):
        return "fcfs"
    if isinstance(policy, StaticPolicy):
        return f"static:p{policy.prefill_batch}c{policy.compress_batch}d{policy.decode_batch}"
    aging = "on" if policy.aging else "off"
    wmax_ms = policy.max_wait_s * 1000.0
    wmax = int(wmax_ms) if wmax_ms == int(wmax_ms) else wmax_ms
    return f"dynamic:bmin={policy.min_batch},bmax={policy.max_batch},wmax_ms={wmax},aging={aging}"


def wait_rule_s(policy: SchedulerPolicy) -> float | None:
    """Timeout after which a waiting queue head forces dispatch, if any."""
    if isinstance(policy, StaticPolicy):
        return policy.anti_stall_s
    if isinstance(policy, DynamicPolicy):
        return policy.max_wait_s
    return None


# ---------------------------------------------------------------------------
# queues and batch decisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueueEntry:
    request_id: int
    enqueue_time: float
    estimated_bytes: int


@dataclass
class StageQueue:
    """FIFO of requests waiting for one stage; enqueue order is preserved."""

    stage: Stage
    entries: list[QueueEntry] = field(default_factory=list)

    def enqueue(self, entry: QueueEntry) -> None:
        if self.entries and entry.enqueue_time < self.entries[-1].enqueue_time:
            raise ValueError("enqueue times must be non-decreasing")
        self.entries.append(entry)

    def take(self, request_ids: Iterable[int]) -> list[QueueEntry]:
        """Remove the given members, preserving the order of the rest."""
        wanted = set(request_ids)
        taken = [e for e in self.entries if e.request_id in wanted]
        if len(taken) != len(wanted):
            raise KeyError("batch member missing from queue")
        self.entries = [e for e in self.entries if e.request_id not in wanted]
        return taken

    def oldest_wait_s(self, now: float) -> float:
        return now - self.entries[0].enqueue_time if self.entries else 0.0

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BatchDecision:
    stage: Stage
    member_request_ids: tuple[int, ...]
    formed_at: float

    def __post_init__(self) -> None:
        if not self.member_request_ids:
            raise ValueError("a batch needs at least one member")


# ---------------------------------------------------------------------------
# decision functions
# ---------------------------------------------------------------------------


# wake-up timers land at enqueue_time + wait with float error, so the
# threshold compare needs slack or the timer event can test as "not yet"
_WAIT_SLACK_S = 1e-9


def should_dispatch(queue: StageQueue, policy: SchedulerPolicy, now: float) -> bool:
    """Whether an idle stage should form a batch from this queue now."""
    n = len(queue)
    if n == 0:
        return False
    if isinstance(policy, FCFSPolicy):
        return True
    if isinstance(policy, StaticPolicy):
        return n >= policy.stage_size(queue.stage) or (
            queue.oldest_wait_s(now) >= policy.anti_stall_s - _WAIT_SLACK_S
        )
    return (
        n >= policy.min_batch
        or queue.oldest_wait_s(now) >= policy.max_wait_s - _WAIT_SLACK_S
    )


def max_feasible_batch(
    queue: StageQueue,
    budget_bytes: int,
    max_batch: int,
    *,
    now: float = 0.0,
    max_wait_s: float | None = None,
    aging: bool = False,
) -> BatchDecision:
    """Largest batch that fits the byte budget, capped at ``max_batch``.

    Members are chosen smallest-first (ties broken by arrival order), which
    maximizes the member count and, among count-maximal subsets, minimizes
    total bytes. With aging enabled, entries that have waited at least
    ``max_wait_s`` are force-included first (in arrival order) whenever they
    individually fit, so byte-greedy packing cannot starve large requests.
    """
    if budget_bytes < 0:
        budget_bytes = 0
    chosen: list[QueueEntry] = []
    remaining = budget_bytes
    taken_ids: set[int] = set()
    if aging and max_wait_s is not None:
        for entry in queue.entries:
            if len(chosen) >= max_batch:
                break
            aged = now - entry.enqueue_time >= max_wait_s - _WAIT_SLACK_S
            if aged and entry.estimated_bytes <= remaining:
                chosen.append(entry)
                taken_ids.add(entry.request_id)
                remaining -= entry.estimated_bytes
    rest = [e for e in queue.entries if e.request_id not in taken_ids]
    rest.sort(key=lambda e: e.estimated_bytes)  # stable: FIFO among equal sizes
    for entry in rest:
        if len(chosen) >= max_batch:
            break
        if entry.estimated_bytes > remaining:
            break  # sorted ascending: nothing later fits either
        chosen.append(entry)
        remaining -= entry.estimated_bytes
    if not chosen:
        raise EmptyBatch(f"no {queue.stage.value} entry fits {budget_bytes} bytes")
    return BatchDecision(
        stage=queue.stage,
        member_request_ids=tuple(e.request_id for e in chosen),
        formed_at=now,
    )


def form_stage_batch(
    stage: Stage,
    queue: StageQueue,
    policy: SchedulerPolicy,
    budget_bytes: int,
    now: float,
) -> BatchDecision:
    """Form the batch to dispatch for ``stage``; assumes should_dispatch held.

    FCFS and static policies keep FIFO order and take the longest prefix of
    their candidate set that fits the budget; they stall (EmptyBatch) when
    even the head does not fit. The dynamic policy packs by bytes.
    """
    if not queue.entries:
        raise EmptyBatch(f"{stage.value} queue is empty")
    if isinstance(policy, DynamicPolicy):
        return max_feasible_batch(
            queue,
            budget_bytes,
            policy.max_batch,
            now=now,
            max_wait_s=policy.max_wait_s,
            aging=policy.aging,
        )
    if isinstance(policy, FCFSPolicy):
        candidates: Sequence[QueueEntry] = queue.entries[:1]
    else:
        size = policy.stage_size(stage)
        if len(queue) >= size:
            candidates = queue.entries[:size]
        else:
            candidates = queue.entries  # anti-stall flush of a partial tail
    chosen: list[QueueEntry] = []
    remaining = budget_bytes
    for entry in candidates:
        if entry.estimated_bytes > remaining:
            break  # FIFO prefix only: later entries must keep waiting
        chosen.append(entry)
        remaining -= entry.estimated_bytes
    if not chosen:
        raise EmptyBatch(f"no {stage.value} entry fits {budget_bytes} bytes")
    return BatchDecision(
        stage=stage,
        member_request_ids=tuple(e.request_id for e in chosen),
        formed_at=now,
    )


def adjust_min_batch(depth_window: Sequence[int], policy: DynamicPolicy) -> int:
    """Retune min_batch from an EMA of recent queue depths.

    new min_batch = clamp(round(ema), 1, max_batch); Python's banker's
    rounding keeps the update deterministic. An empty window is a no-op.
    """
    if len(depth_window) == 0:
        return policy.min_batch
    ema = float(depth_window[0])
    for depth in depth_window[1:]:
        ema = EMA_ALPHA * float(depth) + (1.0 - EMA_ALPHA) * ema
    policy.min_batch = min(max(round(ema), 1), policy.max_batch)
    return policy.min_batch
