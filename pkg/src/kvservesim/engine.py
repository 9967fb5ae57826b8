"""Deterministic discrete-event simulation of the serving pipeline.

Three stages — prefill, compress, decode — run as independent executors
connected by FIFO stage queues (single producer, single consumer each).
Each executor runs at most one batch at a time; batches run to completion
and decode admits no mid-flight joins. Stage durations come from an affine
cost model in simulated seconds; nothing here consumes wall clock.

Event ordering is a heap keyed by (time, seq) where seq is a global
monotone counter, so identical inputs replay identical event sequences and
byte-identical artifacts.

Memory admission: before dispatching any batch the engine checks that the
batch's byte obligations fit ``capacity - pool.current - reserved``, where
``reserved`` tracks in-flight obligations (raw bytes a running prefill will
allocate, the compressed delta a legacy-mode transition will charge, and
the remaining decode-growth headroom of active decode members). Stages
stall instead of overcommitting, so the pool's strict admission can never
fire mid-run; FIFO policies simply suffer head-of-line blocking under
memory pressure.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

from .kv import CompressorSpec, ModelConfig, compressed_spec, kv_bytes, split_modalities
from .metrics import RequestRecord
from .pool import CacheHandle, KVCachePool, PoolMode
from .scheduling import (
    BatchDecision,
    DynamicPolicy,
    EmptyBatch,
    QueueEntry,
    SchedulerPolicy,
    Stage,
    StageQueue,
    StaticPolicy,
    adjust_min_batch,
    form_stage_batch,
    should_dispatch,
    wait_rule_s,
)
from .workload import RequestSpec

DEFAULT_MAX_EVENTS = 5_000_000
DEPTH_WINDOW = 16


class ConfigError(ValueError):
    """Simulation inputs that cannot produce a meaningful run."""


class CompressMode(str, Enum):
    LINEAR = "linear"
    ATTENTION = "attention"


@dataclass(frozen=True)
class CostModel:
    """Affine stage-latency coefficients, in simulated seconds.

    Compression cost has two regimes: ``linear`` charges one batched pass
    proportional to total tokens; ``attention`` charges a per-request
    sequential sum of layers*tokens*heads*head_dim work that additionally
    scales with batch size, modeling quadratic-in-concurrency attention
    compression.
    """

    prefill_base_s: float = 0.1
    prefill_per_token_s: float = 2e-6
    compress_mode: CompressMode = CompressMode.LINEAR
    compress_base_s: float = 0.01
    compress_per_token_s: float = 1e-5
    compress_attention_scale_s: float = 1466.0
    decode_step_base_s: float = 0.0105
    decode_step_per_seq_s: float = 0.0
    decode_step_per_ctx_token_s: float = 2e-7

    def __post_init__(self) -> None:
        for attr in (
            "prefill_base_s",
            "prefill_per_token_s",
            "compress_base_s",
            "compress_per_token_s",
            "compress_attention_scale_s",
            "decode_step_base_s",
            "decode_step_per_seq_s",
            "decode_step_per_ctx_token_s",
        ):
            if getattr(self, attr) < 0:
                raise ValueError(f"{attr} must be >= 0")


# Coefficients are synthetic design values, calibrated so that desk-scale
# runs reproduce the reference serving trends (single-stream decode is
# base-dominated and slow; batching amortizes it; attention-mode compression
# of a typical request costs ~3.66 s).
COST_PRESETS: dict[str, CostModel] = {
    "h100-llava7b-default": CostModel(),
}


def stage_duration(
    stage: Stage,
    cost: CostModel,
    model: ModelConfig,
    *,
    input_tokens: int | None = None,
    kv_token_counts: Sequence[int] | None = None,
    active_seqs: int | None = None,
    context_tokens: int | None = None,
) -> float:
    """Duration of one batched stage execution (or one decode step).

    Prefill wants the batch's summed input tokens; compress wants each
    member's raw cached-token count; a decode step wants the number of
    active sequences and their summed current context tokens.
    """
    if stage is Stage.PREFILL:
        if input_tokens is None:
            raise ValueError("prefill duration needs input_tokens")
        return cost.prefill_base_s + cost.prefill_per_token_s * input_tokens
    if stage is Stage.COMPRESS:
        if kv_token_counts is None:
            raise ValueError("compress duration needs kv_token_counts")
        if cost.compress_mode is CompressMode.LINEAR:
            return cost.compress_base_s + cost.compress_per_token_s * sum(kv_token_counts)
        per_request = sum(kv_token_counts) * model.num_kv_heads * model.head_dim / 1e9
        return cost.compress_base_s + (
            cost.compress_attention_scale_s * len(kv_token_counts) * per_request
        )
    if active_seqs is None or context_tokens is None:
        raise ValueError("decode step duration needs active_seqs and context_tokens")
    return (
        cost.decode_step_base_s
        + cost.decode_step_per_seq_s * active_seqs
        + cost.decode_step_per_ctx_token_s * context_tokens
    )


# ---------------------------------------------------------------------------
# decode planning
# ---------------------------------------------------------------------------


class DecodeMember(NamedTuple):
    request_id: int
    max_new_tokens: int
    start_ctx_tokens: int


class DecodeStepPlan(NamedTuple):
    end_offset: float
    member_ids: tuple[int, ...]  # active during this step; each emits 1 token
    completing_ids: tuple[int, ...]  # subset that finishes at step end


@dataclass(frozen=True)
class DecodePlan:
    steps: tuple[DecodeStepPlan, ...]
    completion_offsets: dict[int, float]

    @property
    def first_token_offset(self) -> float:
        return self.steps[0].end_offset


def plan_decode(members: Sequence[DecodeMember], cost: CostModel) -> DecodePlan:
    """Step schedule for one decode batch run to completion.

    Every active member emits one token per step; members that reach their
    output budget drop out and later steps get cheaper. The first output
    token of every member lands at the end of step one, which is what makes
    time-to-first-token include compression and queueing but only a single
    decode step.
    """
    if not members:
        raise ValueError("decode batch needs at least one member")
    emitted = {m.request_id: 0 for m in members}
    active = list(members)
    steps: list[DecodeStepPlan] = []
    completion: dict[int, float] = {}
    t = 0.0
    while active:
        ctx = sum(m.start_ctx_tokens + emitted[m.request_id] for m in active)
        t += stage_duration(
            Stage.DECODE, cost, _DURATION_MODEL, active_seqs=len(active), context_tokens=ctx
        )
        completing = []
        for m in active:
            emitted[m.request_id] += 1
            if emitted[m.request_id] >= m.max_new_tokens:
                completing.append(m.request_id)
                completion[m.request_id] = t
        steps.append(
            DecodeStepPlan(
                end_offset=t,
                member_ids=tuple(m.request_id for m in active),
                completing_ids=tuple(completing),
            )
        )
        active = [m for m in active if emitted[m.request_id] < m.max_new_tokens]
    return DecodePlan(steps=tuple(steps), completion_offsets=completion)


# Decode step cost does not depend on model geometry; a placeholder keeps
# stage_duration's signature uniform.
_DURATION_MODEL = ModelConfig("unused", 1, 1, 1, 2)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


class EventKind(str, Enum):
    ARRIVAL = "arrival"
    STAGE_COMPLETE = "stage_complete"
    DECODE_STEP = "decode_step"
    QUEUE_TIMER = "queue_timer"


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: EventKind
    request_id: int | None = None
    stage: Stage | None = None
    batch_id: int | None = None
    step_index: int | None = None


@dataclass
class SimOutput:
    """Everything a run produces, before metric aggregation."""

    records: list[RequestRecord]
    pool: KVCachePool
    n_events: int
    n_decode_steps: int
    diverged: bool
    avg_in_flight: float
    first_arrival_s: float
    last_completion_s: float
    stage_intervals: dict[Stage, list[tuple[float, float, int]]]


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------


class Simulator:
    def __init__(
        self,
        requests: Sequence[RequestSpec],
        *,
        model: ModelConfig,
        compressor: CompressorSpec,
        cost: CostModel,
        policy: SchedulerPolicy,
        capacity_bytes: int,
        pool_mode: PoolMode = PoolMode.POOLED,
        coupled: bool = False,
        max_events: int = DEFAULT_MAX_EVENTS,
    ):
        ids = [r.request_id for r in requests]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate request ids")
        if any(b.arrival_time < a.arrival_time for a, b in zip(requests, requests[1:])):
            raise ConfigError("requests must be sorted by arrival time")
        self.requests = {r.request_id: r for r in requests}
        self.model = model
        self.compressor = compressor
        self.cost = cost
        # the dynamic policy mutates min_batch during the run; keep our own copy
        self.policy: SchedulerPolicy = (
            DynamicPolicy(policy.min_batch, policy.max_batch, policy.max_wait_s, policy.aging)
            if isinstance(policy, DynamicPolicy)
            else policy
        )
        self.pool = KVCachePool(model, capacity_bytes, pool_mode)
        self.coupled = coupled
        self.max_events = max_events

        ptb = model.bytes_per_token
        self._raw_spec = {}
        self._raw_bytes = {}
        self._compressed_bytes = {}
        self._headroom = {}
        for r in requests:
            spec = split_modalities(r.image_tokens, r.text_tokens)
            self._raw_spec[r.request_id] = spec
            self._raw_bytes[r.request_id] = kv_bytes(model, spec.total_tokens)
            ctokens = compressed_spec(spec, compressor).total_tokens
            self._compressed_bytes[r.request_id] = kv_bytes(model, ctokens)
            self._headroom[r.request_id] = r.max_new_tokens * ptb
        self._decode_safety = max(self._headroom.values(), default=0)
        # legacy mode keeps raw caches allocated until completion, so a full
        # pool of raw entries would wedge the compressor; hold back room for
        # one compressed output the same way decode holds back headroom
        self._compress_safety = (
            max(self._compressed_bytes.values(), default=0)
            if pool_mode is PoolMode.LEGACY_ZOMBIE
            else 0
        )
        for r in requests:
            worst = self._compressed_bytes[r.request_id] + self._headroom[r.request_id]
            if pool_mode is PoolMode.LEGACY_ZOMBIE:
                worst += self._raw_bytes[r.request_id]
            else:
                worst = max(worst, self._raw_bytes[r.request_id])
            if worst > capacity_bytes:
                raise ConfigError(
                    f"request {r.request_id} needs {worst} bytes, over pool capacity"
                )

        self.queues = {stage: StageQueue(stage) for stage in Stage}
        self._queued_ids: set[int] = set()
        self.records: dict[int, RequestRecord] = {}
        self.handles: dict[int, CacheHandle] = {}
        self.reserved_bytes = 0
        self._depth_window: list[int] = []

        group = (lambda s: "pd" if s in (Stage.PREFILL, Stage.DECODE) else "c") if coupled else (lambda s: s.value)
        self._group = group
        self._busy: dict[str, bool] = {group(s): False for s in Stage}
        self._pass_order = (
            (Stage.DECODE, Stage.COMPRESS, Stage.PREFILL)
            if coupled
            else (Stage.PREFILL, Stage.COMPRESS, Stage.DECODE)
        )

        self._heap: list[tuple[float, int, Event]] = []
        self._seq = itertools.count()
        self._exec_batches: dict[int, tuple[int, ...]] = {}
        self._decode_plans: dict[int, tuple[float, DecodePlan]] = {}
        self._next_batch_id = 0

        self.n_events = 0
        self.n_decode_steps = 0
        self.diverged = False
        self._in_flight = 0
        self._area = 0.0
        self._last_t = 0.0
        self._n_completed = 0
        self._first_arrival = requests[0].arrival_time if requests else 0.0
        self._last_completion = 0.0
        self.stage_intervals: dict[Stage, list[tuple[float, float, int]]] = {
            s: [] for s in Stage
        }

    # -- plumbing ------------------------------------------------------------

    def _push(self, event: Event) -> None:
        heapq.heappush(self._heap, (event.time, event.seq, event))

    def _make_event(self, time: float, kind: EventKind, **kw) -> Event:
        return Event(time=time, seq=next(self._seq), kind=kind, **kw)

    def _budget(self, stage: Stage) -> int:
        free = self.pool.capacity_bytes - self.pool.current_bytes - self.reserved_bytes
        if stage is not Stage.DECODE:
            # keep enough slack that decode can always admit one request
            free -= self._decode_safety
        if stage is Stage.PREFILL:
            free -= self._compress_safety
        return max(free, 0)

    def _enqueue(self, stage: Stage, request_id: int, now: float) -> None:
        assert request_id not in self._queued_ids, "request already queued somewhere"
        if stage is Stage.PREFILL:
            est = self._raw_bytes[request_id]
        elif stage is Stage.COMPRESS:
            est = (
                self._compressed_bytes[request_id]
                if self.pool.mode is PoolMode.LEGACY_ZOMBIE
                else 0
            )
        else:
            est = self._headroom[request_id]
        self.queues[stage].enqueue(QueueEntry(request_id, now, est))
        self._queued_ids.add(request_id)
        wait = wait_rule_s(self.policy)
        if wait is not None:
            self._push(self._make_event(now + wait, EventKind.QUEUE_TIMER, stage=stage))

    # -- dispatch ------------------------------------------------------------

    def _dispatch_pass(self, now: float) -> None:
        for stage in self._pass_order:
            if self._busy[self._group(stage)]:
                continue
            queue = self.queues[stage]
            if not should_dispatch(queue, self.policy, now):
                continue
            try:
                decision = form_stage_batch(
                    stage, queue, self.policy, self._budget(stage), now
                )
            except EmptyBatch:
                continue  # memory stall: retry on a later event
            # only size-triggered formations feed the depth estimator; timeout
            # flushes are anti-starvation overrides, not a load signal, and
            # counting them would drag min_batch toward 1 whenever traffic
            # is too sparse to ever reach the threshold
            if isinstance(self.policy, DynamicPolicy) and len(queue) >= self.policy.min_batch:
                self._depth_window.append(len(queue))
                del self._depth_window[:-DEPTH_WINDOW]
                adjust_min_batch(self._depth_window, self.policy)
            queue.take(decision.member_request_ids)
            self._queued_ids.difference_update(decision.member_request_ids)
            self._start_batch(stage, decision, now)

    def _start_batch(self, stage: Stage, decision: BatchDecision, now: float) -> None:
        members = decision.member_request_ids
        batch_id = self._next_batch_id
        self._next_batch_id += 1
        self._busy[self._group(stage)] = True
        if stage is Stage.PREFILL:
            duration = stage_duration(
                stage,
                self.cost,
                self.model,
                input_tokens=sum(self.requests[r].input_tokens for r in members),
            )
            self.reserved_bytes += sum(self._raw_bytes[r] for r in members)
            for r in members:
                self.records[r].prefill_start_s = now
        elif stage is Stage.COMPRESS:
            duration = stage_duration(
                stage,
                self.cost,
                self.model,
                kv_token_counts=[self.handles[r].spec.total_tokens for r in members],
            )
            if self.pool.mode is PoolMode.LEGACY_ZOMBIE:
                self.reserved_bytes += sum(self._compressed_bytes[r] for r in members)
            for r in members:
                self.records[r].compress_start_s = now
        else:
            plan = plan_decode(
                [
                    DecodeMember(r, self.requests[r].max_new_tokens, self.handles[r].spec.total_tokens)
                    for r in members
                ],
                self.cost,
            )
            self.reserved_bytes += sum(self._headroom[r] for r in members)
            for r in members:
                self.records[r].decode_start_s = now
            self._decode_plans[batch_id] = (now, plan)
            self._exec_batches[batch_id] = members
            self._push(
                self._make_event(
                    now + plan.steps[0].end_offset,
                    EventKind.DECODE_STEP,
                    batch_id=batch_id,
                    step_index=0,
                )
            )
            return
        self._exec_batches[batch_id] = members
        self._push(
            self._make_event(
                now + duration, EventKind.STAGE_COMPLETE, stage=stage, batch_id=batch_id
            )
        )

    # -- event handlers ------------------------------------------------------

    def _on_arrival(self, event: Event) -> None:
        rid = event.request_id
        req = self.requests[rid]
        self.records[rid] = RequestRecord(
            request_id=rid,
            arrival_s=event.time,
            input_tokens=req.input_tokens,
            output_tokens=0,
        )
        self._in_flight += 1
        self._enqueue(Stage.PREFILL, rid, event.time)

    def _on_stage_complete(self, event: Event) -> None:
        stage = event.stage
        members = self._exec_batches.pop(event.batch_id)
        now = event.time
        if stage is Stage.PREFILL:
            for rid in members:
                self.handles[rid] = self.pool.allocate(rid, self._raw_spec[rid], now)
                self.reserved_bytes -= self._raw_bytes[rid]
                self.records[rid].prefill_end_s = now
                self._enqueue(Stage.COMPRESS, rid, now)
            start = self.records[members[0]].prefill_start_s
        else:
            for rid in members:
                handle = self.handles[rid]
                new_spec = compressed_spec(handle.spec, self.compressor)
                self.pool.transition_compressed(handle, new_spec, now)
                if self.pool.mode is PoolMode.LEGACY_ZOMBIE:
                    self.reserved_bytes -= self._compressed_bytes[rid]
                self.records[rid].compress_end_s = now
                self._enqueue(Stage.DECODE, rid, now)
            start = self.records[members[0]].compress_start_s
        self.stage_intervals[stage].append((start, now, event.batch_id))
        self._busy[self._group(stage)] = False

    def _on_decode_step(self, event: Event) -> None:
        batch_id = event.batch_id
        start, plan = self._decode_plans[batch_id]
        step = plan.steps[event.step_index]
        now = event.time
        ptb = self.model.bytes_per_token
        self.n_decode_steps += 1
        for rid in step.member_ids:
            self.pool.append_decode_tokens(self.handles[rid], 1, now)
            self.reserved_bytes -= ptb
            self.records[rid].output_tokens += 1
            if event.step_index == 0:
                self.records[rid].first_token_s = now
        for rid in step.completing_ids:
            record = self.records[rid]
            record.completion_s = now
            self.pool.release(self.handles[rid], now)
            self._in_flight -= 1
            self._n_completed += 1
            self._last_completion = now
        next_index = event.step_index + 1
        if next_index < len(plan.steps):
            self._push(
                self._make_event(
                    start + plan.steps[next_index].end_offset,
                    EventKind.DECODE_STEP,
                    batch_id=batch_id,
                    step_index=next_index,
                )
            )
        else:
            self._exec_batches.pop(batch_id)
            self.stage_intervals[Stage.DECODE].append((start, now, batch_id))
            del self._decode_plans[batch_id]
            self._busy[self._group(Stage.DECODE)] = False

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimOutput:
        for req in self.requests.values():
            self._push(
                self._make_event(req.arrival_time, EventKind.ARRIVAL, request_id=req.request_id)
            )
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.STAGE_COMPLETE: self._on_stage_complete,
            EventKind.DECODE_STEP: self._on_decode_step,
            EventKind.QUEUE_TIMER: lambda event: None,
        }
        while self._heap:
            if self.n_events >= self.max_events:
                self.diverged = True
                break
            time, _, event = heapq.heappop(self._heap)
            self._area += self._in_flight * (time - self._last_t)
            self._last_t = time
            self.n_events += 1
            handlers[event.kind](event)
            self._dispatch_pass(time)
            assert (
                self.pool.current_bytes + self.reserved_bytes <= self.pool.capacity_bytes
            ), "admission control overcommitted the pool"
        if not self.diverged:
            assert self._n_completed == len(self.requests), "requests stranded"
            assert all(len(q) == 0 for q in self.queues.values())
            assert not any(self._busy.values())
            self.pool.verify_conservation()
        makespan = self._last_completion - self._first_arrival
        avg_in_flight = self._area / makespan if makespan > 0 else 0.0
        records = [self.records[rid] for rid in sorted(self.records)]
        return SimOutput(
            records=records,
            pool=self.pool,
            n_events=self.n_events,
            n_decode_steps=self.n_decode_steps,
            diverged=self.diverged,
            avg_in_flight=avg_in_flight,
            first_arrival_s=self._first_arrival,
            last_completion_s=self._last_completion,
            stage_intervals=self.stage_intervals,
        )


def simulate(
    requests: Sequence[RequestSpec],
    *,
    model: ModelConfig,
    compressor: CompressorSpec,
    cost: CostModel,
    policy: SchedulerPolicy,
    capacity_bytes: int,
    pool_mode: PoolMode = PoolMode.POOLED,
    coupled: bool = False,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> SimOutput:
    """Run one simulation to completion and return its raw output."""
    return Simulator(
        requests,
        model=model,
        compressor=compressor,
        cost=cost,
        policy=policy,
        capacity_bytes=capacity_bytes,
        pool_mode=pool_mode,
        coupled=coupled,
        max_events=max_events,
    ).run()
