"""Policy parsing, dispatch predicates, and batch-formation behavior."""

import random

import pytest

from kvservesim.scheduling import (
    BatchDecision,
    DynamicPolicy,
    EMA_ALPHA,
    EmptyBatch,
    FCFSPolicy,
    PolicyParseError,
    QueueEntry,
    Stage,
    StageQueue,
    StaticPolicy,
    adjust_min_batch,
    form_stage_batch,
    max_feasible_batch,
    parse_policy,
    policy_to_string,
    should_dispatch,
    wait_rule_s,
)

GB = 10**9


def make_queue(bytes_list, stage=Stage.PREFILL, enqueue_times=None):
    q = StageQueue(stage)
    for i, b in enumerate(bytes_list):
        t = enqueue_times[i] if enqueue_times else float(i)
        q.enqueue(QueueEntry(request_id=i, enqueue_time=t, estimated_bytes=b))
    return q


# ---------------------------------------------------------------------------
# parsing and formatting
# ---------------------------------------------------------------------------


def test_parse_fcfs():
    assert isinstance(parse_policy("fcfs"), FCFSPolicy)


def test_parse_bare_dynamic_uses_defaults():
    p = parse_policy("dynamic")
    assert p == DynamicPolicy(min_batch=6, max_batch=64, max_wait_s=3.0, aging=True)


def test_parse_dynamic_fields():
    p = parse_policy("dynamic:bmin=2,bmax=16,wmax_ms=500,aging=off")
    assert (p.min_batch, p.max_batch, p.max_wait_s, p.aging) == (2, 16, 0.5, False)


def test_parse_static():
    p = parse_policy("static:p2c2d8")
    assert (p.prefill_batch, p.compress_batch, p.decode_batch) == (2, 2, 8)
    assert p.anti_stall_s == 2.0


@pytest.mark.parametrize(
    "text",
    [
        "lru",
        "static:2c2d8",
        "static:p0c1d2",
        "static:p1c1",
        "dynamic:bmin=5,bmax=2",
        "dynamic:wmax_ms=-1",
        "dynamic:foo=1",
        "dynamic:bmin=abc",
        "dynamic:aging=maybe",
        "dynamic:bmin",
    ],
)
def test_parse_rejects_bad_strings(text):
    with pytest.raises(PolicyParseError):
        parse_policy(text)


@pytest.mark.parametrize(
    "text",
    ["fcfs", "static:p3c3d6", "dynamic:bmin=6,bmax=64,wmax_ms=3000,aging=on"],
)
def test_round_trip(text):
    assert policy_to_string(parse_policy(text)) == text


def test_to_string_canonicalizes_bare_dynamic():
    assert policy_to_string(parse_policy("dynamic")) == (
        "dynamic:bmin=6,bmax=64,wmax_ms=3000,aging=on"
    )


def test_to_string_integral_wmax_has_no_decimal():
    text = policy_to_string(DynamicPolicy(max_wait_s=3.0))
    assert "wmax_ms=3000," in text
    text = policy_to_string(DynamicPolicy(max_wait_s=0.0625))
    assert "wmax_ms=62.5," in text


def test_wait_rule():
    assert wait_rule_s(FCFSPolicy()) is None
    assert wait_rule_s(StaticPolicy(1, 1, 8, anti_stall_s=0.7)) == 0.7
    assert wait_rule_s(DynamicPolicy(max_wait_s=1.5)) == 1.5


# ---------------------------------------------------------------------------
# dispatch predicate
# ---------------------------------------------------------------------------


def test_dynamic_dispatch_on_depth():
    policy = DynamicPolicy(min_batch=4, max_batch=8, max_wait_s=0.5)
    q = make_queue([1, 1, 1, 1], enqueue_times=[0.0] * 4)
    assert should_dispatch(q, policy, now=0.0)


def test_dynamic_dispatch_on_wait():
    policy = DynamicPolicy(min_batch=4, max_batch=8, max_wait_s=0.5)
    q = make_queue([1], enqueue_times=[0.0])
    assert not should_dispatch(q, policy, now=0.2)
    assert should_dispatch(q, policy, now=0.6)


def test_empty_queue_never_dispatches():
    q = StageQueue(Stage.DECODE)
    assert not should_dispatch(q, FCFSPolicy(), now=10.0)
    assert not should_dispatch(q, DynamicPolicy(), now=10.0)


def test_fcfs_dispatches_any_nonempty_queue():
    q = make_queue([5])
    assert should_dispatch(q, FCFSPolicy(), now=0.0)


def test_static_dispatch_size_or_anti_stall():
    policy = StaticPolicy(2, 2, 8)
    q = make_queue([1, 1], enqueue_times=[0.0, 0.0])
    assert should_dispatch(q, policy, now=0.0)
    q = make_queue([1], enqueue_times=[0.0])
    assert not should_dispatch(q, policy, now=1.0)
    assert should_dispatch(q, policy, now=2.0)


def test_wait_threshold_tolerates_float_roundoff():
    # timer events land at enqueue + wait computed in floats; when the sum
    # rounds down, (enqueue + wait) - enqueue < wait and a strict compare
    # would leave the queue stranded at its only wake-up
    wmax = 0.2
    enq = next(
        (b for b in (10.0**k + 0.567 for k in range(1, 12)) if (b + wmax) - b < wmax),
        None,
    )
    assert enq is not None, "no adversarial float pair found"
    policy = DynamicPolicy(min_batch=4, max_batch=8, max_wait_s=wmax)
    q = StageQueue(Stage.PREFILL)
    q.enqueue(QueueEntry(0, enq, 100))
    assert should_dispatch(q, policy, now=enq + wmax)


# ---------------------------------------------------------------------------
# queue mechanics
# ---------------------------------------------------------------------------


def test_enqueue_rejects_time_regression():
    q = make_queue([1, 1], enqueue_times=[1.0, 2.0])
    with pytest.raises(ValueError):
        q.enqueue(QueueEntry(9, 1.5, 1))


def test_take_preserves_residual_order():
    q = make_queue([10, 20, 30, 40])
    taken = q.take([2, 0])
    assert [e.request_id for e in taken] == [0, 2]
    assert [e.request_id for e in q.entries] == [1, 3]
    with pytest.raises(KeyError):
        q.take([0])


def test_batch_decision_needs_members():
    with pytest.raises(ValueError):
        BatchDecision(Stage.PREFILL, (), 0.0)


# ---------------------------------------------------------------------------
# byte-greedy packing
# ---------------------------------------------------------------------------


def test_packing_prefers_small_over_fifo():
    # queue order 30,10,25,20 GB with a 50 GB budget: smallest-first packing
    # admits {10,20} (two members, 30 GB) where FIFO would admit only {30,10}
    q = make_queue([30 * GB, 10 * GB, 25 * GB, 20 * GB])
    d = max_feasible_batch(q, 50 * GB, 4)
    assert sorted(d.member_request_ids) == [1, 3]


def test_packing_takes_all_when_budget_allows():
    q = make_queue([3, 1, 2])
    d = max_feasible_batch(q, 100, 8)
    assert sorted(d.member_request_ids) == [0, 1, 2]


def test_packing_respects_max_batch():
    q = make_queue([1, 1, 1, 1, 1, 1])
    d = max_feasible_batch(q, 100, 4)
    # equal sizes: stable sort keeps FIFO order
    assert d.member_request_ids == (0, 1, 2, 3)


def test_packing_raises_when_nothing_fits():
    q = make_queue([10, 12])
    with pytest.raises(EmptyBatch):
        max_feasible_batch(q, 9, 4)
    with pytest.raises(EmptyBatch):
        max_feasible_batch(q, 0, 4)


def test_aging_force_includes_starved_entry():
    bytes_list = [40, 10, 5]
    times = [0.0, 9.0, 9.5]
    q = make_queue(bytes_list, enqueue_times=times)
    young = max_feasible_batch(q, 50, 4, now=10.0, max_wait_s=60.0, aging=True)
    assert 0 not in young.member_request_ids  # packing skips the big head
    aged = max_feasible_batch(q, 50, 4, now=10.0, max_wait_s=5.0, aging=True)
    assert aged.member_request_ids[0] == 0  # forced in, arrival order first
    assert 2 in aged.member_request_ids


def test_aged_entry_that_cannot_fit_is_skipped():
    q = make_queue([100, 1], enqueue_times=[0.0, 0.0])
    d = max_feasible_batch(q, 50, 4, now=99.0, max_wait_s=1.0, aging=True)
    assert d.member_request_ids == (1,)


def brute_force_best(entries, budget, max_batch):
    """Exhaustive (count, -bytes)-lexicographic optimum over subsets."""
    best_count, best_bytes = 0, 0
    for mask in range(1 << len(entries)):
        members = [e for i, e in enumerate(entries) if mask >> i & 1]
        if len(members) > max_batch:
            continue
        total = sum(e.estimated_bytes for e in members)
        if total > budget:
            continue
        if len(members) > best_count or (
            len(members) == best_count and total < best_bytes
        ):
            best_count, best_bytes = len(members), total
    return best_count, best_bytes


def test_packing_matches_brute_force_on_random_queues():
    rng = random.Random(7)
    for _ in range(400):
        n = rng.randint(1, 8)
        sizes = [rng.randint(1, 40) for _ in range(n)]
        budget = rng.randint(0, 120)
        max_batch = rng.randint(1, 8)
        q = make_queue(sizes)
        want_count, want_bytes = brute_force_best(q.entries, budget, max_batch)
        if want_count == 0:
            with pytest.raises(EmptyBatch):
                max_feasible_batch(q, budget, max_batch)
            continue
        d = max_feasible_batch(q, budget, max_batch)
        got = [sizes[rid] for rid in d.member_request_ids]
        assert len(got) == want_count
        assert sum(got) == want_bytes


# ---------------------------------------------------------------------------
# per-policy batch formation
# ---------------------------------------------------------------------------


def test_fcfs_forms_singletons():
    q = make_queue([5, 1])
    d = form_stage_batch(Stage.PREFILL, q, FCFSPolicy(), budget_bytes=100, now=2.0)
    assert d.member_request_ids == (0,)
    assert d.formed_at == 2.0


def test_static_takes_exact_fifo_slice():
    policy = StaticPolicy(2, 2, 8)
    q = make_queue([5, 1, 9])
    d = form_stage_batch(Stage.PREFILL, q, policy, budget_bytes=100, now=0.0)
    assert d.member_request_ids == (0, 1)


def test_static_flushes_partial_tail():
    policy = StaticPolicy(4, 4, 8)
    q = make_queue([5, 1])
    d = form_stage_batch(Stage.PREFILL, q, policy, budget_bytes=100, now=0.0)
    assert d.member_request_ids == (0, 1)


def test_fifo_policies_stall_behind_big_head():
    # head exceeds budget: FIFO order forbids skipping it
    q = make_queue([80, 1])
    for policy in (FCFSPolicy(), StaticPolicy(2, 2, 8)):
        with pytest.raises(EmptyBatch):
            form_stage_batch(Stage.PREFILL, q, policy, budget_bytes=50, now=0.0)


def test_static_prefix_stops_at_first_misfit():
    policy = StaticPolicy(3, 3, 8)
    q = make_queue([10, 45, 5])
    d = form_stage_batch(Stage.PREFILL, q, policy, budget_bytes=50, now=0.0)
    assert d.member_request_ids == (0,)


def test_dynamic_formation_delegates_to_packing():
    policy = DynamicPolicy(min_batch=1, max_batch=4, max_wait_s=10.0, aging=False)
    q = make_queue([30 * GB, 10 * GB, 25 * GB, 20 * GB])
    d = form_stage_batch(Stage.COMPRESS, q, policy, budget_bytes=50 * GB, now=0.0)
    assert sorted(d.member_request_ids) == [1, 3]
    assert d.stage is Stage.COMPRESS


def test_form_batch_rejects_empty_queue():
    with pytest.raises(EmptyBatch):
        form_stage_batch(
            Stage.DECODE, StageQueue(Stage.DECODE), FCFSPolicy(), 100, 0.0
        )


# ---------------------------------------------------------------------------
# min-batch adaptation
# ---------------------------------------------------------------------------


def test_adjust_clamps_to_bounds():
    policy = DynamicPolicy(min_batch=6, max_batch=8)
    assert adjust_min_batch([20], policy) == 8
    assert policy.min_batch == 8
    assert adjust_min_batch([0, 0, 0], policy) == 1


def test_adjust_empty_window_is_noop():
    policy = DynamicPolicy(min_batch=6, max_batch=64)
    assert adjust_min_batch([], policy) == 6
    assert policy.min_batch == 6


def test_adjust_matches_independent_ema():
    window = [3, 9, 1, 14, 6, 2]
    policy = DynamicPolicy(min_batch=6, max_batch=64)
    got = adjust_min_batch(window, policy)
    ema = float(window[0])
    for depth in window[1:]:
        ema = EMA_ALPHA * depth + (1 - EMA_ALPHA) * ema
    assert got == min(max(round(ema), 1), 64)
