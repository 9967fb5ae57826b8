"""Pool accounting: strict admission, transitions, conservation."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvservesim.kv import CompressorSpec, ModelConfig, compressed_spec, kv_bytes, split_modalities
from kvservesim.pool import (
    CapacityExceeded,
    DoubleFree,
    HandleState,
    InvalidState,
    KVCachePool,
    PoolMode,
)

MODEL = ModelConfig("llava-7b", 32, 32, 128, 2)
PTB = MODEL.bytes_per_token  # 524288
COMP = CompressorSpec(factor=5)


def make_pool(capacity_tokens: int, mode: PoolMode = PoolMode.POOLED) -> KVCachePool:
    return KVCachePool(MODEL, capacity_bytes=capacity_tokens * PTB, mode=mode)


def test_allocate_charges_exact_bytes():
    pool = make_pool(1000)
    spec = split_modalities(576, 32)
    handle = pool.allocate(0, spec, now=0.0)
    assert handle.state is HandleState.RAW
    assert handle.bytes == kv_bytes(MODEL, 608)
    assert pool.current_bytes == handle.bytes
    assert pool.peak_bytes == handle.bytes
    assert pool.stats().live_handles == 1
    assert pool.stats().allocation_count == 1


def test_allocate_exact_fit_and_one_over():
    pool = make_pool(608)
    pool.allocate(0, split_modalities(576, 32), now=0.0)  # fills it exactly
    assert pool.available_bytes == 0
    with pytest.raises(CapacityExceeded):
        pool.allocate(1, split_modalities(0, 1), now=1.0)


def test_pooled_transition_swaps_in_one_step():
    pool = make_pool(1000)
    raw = split_modalities(576, 32)
    handle = pool.allocate(0, raw, now=0.0)
    comp = compressed_spec(raw, COMP)  # 116 + 7 = 123 tokens
    pool.transition_compressed(handle, comp, now=1.0)
    assert handle.state is HandleState.COMPRESSED
    assert handle.bytes == kv_bytes(MODEL, 123)
    assert pool.current_bytes == kv_bytes(MODEL, 123)
    assert pool.stats().zombie_bytes_reclaimed == kv_bytes(MODEL, 608 - 123)
    assert not pool.zombie_coexistence_observed
    # peak never saw raw + compressed together
    assert pool.peak_bytes == kv_bytes(MODEL, 608)


def test_legacy_transition_retains_raw():
    pool = make_pool(1000, PoolMode.LEGACY_ZOMBIE)
    raw = split_modalities(576, 32)
    handle = pool.allocate(0, raw, now=0.0)
    comp = compressed_spec(raw, COMP)
    pool.transition_compressed(handle, comp, now=1.0)
    assert pool.current_bytes == kv_bytes(MODEL, 608 + 123)
    assert handle.retained_raw_bytes == kv_bytes(MODEL, 608)
    assert pool.zombie_coexistence_observed
    assert pool.stats().zombie_bytes_reclaimed == 0
    pool.release(handle, now=2.0)
    assert pool.current_bytes == 0


def test_legacy_transition_can_exceed_capacity():
    # raw fits, raw + compressed does not
    pool = make_pool(700, PoolMode.LEGACY_ZOMBIE)
    raw = split_modalities(576, 32)
    handle = pool.allocate(0, raw, now=0.0)
    with pytest.raises(CapacityExceeded):
        pool.transition_compressed(handle, compressed_spec(raw, COMP), now=1.0)


def test_transition_requires_raw_state():
    pool = make_pool(1000)
    raw = split_modalities(10, 10)
    handle = pool.allocate(0, raw, now=0.0)
    comp = compressed_spec(raw, COMP)
    pool.transition_compressed(handle, comp, now=1.0)
    with pytest.raises(InvalidState):
        pool.transition_compressed(handle, comp, now=2.0)


def test_append_decode_tokens():
    pool = make_pool(1000)
    raw = split_modalities(10, 10)
    handle = pool.allocate(0, raw, now=0.0)
    with pytest.raises(InvalidState):
        pool.append_decode_tokens(handle, 1, now=0.5)  # still raw
    pool.transition_compressed(handle, compressed_spec(raw, COMP), now=1.0)
    before = handle.bytes
    pool.append_decode_tokens(handle, 3, now=2.0)
    assert handle.bytes == before + kv_bytes(MODEL, 3)
    assert handle.spec.decode_appended_tokens == 3
    with pytest.raises(ValueError):
        pool.append_decode_tokens(handle, 0, now=3.0)


def test_append_respects_capacity():
    pool = make_pool(5)
    handle = pool.allocate(0, split_modalities(0, 4), now=0.0)
    pool.transition_compressed(handle, compressed_spec(split_modalities(0, 4), COMP), 1.0)
    pool.append_decode_tokens(handle, 4, now=2.0)  # 1 + 4 = 5 tokens, exact fit
    with pytest.raises(CapacityExceeded):
        pool.append_decode_tokens(handle, 1, now=3.0)


def test_release_and_double_free():
    pool = make_pool(100)
    handle = pool.allocate(0, split_modalities(5, 5), now=0.0)
    pool.release(handle, now=1.0)
    assert handle.state is HandleState.FREED
    assert pool.current_bytes == 0
    assert pool.stats().live_handles == 0
    with pytest.raises(DoubleFree):
        pool.release(handle, now=2.0)


def test_memory_trace_and_ledger_replay():
    pool = make_pool(1000)
    raw = split_modalities(100, 50)
    h = pool.allocate(0, raw, now=0.0)
    pool.transition_compressed(h, compressed_spec(raw, COMP), now=1.0)
    pool.append_decode_tokens(h, 7, now=2.0)
    pool.release(h, now=3.0)
    times = [s.time_s for s in pool.memory_trace]
    assert times == sorted(times)
    # ledger deltas replay to the trace's running total
    running = 0
    for entry, sample in zip(pool.ledger, pool.memory_trace):
        running += entry.delta_bytes
        assert running == sample.current_bytes
    assert running == 0
    pool.verify_conservation()


def test_snapshot_records_sample():
    pool = make_pool(100)
    n_before = len(pool.memory_trace)
    stats = pool.snapshot(now=5.0)
    assert len(pool.memory_trace) == n_before + 1
    assert stats.current_bytes == 0
    assert stats.capacity_bytes == 100 * PTB


def test_capacity_validation():
    with pytest.raises(ValueError):
        KVCachePool(MODEL, capacity_bytes=0)


@given(
    st.lists(
        st.tuples(
            st.integers(min_value=1, max_value=50),  # image tokens
            st.integers(min_value=0, max_value=50),  # text tokens
            st.integers(min_value=0, max_value=10),  # decode appends
        ),
        min_size=1,
        max_size=12,
    )
)
def test_conservation_over_full_lifecycles(reqs):
    pool = make_pool(100_000)
    now = 0.0
    handles = []
    for rid, (img, txt, appends) in enumerate(reqs):
        raw = split_modalities(img, txt)
        h = pool.allocate(rid, raw, now=now)
        now += 1.0
        pool.transition_compressed(h, compressed_spec(raw, COMP), now=now)
        now += 1.0
        if appends:
            pool.append_decode_tokens(h, appends, now=now)
            now += 1.0
        handles.append(h)
        pool.verify_conservation()
    for h in handles:
        pool.release(h, now=now)
        now += 1.0
        pool.verify_conservation()
    assert pool.current_bytes == 0
    assert pool.stats().live_handles == 0
