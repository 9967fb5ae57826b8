"""Model geometry, cache specs, and the chunked compressor."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvservesim.kv import (
    AlreadyCompressed,
    CompressorSpec,
    EmptyInput,
    EmptyRequest,
    KVCacheSpec,
    KVSegment,
    MapKind,
    Modality,
    ModelConfig,
    chunk_weights,
    compress_tensor,
    compressed_spec,
    kv_bytes,
    split_modalities,
)

LLAMA70B = ModelConfig("llama-70b", 80, 8, 128, 2)
LLAVA7B = ModelConfig("llava-7b", 32, 32, 128, 2)


def ceil_div(n: int, k: int) -> int:
    return math.ceil(n / k)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def test_bytes_per_token_closed_form():
    assert LLAMA70B.bytes_per_token == 2 * 80 * 8 * 128 * 2 == 327_680
    assert LLAVA7B.bytes_per_token == 2 * 32 * 32 * 128 * 2 == 524_288


def test_kv_bytes_million_tokens_exact():
    # one million cached tokens on the 80-layer GQA geometry
    assert kv_bytes(LLAMA70B, 1_000_000) == 327_680_000_000


def test_kv_bytes_zero_and_negative():
    assert kv_bytes(LLAVA7B, 0) == 0
    with pytest.raises(ValueError):
        kv_bytes(LLAVA7B, -1)


def test_kv_bytes_no_overflow():
    # arbitrary-precision ints: absurd token counts still exact
    assert kv_bytes(LLAMA70B, 10**15) == 327_680 * 10**15


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(num_layers=0),
        dict(num_kv_heads=0),
        dict(head_dim=-1),
        dict(bytes_per_element=3),
    ],
)
def test_model_config_validation(kwargs):
    base = dict(num_layers=32, num_kv_heads=32, head_dim=128, bytes_per_element=2)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ModelConfig("bad", **base)


# ---------------------------------------------------------------------------
# cache specs
# ---------------------------------------------------------------------------


def test_split_modalities_ordering():
    spec = split_modalities(576, 32)
    assert [s.modality for s in spec.segments] == [Modality.IMAGE, Modality.TEXT]
    assert [s.token_count for s in spec.segments] == [576, 32]
    assert spec.total_tokens == 608
    assert not spec.is_compressed


def test_split_modalities_drops_empty_segments():
    assert len(split_modalities(576, 0).segments) == 1
    assert len(split_modalities(0, 32).segments) == 1


def test_split_modalities_rejects_empty_request():
    with pytest.raises(EmptyRequest):
        split_modalities(0, 0)
    with pytest.raises(ValueError):
        split_modalities(-1, 5)


def test_spec_rejects_text_before_image():
    with pytest.raises(ValueError):
        KVCacheSpec(
            segments=(
                KVSegment(Modality.TEXT, 4),
                KVSegment(Modality.IMAGE, 4),
            )
        )


def test_compressed_spec_ceil_per_segment():
    spec = split_modalities(7, 11)
    out = compressed_spec(spec, CompressorSpec(factor=5))
    assert [s.token_count for s in out.segments] == [2, 3]
    assert [s.original_token_count for s in out.segments] == [7, 11]
    assert out.is_compressed


def test_compressed_spec_factor_one_is_identity_on_counts():
    spec = split_modalities(576, 32)
    out = compressed_spec(spec, CompressorSpec(factor=1))
    assert [s.token_count for s in out.segments] == [576, 32]
    assert out.is_compressed  # still marked; identity map, not a no-op


def test_compress_twice_rejected():
    spec = split_modalities(10, 10)
    once = compressed_spec(spec, CompressorSpec(factor=2))
    with pytest.raises(AlreadyCompressed):
        compressed_spec(once, CompressorSpec(factor=2))


def test_compress_after_decode_append_rejected():
    spec = split_modalities(10, 10)
    grown = KVCacheSpec(segments=spec.segments, decode_appended_tokens=3)
    with pytest.raises(ValueError):
        compressed_spec(grown, CompressorSpec(factor=2))


@given(
    image=st.integers(min_value=0, max_value=20_000),
    text=st.integers(min_value=0, max_value=20_000),
    factor=st.integers(min_value=1, max_value=64),
)
def test_compressed_token_counts_property(image, text, factor):
    if image + text == 0:
        return
    spec = split_modalities(image, text)
    out = compressed_spec(spec, CompressorSpec(factor=factor))
    for seg in out.segments:
        assert seg.token_count == ceil_div(seg.original_token_count, factor)


@given(
    chunks_img=st.integers(min_value=1, max_value=500),
    chunks_txt=st.integers(min_value=1, max_value=500),
)
def test_divisible_lengths_compress_to_exact_fifth(chunks_img, chunks_txt):
    # factor 5 with multiple-of-5 segment lengths: bytes shrink by exactly 5x
    spec = split_modalities(5 * chunks_img, 5 * chunks_txt)
    out = compressed_spec(spec, CompressorSpec(factor=5))
    assert kv_bytes(LLAVA7B, spec.total_tokens) == 5 * kv_bytes(LLAVA7B, out.total_tokens)


# ---------------------------------------------------------------------------
# tensor compression
# ---------------------------------------------------------------------------


def test_compress_tensor_row_count():
    x = np.arange(7 * 3, dtype=np.float64).reshape(7, 3)
    out = compress_tensor(x, CompressorSpec(factor=5))
    assert out.shape == (2, 3)


def test_meanpool_exact_values():
    x = np.array([[0.0, 2.0], [2.0, 4.0], [10.0, 0.0]])
    out = compress_tensor(x, CompressorSpec(factor=2, map_kind=MapKind.MEAN_POOL))
    np.testing.assert_array_equal(out[0], [1.0, 3.0])
    np.testing.assert_array_equal(out[1], [10.0, 0.0])  # partial chunk of one row


def test_meanpool_factor_one_bit_identical():
    x = np.random.default_rng(5).random((9, 4))
    out = compress_tensor(x, CompressorSpec(factor=1, map_kind=MapKind.MEAN_POOL))
    np.testing.assert_array_equal(out, x)


def test_seeded_linear_deterministic():
    x = np.random.default_rng(6).random((20, 8))
    comp = CompressorSpec(factor=4, map_kind=MapKind.SEEDED_LINEAR, seed=99)
    np.testing.assert_array_equal(compress_tensor(x, comp), compress_tensor(x, comp))
    other = CompressorSpec(factor=4, map_kind=MapKind.SEEDED_LINEAR, seed=100)
    assert not np.array_equal(compress_tensor(x, comp), compress_tensor(x, other))


def test_chunk_weights_sum_to_one():
    for kind in MapKind:
        w = chunk_weights(CompressorSpec(factor=7, map_kind=kind))
        assert w.shape == (7,)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_seeded_linear_partial_chunk_renormalized():
    comp = CompressorSpec(factor=3, map_kind=MapKind.SEEDED_LINEAR, seed=7)
    x = np.random.default_rng(8).random((5, 2))
    out = compress_tensor(x, comp)
    w = chunk_weights(comp)
    tail_w = w[:2] / w[:2].sum()
    np.testing.assert_allclose(out[1], tail_w @ x[3:5], rtol=1e-12)


def test_compress_tensor_errors():
    comp = CompressorSpec(factor=2)
    with pytest.raises(EmptyInput):
        compress_tensor(np.empty((0, 4)), comp)
    with pytest.raises(ValueError):
        compress_tensor(np.zeros(5), comp)
    with pytest.raises(ValueError):
        CompressorSpec(factor=0)


@given(
    n=st.integers(min_value=1, max_value=400),
    k=st.integers(min_value=1, max_value=64),
    kind=st.sampled_from(list(MapKind)),
)
def test_compress_tensor_rows_property(n, k, kind):
    x = np.ones((n, 2))
    out = compress_tensor(x, CompressorSpec(factor=k, map_kind=kind))
    assert out.shape == (ceil_div(n, k), 2)
    # convex combinations of all-ones rows stay all-ones
    np.testing.assert_allclose(out, 1.0, rtol=1e-9)
