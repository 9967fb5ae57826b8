"""Model and KV-cache geometry plus the chunked sequence compressor.

A cached token's footprint follows the usual transformer layout, keys and
values for every layer and KV head::

    bytes = 2 * num_layers * num_kv_heads * head_dim * bytes_per_element

The compressor shortens a token sequence by an integer factor: chunks of
``factor`` consecutive tokens are folded into one token each, independently
per modality segment, so image/text boundaries and ordering survive
compression. A factor of 1 is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"


class MapKind(str, Enum):
    """How a chunk of consecutive token vectors is folded into one."""

    MEAN_POOL = "meanpool"
    SEEDED_LINEAR = "seededlinear"


class AlreadyCompressed(ValueError):
    """An already-compressed cache spec was compressed again."""


class EmptyInput(ValueError):
    """compress_tensor received a zero-row input."""


class EmptyRequest(ValueError):
    """A request carrying neither image nor text tokens."""


# ---------------------------------------------------------------------------
# geometry types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Static model geometry needed for KV footprint accounting."""

    name: str
    num_layers: int
    num_kv_heads: int
    head_dim: int
    bytes_per_element: int

    def __post_init__(self) -> None:
        for attr in ("num_layers", "num_kv_heads", "head_dim"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.bytes_per_element not in (1, 2, 4):
            raise ValueError("bytes_per_element must be one of 1, 2, 4")

    @property
    def bytes_per_token(self) -> int:
        return (
            2
            * self.num_layers
            * self.num_kv_heads
            * self.head_dim
            * self.bytes_per_element
        )


def kv_bytes(config: ModelConfig, tokens: int) -> int:
    """Exact KV-cache footprint in bytes for ``tokens`` cached tokens.

    Python integers are arbitrary precision, so the product can neither
    overflow nor silently saturate.
    """
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    return config.bytes_per_token * tokens


@dataclass(frozen=True)
class KVSegment:
    """A contiguous run of cached tokens belonging to one modality."""

    modality: Modality
    token_count: int
    compressed: bool = False
    original_token_count: int | None = None

    def __post_init__(self) -> None:
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")


@dataclass(frozen=True)
class KVCacheSpec:
    """Ordered segment layout of one request's KV cache.

    Image segments precede text segments; tokens appended during decoding are
    tracked separately and are never compressed.
    """

    segments: tuple[KVSegment, ...]
    decode_appended_tokens: int = 0

    def __post_init__(self) -> None:
        if self.decode_appended_tokens < 0:
            raise ValueError("decode_appended_tokens must be >= 0")
        seen_text = False
        for seg in self.segments:
            if seg.modality is Modality.TEXT:
                seen_text = True
            elif seen_text:
                raise ValueError("image segments must precede text segments")

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.segments) + self.decode_appended_tokens

    @property
    def is_compressed(self) -> bool:
        return any(s.compressed for s in self.segments)


@dataclass(frozen=True)
class CompressorSpec:
    """Configuration of the chunked sequence compressor."""

    factor: int = 5
    map_kind: MapKind = MapKind.MEAN_POOL
    seed: int = 1234

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def split_modalities(image_tokens: int, text_tokens: int) -> KVCacheSpec:
    """Build a request's cache layout: image segment first, then text.

    Zero-length segments are omitted entirely.
    """
    if image_tokens < 0 or text_tokens < 0:
        raise ValueError("token counts must be >= 0")
    if image_tokens == 0 and text_tokens == 0:
        raise EmptyRequest("request has no image and no text tokens")
    segments: list[KVSegment] = []
    if image_tokens > 0:
        segments.append(KVSegment(Modality.IMAGE, image_tokens))
    if text_tokens > 0:
        segments.append(KVSegment(Modality.TEXT, text_tokens))
    return KVCacheSpec(segments=tuple(segments))


def _ceil_div(n: int, k: int) -> int:
    return -(-n // k)


def compressed_spec(spec: KVCacheSpec, comp: CompressorSpec) -> KVCacheSpec:
    """Token-count effect of compressing every segment by ``comp.factor``.

    Each segment of n tokens shrinks to ceil(n / factor) tokens; modality and
    segment order are preserved, and the original length is recorded on the
    segment. Compression happens between prefill and decode, so a spec that
    already has decode-appended tokens is rejected.
    """
    if spec.is_compressed:
        raise AlreadyCompressed("cache spec is already compressed")
    if spec.decode_appended_tokens != 0:
        raise ValueError("cannot compress a cache that has decode-appended tokens")
    segments = tuple(
        replace(
            seg,
            token_count=_ceil_div(seg.token_count, comp.factor),
            compressed=True,
            original_token_count=seg.token_count,
        )
        for seg in spec.segments
    )
    return KVCacheSpec(segments=segments, decode_appended_tokens=0)


def chunk_weights(comp: CompressorSpec) -> np.ndarray:
    """The fixed per-chunk mixing weights, summing to exactly 1.0.

    MeanPool uses uniform weights; SeededLinear draws them once from a seeded
    generator, so the map is fixed for a given spec rather than per call.
    """
    if comp.map_kind is MapKind.MEAN_POOL:
        w = np.full(comp.factor, 1.0 / comp.factor, dtype=np.float64)
    else:
        rng = np.random.default_rng(comp.seed)
        w = rng.random(comp.factor)
    return w / w.sum()


def compress_tensor(values: np.ndarray, comp: CompressorSpec) -> np.ndarray:
    """Apply chunked compression to an (n, d) matrix of token vectors.

    Returns a (ceil(n / factor), d) matrix. The final partial chunk (when n is
    not divisible by the factor) is folded with the first ``n mod factor``
    weights renormalized to sum 1 — no padding rows are invented. With
    factor=1 and MeanPool the result is the input, bit for bit.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("values must be a 2-D (tokens, dim) array")
    n = values.shape[0]
    if n == 0:
        raise EmptyInput("cannot compress an empty token sequence")
    k = comp.factor
    out_rows = _ceil_div(n, k)
    if comp.map_kind is MapKind.MEAN_POOL:
        out = np.empty((out_rows, values.shape[1]), dtype=values.dtype)
        for r in range(out_rows):
            out[r] = values[r * k : min((r + 1) * k, n)].mean(axis=0)
        return out
    weights = chunk_weights(comp)
    out = np.empty((out_rows, values.shape[1]), dtype=np.float64)
    for r in range(out_rows):
        chunk = values[r * k : min((r + 1) * k, n)]
        w = weights[: chunk.shape[0]]
        w = w / w.sum()
        out[r] = w @ chunk
    return out
