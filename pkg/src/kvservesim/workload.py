"""Synthetic request streams and trace file I/O.

Arrivals are Poisson (exponential inter-arrival gaps); token counts come
from configurable per-field distributions. Generation is fully determined
by the profile's seed. Traces round-trip through a simple CSV format::

    arrival_s,image_tokens,text_tokens,max_new_tokens

with an optional header row and '#' comment lines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """A trace line that could not be parsed; carries the 1-based line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class OrderViolation(ParseError):
    """Trace arrivals must be non-decreasing in time."""


class ImageCountDist(str, Enum):
    FIXED = "fixed"
    POISSON = "poisson"


class TokenDist(str, Enum):
    GEOMETRIC = "geometric"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class RequestSpec:
    """One request: arrival instant, multimodal input size, output budget."""

    request_id: int
    arrival_time: float
    image_tokens: int
    text_tokens: int
    max_new_tokens: int

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be >= 0")
        if self.image_tokens < 0 or self.text_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.image_tokens + self.text_tokens < 1:
            raise ValueError("request must carry at least one input token")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    @property
    def input_tokens(self) -> int:
        return self.image_tokens + self.text_tokens


@dataclass(frozen=True)
class WorkloadProfile:
    """Parameters of a synthetic request stream.

    Exactly one of ``num_requests`` / ``duration_s`` bounds generation:
    a request count gives fixed-size experiments, a duration gives
    open-ended arrival windows.
    """

    rate_req_per_s: float
    seed: int = 0
    num_requests: int | None = None
    duration_s: float | None = None
    image_count_dist: ImageCountDist = ImageCountDist.FIXED
    images_per_request_mean: float = 1.0
    tokens_per_image: int = 576
    text_dist: TokenDist = TokenDist.GEOMETRIC
    text_tokens_mean: float = 32.0
    text_lognormal_sigma: float = 0.5
    output_dist: TokenDist = TokenDist.GEOMETRIC
    output_tokens_mean: float = 64.0

    def __post_init__(self) -> None:
        if self.rate_req_per_s <= 0:
            raise ValueError("rate_req_per_s must be > 0")
        if (self.num_requests is None) == (self.duration_s is None):
            raise ValueError("set exactly one of num_requests / duration_s")
        if self.num_requests is not None and self.num_requests < 0:
            raise ValueError("num_requests must be >= 0")
        if self.duration_s is not None and self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")
        if self.images_per_request_mean < 0:
            raise ValueError("images_per_request_mean must be >= 0")
        if self.tokens_per_image < 1:
            raise ValueError("tokens_per_image must be >= 1")
        if self.text_tokens_mean < 1 or self.output_tokens_mean < 1:
            raise ValueError("token means must be >= 1")
        if self.text_lognormal_sigma <= 0:
            raise ValueError("text_lognormal_sigma must be > 0")


# GQA-style: single image plus a short question, moderate answers.
# MileBench-style: long multi-image contexts (mean 15.2 images) with long
#   text (mean 422.3 words, ~1.3 tokens per word).
# highload: light requests for the 10-40 req/s stress sweeps.
WORKLOAD_PRESETS: dict[str, WorkloadProfile] = {
    "gqa-like": WorkloadProfile(
        rate_req_per_s=4.0,
        num_requests=2000,
        image_count_dist=ImageCountDist.FIXED,
        images_per_request_mean=1.0,
        text_tokens_mean=32.0,
        output_tokens_mean=64.0,
    ),
    "milebench-like": WorkloadProfile(
        rate_req_per_s=6.0,
        num_requests=2000,
        image_count_dist=ImageCountDist.POISSON,
        images_per_request_mean=15.2,
        text_dist=TokenDist.LOGNORMAL,
        text_tokens_mean=422.3 * 1.3,
        output_tokens_mean=64.0,
    ),
    "highload": WorkloadProfile(
        rate_req_per_s=20.0,
        num_requests=2000,
        image_count_dist=ImageCountDist.FIXED,
        images_per_request_mean=1.0,
        text_tokens_mean=32.0,
        output_tokens_mean=32.0,
    ),
}


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _sample_counts(
    rng: np.random.Generator, dist: TokenDist, mean: float, sigma: float, n: int
) -> np.ndarray:
    if dist is TokenDist.GEOMETRIC:
        return rng.geometric(1.0 / mean, size=n)
    mu = math.log(mean) - sigma * sigma / 2.0
    return np.maximum(1, np.rint(rng.lognormal(mu, sigma, size=n))).astype(np.int64)


def generate(profile: WorkloadProfile) -> list[RequestSpec]:
    """Draw a deterministic request stream from the profile's seed."""
    rng = np.random.default_rng(profile.seed)
    scale = 1.0 / profile.rate_req_per_s
    if profile.num_requests is not None:
        n = profile.num_requests
        arrivals = np.cumsum(rng.exponential(scale, size=n))
    else:
        arrivals_list: list[float] = []
        t = 0.0
        while True:
            t += rng.exponential(scale)
            if t >= profile.duration_s:
                break
            arrivals_list.append(t)
        arrivals = np.asarray(arrivals_list)
        n = len(arrivals)
    if n == 0:
        return []
    if profile.image_count_dist is ImageCountDist.FIXED:
        image_counts = np.full(n, int(round(profile.images_per_request_mean)))
    else:
        image_counts = rng.poisson(profile.images_per_request_mean, size=n)
    image_tokens = image_counts * profile.tokens_per_image
    text_tokens = _sample_counts(
        rng, profile.text_dist, profile.text_tokens_mean, profile.text_lognormal_sigma, n
    )
    output_tokens = _sample_counts(
        rng, profile.output_dist, profile.output_tokens_mean, profile.text_lognormal_sigma, n
    )
    return [
        RequestSpec(
            request_id=i,
            arrival_time=float(arrivals[i]),
            image_tokens=int(image_tokens[i]),
            text_tokens=int(text_tokens[i]),
            max_new_tokens=int(output_tokens[i]),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

TRACE_HEADER = "arrival_s,image_tokens,text_tokens,max_new_tokens"


def save_trace(path: str | Path, requests: list[RequestSpec]) -> None:
    lines = [TRACE_HEADER]
    for r in requests:
        lines.append(f"{r.arrival_time!r},{r.image_tokens},{r.text_tokens},{r.max_new_tokens}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path: str | Path) -> list[RequestSpec]:
    """Parse a trace file into request specs with fresh sequential ids."""
    requests: list[RequestSpec] = []
    last_arrival = -math.inf
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if line_no == 1 or not requests:
                # optional header: skip a row whose first field is not numeric
                try:
                    float(fields[0])
                except ValueError:
                    continue
            if len(fields) != 4:
                raise ParseError(line_no, f"expected 4 fields, got {len(fields)}")
            try:
                arrival = float(fields[0])
                image_tokens, text_tokens, max_new = (int(f) for f in fields[1:])
            except ValueError as exc:
                raise ParseError(line_no, f"bad field: {exc}") from exc
            if arrival < last_arrival:
                raise OrderViolation(
                    line_no, f"arrival {arrival} before previous {last_arrival}"
                )
            last_arrival = arrival
            try:
                requests.append(
                    RequestSpec(
                        request_id=len(requests),
                        arrival_time=arrival,
                        image_tokens=image_tokens,
                        text_tokens=text_tokens,
                        max_new_tokens=max_new,
                    )
                )
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from exc
    return requests
