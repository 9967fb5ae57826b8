"""Per-request latency decomposition, aggregate statistics, CSV artifacts.

Definitions:

* ttft — first output token time minus arrival (includes every queue and
  the compression stage).
* tpot — (completion - first token) / (output_tokens - 1); undefined for
  single-token outputs, which are excluded from aggregation.
* throughput — output tokens (or completed requests) per second of
  makespan, where makespan = last completion - first arrival.
* utilization_ratio — request-averaged fraction of a request's lifetime
  spent inside stage executions (prefill span + compress span + decode
  span from first step start to completion). A request riding a batch is
  "processing" for the whole batched execution.

Floats are serialized with repr() so CSV artifacts are byte-stable and
parse back to bit-identical values; every record-derived aggregate can be
recomputed exactly from requests.csv.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # avoid a runtime import cycle with the engine
    from .engine import SimOutput
    from .pool import MemorySample

SLO_TTFT_S = 2.0


class IncompleteRequest(ValueError):
    """Metric asked of a request that has not reached the needed milestone."""


class TpotUndefined(ValueError):
    """Per-output-token time is undefined for single-token outputs."""


class NoCompletedRequests(ValueError):
    """Aggregate asked of a run in which nothing completed."""


@dataclass
class RequestRecord:
    """Milestone timestamps for one request, filled in as the run proceeds."""

    request_id: int
    arrival_s: float
    input_tokens: int
    output_tokens: int = 0
    prefill_start_s: float | None = None
    prefill_end_s: float | None = None
    compress_start_s: float | None = None
    compress_end_s: float | None = None
    decode_start_s: float | None = None
    first_token_s: float | None = None
    completion_s: float | None = None

    @property
    def completed(self) -> bool:
        return self.completion_s is not None


# ---------------------------------------------------------------------------
# per-request metrics
# ---------------------------------------------------------------------------


def ttft(record: RequestRecord) -> float:
    if record.first_token_s is None:
        raise IncompleteRequest(f"request {record.request_id} has no first token yet")
    return record.first_token_s - record.arrival_s


def tpot(record: RequestRecord) -> float:
    if record.completion_s is None or record.first_token_s is None:
        raise IncompleteRequest(f"request {record.request_id} has not completed")
    if record.output_tokens < 2:
        raise TpotUndefined("tpot needs at least two output tokens")
    return (record.completion_s - record.first_token_s) / (record.output_tokens - 1)


def latency(record: RequestRecord) -> float:
    if record.completion_s is None:
        raise IncompleteRequest(f"request {record.request_id} has not completed")
    return record.completion_s - record.arrival_s


def ttft_within_slo(record: RequestRecord, threshold_s: float = SLO_TTFT_S) -> bool:
    return ttft(record) <= threshold_s


def request_utilization(record: RequestRecord) -> float:
    """Fraction of this request's lifetime spent in stage executions."""
    if record.completion_s is None:
        raise IncompleteRequest(f"request {record.request_id} has not completed")
    busy = (
        (record.prefill_end_s - record.prefill_start_s)
        + (record.compress_end_s - record.compress_start_s)
        + (record.completion_s - record.decode_start_s)
    )
    return busy / (record.completion_s - record.arrival_s)


def queue_times(record: RequestRecord) -> tuple[float, float, float]:
    """(prefill, compress, decode) queue waits for a completed request."""
    return (
        record.prefill_start_s - record.arrival_s,
        record.compress_start_s - record.prefill_end_s,
        record.decode_start_s - record.compress_end_s,
    )


# ---------------------------------------------------------------------------
# aggregates
# ---------------------------------------------------------------------------


def _completed(records: Iterable[RequestRecord]) -> list[RequestRecord]:
    done = [r for r in records if r.completed]
    if not done:
        raise NoCompletedRequests("no requests completed")
    return done


def throughput(records: Sequence[RequestRecord]) -> tuple[float, float]:
    """(output tokens per second, completed requests per second) of makespan."""
    done = _completed(records)
    makespan = max(r.completion_s for r in done) - min(r.arrival_s for r in done)
    if makespan <= 0:
        raise NoCompletedRequests("makespan is not positive")
    total_tokens = sum(r.output_tokens for r in done)
    return total_tokens / makespan, len(done) / makespan


def utilization_ratio(records: Sequence[RequestRecord]) -> float:
    done = _completed(records)
    return float(np.mean([request_utilization(r) for r in done]))


REQUEST_CSV_COLUMNS = [
    "request_id",
    "arrival_s",
    "prefill_start_s",
    "prefill_end_s",
    "compress_start_s",
    "compress_end_s",
    "first_token_s",
    "completion_s",
    "input_tokens",
    "output_tokens",
    "ttft_s",
    "tpot_s",
    "decode_start_s",  # appended past the fixed prefix, see README
]

SUMMARY_COLUMNS = [
    "config_hash",
    "seed",
    "policy",
    "rate_req_per_s",
    "n_arrived",
    "n_completed",
    "n_inflight",
    "diverged",
    "makespan_s",
    "mean_ttft_s",
    "p50_ttft_s",
    "p95_ttft_s",
    "p99_ttft_s",
    "mean_tpot_s",
    "mean_latency_s",
    "mean_output_tokens",
    "normalized_latency_s_per_token",
    "throughput_tokens_per_s",
    "throughput_req_per_s",
    "utilization_ratio",
    "mean_prefill_queue_s",
    "mean_compress_queue_s",
    "mean_decode_queue_s",
    "slo_ttft_frac",
    "avg_in_flight",
    "peak_pool_bytes",
    "avg_pool_bytes",
    "zombie_bytes_reclaimed",
    "zombie_coexistence",
]

# aggregates that depend only on requests.csv rows, for exact recomputation
RECORD_DERIVED_COLUMNS = [
    "n_completed",
    "makespan_s",
    "mean_ttft_s",
    "p50_ttft_s",
    "p95_ttft_s",
    "p99_ttft_s",
    "mean_tpot_s",
    "mean_latency_s",
    "mean_output_tokens",
    "normalized_latency_s_per_token",
    "throughput_tokens_per_s",
    "throughput_req_per_s",
    "utilization_ratio",
    "mean_prefill_queue_s",
    "mean_compress_queue_s",
    "mean_decode_queue_s",
    "slo_ttft_frac",
]


def compute_record_aggregates(records: Sequence[RequestRecord]) -> dict[str, object]:
    """Every aggregate derivable from completed request records alone."""
    done = sorted(_completed(records), key=lambda r: r.request_id)
    ttfts = np.asarray([ttft(r) for r in done])
    tpots = [tpot(r) for r in done if r.output_tokens >= 2]
    latencies = [latency(r) for r in done]
    queues = [queue_times(r) for r in done]
    tokens_per_s, req_per_s = throughput(done)
    mean_latency = float(np.mean(latencies))
    mean_output = float(np.mean([r.output_tokens for r in done]))
    return {
        "n_completed": len(done),
        "makespan_s": max(r.completion_s for r in done) - min(r.arrival_s for r in done),
        "mean_ttft_s": float(np.mean(ttfts)),
        "p50_ttft_s": float(np.percentile(ttfts, 50)),
        "p95_ttft_s": float(np.percentile(ttfts, 95)),
        "p99_ttft_s": float(np.percentile(ttfts, 99)),
        "mean_tpot_s": float(np.mean(tpots)) if tpots else None,
        "mean_latency_s": mean_latency,
        "mean_output_tokens": mean_output,
        "normalized_latency_s_per_token": mean_latency / mean_output,
        "throughput_tokens_per_s": tokens_per_s,
        "throughput_req_per_s": req_per_s,
        "utilization_ratio": utilization_ratio(done),
        "mean_prefill_queue_s": float(np.mean([q[0] for q in queues])),
        "mean_compress_queue_s": float(np.mean([q[1] for q in queues])),
        "mean_decode_queue_s": float(np.mean([q[2] for q in queues])),
        "slo_ttft_frac": float(np.mean([ttft_within_slo(r) for r in done])),
    }


def time_weighted_avg_bytes(trace: Sequence["MemorySample"], horizon_s: float) -> float:
    """Average pool occupancy over [0, horizon], piecewise-constant."""
    if not trace or horizon_s <= 0:
        return 0.0
    area = 0.0
    prev_t, prev_bytes = 0.0, 0
    for sample in trace:
        t = min(sample.time_s, horizon_s)
        area += prev_bytes * (t - prev_t)
        prev_t, prev_bytes = t, sample.current_bytes
    area += prev_bytes * max(horizon_s - prev_t, 0.0)
    return area / horizon_s


@dataclass
class MetricsReport:
    """A finished run: per-request records, memory trace, and aggregates."""

    records: list[RequestRecord]
    memory_trace: list["MemorySample"]
    aggregates: dict[str, object]
    seed: int
    config_hash: str

    def summary_row(self) -> dict[str, object]:
        return {col: self.aggregates.get(col) for col in SUMMARY_COLUMNS}


def build_report(
    output: "SimOutput",
    *,
    seed: int,
    config_hash: str,
    policy: str,
    rate_req_per_s: float,
) -> MetricsReport:
    records = output.records
    n_arrived = len(records)
    completed = [r for r in records if r.completed]
    aggregates: dict[str, object] = {
        "config_hash": config_hash,
        "seed": seed,
        "policy": policy,
        "rate_req_per_s": rate_req_per_s,
        "n_arrived": n_arrived,
        "n_completed": len(completed),
        "n_inflight": n_arrived - len(completed),
        "diverged": int(output.diverged),
        "avg_in_flight": output.avg_in_flight,
        "peak_pool_bytes": output.pool.peak_bytes,
        "avg_pool_bytes": time_weighted_avg_bytes(
            output.pool.memory_trace, output.last_completion_s
        ),
        "zombie_bytes_reclaimed": output.pool.stats().zombie_bytes_reclaimed,
        "zombie_coexistence": int(output.pool.zombie_coexistence_observed),
    }
    if completed:
        aggregates.update(compute_record_aggregates(records))
    else:
        aggregates.update({col: None for col in RECORD_DERIVED_COLUMNS})
        aggregates["n_completed"] = 0
    return MetricsReport(
        records=records,
        memory_trace=output.pool.memory_trace,
        aggregates=aggregates,
        seed=seed,
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_row(record: RequestRecord) -> dict[str, str]:
    try:
        ttft_s: float | None = ttft(record)
    except IncompleteRequest:
        ttft_s = None
    try:
        tpot_s: float | None = tpot(record)
    except (IncompleteRequest, TpotUndefined):
        tpot_s = None
    return {
        "request_id": _fmt(record.request_id),
        "arrival_s": _fmt(record.arrival_s),
        "prefill_start_s": _fmt(record.prefill_start_s),
        "prefill_end_s": _fmt(record.prefill_end_s),
        "compress_start_s": _fmt(record.compress_start_s),
        "compress_end_s": _fmt(record.compress_end_s),
        "first_token_s": _fmt(record.first_token_s),
        "completion_s": _fmt(record.completion_s),
        "input_tokens": _fmt(record.input_tokens),
        "output_tokens": _fmt(record.output_tokens),
        "ttft_s": _fmt(ttft_s),
        "tpot_s": _fmt(tpot_s),
        "decode_start_s": _fmt(record.decode_start_s),
    }


def write_requests_csv(path: str | Path, report: MetricsReport) -> None:
    """Completed requests only, sorted by request id."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={report.config_hash} seed={report.seed}\n")
        writer = csv.DictWriter(fh, fieldnames=REQUEST_CSV_COLUMNS)
        writer.writeheader()
        for record in sorted(report.records, key=lambda r: r.request_id):
            if record.completed:
                writer.writerow(_record_row(record))


def write_summary_csv(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in report.summary_row().items()})


def write_memory_csv(path: str | Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={report.config_hash} seed={report.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["time_s", "current_bytes", "peak_bytes", "live_handles"])
        for sample in report.memory_trace:
            writer.writerow(
                [repr(sample.time_s), sample.current_bytes, sample.peak_bytes, sample.live_handles]
            )


def export_csv(report: MetricsReport, out_dir: str | Path) -> dict[str, Path]:
    """Write requests.csv, summary.csv, and memory.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "requests": out / "requests.csv",
        "summary": out / "summary.csv",
        "memory": out / "memory.csv",
    }
    write_requests_csv(paths["requests"], report)
    write_summary_csv(paths["summary"], report)
    write_memory_csv(paths["memory"], report)
    return paths


def read_requests_csv(path: str | Path) -> list[RequestRecord]:
    """Parse requests.csv back into records (bit-exact float round-trip)."""
    records: list[RequestRecord] = []
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for row in rows:
            records.append(
                RequestRecord(
                    request_id=int(row["request_id"]),
                    arrival_s=float(row["arrival_s"]),
                    input_tokens=int(row["input_tokens"]),
                    output_tokens=int(row["output_tokens"]),
                    prefill_start_s=float(row["prefill_start_s"]),
                    prefill_end_s=float(row["prefill_end_s"]),
                    compress_start_s=float(row["compress_start_s"]),
                    compress_end_s=float(row["compress_end_s"]),
                    decode_start_s=float(row["decode_start_s"]),
                    first_token_s=float(row["first_token_s"]),
                    completion_s=float(row["completion_s"]),
                )
            )
    return records


def read_summary_csv(path: str | Path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[0] if rows else {}
