"""Experiment configuration and run drivers behind the CLI.

Config sources merge with precedence defaults < preset expansion < config
file < command-line flags. A config file is flat ``section.key=value``
lines; presets (model.preset, workload.preset, cost.preset) expand to
field values at the level where the preset was named, so an explicit
field key at the same or higher level always wins over the preset's value.

Every run is identified by a 12-hex-digit hash of the fully resolved
configuration, excluding seed and output directory: same hash + same seed
means byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .engine import (
    COST_PRESETS,
    CompressMode,
    ConfigError,
    CostModel,
    SimOutput,
    simulate,
)
from .kv import CompressorSpec, MapKind, ModelConfig
from .metrics import SUMMARY_COLUMNS, MetricsReport, _fmt, build_report, export_csv
from .pool import PoolMode
from .scheduling import parse_policy, policy_to_string
from .workload import (
    WORKLOAD_PRESETS,
    ImageCountDist,
    RequestSpec,
    TokenDist,
    WorkloadProfile,
    generate,
    load_trace,
)

MODEL_PRESETS: dict[str, ModelConfig] = {
    "llava-7b": ModelConfig("llava-7b", num_layers=32, num_kv_heads=32, head_dim=128, bytes_per_element=2),
    "llama-70b": ModelConfig("llama-70b", num_layers=80, num_kv_heads=8, head_dim=128, bytes_per_element=2),
}

GB = 1_000_000_000  # decimal, matching marketing-style capacity figures

_DEFAULTS: dict[str, str] = {
    "model.preset": "llava-7b",
    "pool.capacity_gb": "60",
    "pool.mode": "pooled",
    "scheduler.policy": "dynamic:bmin=6,bmax=64,wmax_ms=3000,aging=on",
    "compress.factor": "5",
    "compress.map": "meanpool",
    "compress.seed": "1234",
    "compress.mode": "linear",
    "cost.preset": "h100-llava7b-default",
    "workload.preset": "gqa-like",
    "engine.coupled": "off",
    "seed": "0",
}

_COST_FIELDS = (
    "prefill_base_s",
    "prefill_per_token_s",
    "compress_base_s",
    "compress_per_token_s",
    "compress_attention_scale_s",
    "decode_step_base_s",
    "decode_step_per_seq_s",
    "decode_step_per_ctx_token_s",
)

_MODEL_FIELDS = ("num_layers", "num_kv_heads", "head_dim", "bytes_per_element")

_WORKLOAD_FIELDS = (
    "rate_req_per_s",
    "num_requests",
    "duration_s",
    "image_count_dist",
    "images_per_request_mean",
    "tokens_per_image",
    "text_dist",
    "text_tokens_mean",
    "text_lognormal_sigma",
    "output_dist",
    "output_tokens_mean",
)

KNOWN_KEYS = frozenset(
    list(_DEFAULTS)
    + ["workload.trace"]
    + [f"model.{f}" for f in _MODEL_FIELDS]
    + [f"cost.{f}" for f in _COST_FIELDS]
    + [f"workload.{f}" for f in _WORKLOAD_FIELDS]
)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; '#' comments and blank lines ignored."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _as_int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {text!r}") from None


def _as_float(key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {text!r}") from None


def _as_bool(key: str, text: str) -> bool:
    lowered = text.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key} must be on/off, got {text!r}")


def _as_enum(key: str, text: str, enum_cls):
    try:
        return enum_cls(text)
    except ValueError:
        options = "|".join(m.value for m in enum_cls)
        raise ConfigError(f"{key} must be one of {options}, got {text!r}") from None


class _Resolver:
    """Per-key (level, explicitness) precedence merge.

    Levels: 0 defaults, 2 config file, 3 flags. Preset expansion injects
    values at the preset key's own level with explicitness 0, so a field
    named outright at the same level still wins.
    """

    def __init__(self) -> None:
        self._slots: dict[str, tuple[int, int, str]] = {}

    def put(self, key: str, value: str, level: int, explicit: int = 1) -> None:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        current = self._slots.get(key)
        if current is None or (level, explicit) >= current[:2]:
            self._slots[key] = (level, explicit, value)

    def rank(self, key: str) -> tuple[int, int]:
        slot = self._slots.get(key)
        return slot[:2] if slot else (-1, -1)

    def get(self, key: str) -> str | None:
        slot = self._slots.get(key)
        return slot[2] if slot else None

    def drop(self, key: str) -> None:
        self._slots.pop(key, None)

    def __contains__(self, key: str) -> bool:
        return key in self._slots


def _expand_workload_preset(resolver: _Resolver, level: int) -> None:
    name = resolver.get("workload.preset")
    if name not in WORKLOAD_PRESETS:
        raise ConfigError(f"unknown workload preset {name!r}")
    profile = WORKLOAD_PRESETS[name]
    fields = {
        "rate_req_per_s": repr(profile.rate_req_per_s),
        "image_count_dist": profile.image_count_dist.value,
        "images_per_request_mean": repr(profile.images_per_request_mean),
        "tokens_per_image": str(profile.tokens_per_image),
        "text_dist": profile.text_dist.value,
        "text_tokens_mean": repr(profile.text_tokens_mean),
        "text_lognormal_sigma": repr(profile.text_lognormal_sigma),
        "output_dist": profile.output_dist.value,
        "output_tokens_mean": repr(profile.output_tokens_mean),
    }
    if profile.num_requests is not None:
        fields["num_requests"] = str(profile.num_requests)
    if profile.duration_s is not None:
        fields["duration_s"] = repr(profile.duration_s)
    for field_name, value in fields.items():
        resolver.put(f"workload.{field_name}", value, level, explicit=0)


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved run: typed objects plus provenance for conflicts."""

    model: ModelConfig
    capacity_bytes: int
    pool_mode: PoolMode
    policy_text: str
    compressor: CompressorSpec
    cost: CostModel
    workload: WorkloadProfile | None
    trace_path: str | None
    coupled: bool
    seed: int
    out_dir: str
    explicit_keys: frozenset[str] = frozenset()

    @property
    def rate_req_per_s(self) -> float:
        return self.workload.rate_req_per_s if self.workload is not None else 0.0


def build_config(
    file_values: Mapping[str, str] | None = None,
    flag_values: Mapping[str, str] | None = None,
    *,
    out_dir: str = "out",
) -> ExperimentConfig:
    resolver = _Resolver()
    for key, value in _DEFAULTS.items():
        resolver.put(key, value, 0)
    for key, value in (file_values or {}).items():
        resolver.put(key, value, 2)
    for key, value in (flag_values or {}).items():
        resolver.put(key, value, 3)
    explicit_keys = frozenset(set(file_values or {}) | set(flag_values or {}))

    # model
    model_preset = resolver.get("model.preset")
    if model_preset not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {model_preset!r}")
    preset_level = resolver.rank("model.preset")[0]
    base_model = MODEL_PRESETS[model_preset]
    for field_name in _MODEL_FIELDS:
        resolver.put(
            f"model.{field_name}", str(getattr(base_model, field_name)), preset_level, explicit=0
        )
    model = ModelConfig(
        name=model_preset,
        num_layers=_as_int("model.num_layers", resolver.get("model.num_layers")),
        num_kv_heads=_as_int("model.num_kv_heads", resolver.get("model.num_kv_heads")),
        head_dim=_as_int("model.head_dim", resolver.get("model.head_dim")),
        bytes_per_element=_as_int(
            "model.bytes_per_element", resolver.get("model.bytes_per_element")
        ),
    )

    # pool
    capacity_gb = _as_float("pool.capacity_gb", resolver.get("pool.capacity_gb"))
    if capacity_gb <= 0:
        raise ConfigError("pool.capacity_gb must be positive")
    pool_mode = _as_enum("pool.mode", resolver.get("pool.mode"), PoolMode)

    # scheduler: parse to validate, keep the canonical spelling
    try:
        policy = parse_policy(resolver.get("scheduler.policy"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    policy_text = policy_to_string(policy)

    # compression
    factor = _as_int("compress.factor", resolver.get("compress.factor"))
    compressor = CompressorSpec(
        factor=factor,
        map_kind=_as_enum("compress.map", resolver.get("compress.map"), MapKind),
        seed=_as_int("compress.seed", resolver.get("compress.seed")),
    )

    # cost model
    cost_preset = resolver.get("cost.preset")
    if cost_preset not in COST_PRESETS:
        raise ConfigError(f"unknown cost preset {cost_preset!r}")
    cost_level = resolver.rank("cost.preset")[0]
    base_cost = COST_PRESETS[cost_preset]
    for field_name in _COST_FIELDS:
        resolver.put(
            f"cost.{field_name}", repr(getattr(base_cost, field_name)), cost_level, explicit=0
        )
    cost = CostModel(
        compress_mode=_as_enum("compress.mode", resolver.get("compress.mode"), CompressMode),
        **{
            field_name: _as_float(f"cost.{field_name}", resolver.get(f"cost.{field_name}"))
            for field_name in _COST_FIELDS
        },
    )

    # workload: a trace path and a preset compete; the higher-precedence one wins
    trace_path: str | None = None
    workload: WorkloadProfile | None = None
    trace_rank = resolver.rank("workload.trace")
    preset_rank = resolver.rank("workload.preset")
    if "workload.trace" in resolver and trace_rank[0] == preset_rank[0] and "workload.preset" in explicit_keys:
        raise ConfigError("workload.trace and workload.preset given at the same precedence")
    if "workload.trace" in resolver and trace_rank > preset_rank:
        trace_path = resolver.get("workload.trace")
    else:
        _expand_workload_preset(resolver, preset_rank[0])
        if "workload.num_requests" in resolver and "workload.duration_s" in resolver:
            # exactly one run-length control survives resolution
            nreq_rank = resolver.rank("workload.num_requests")
            dur_rank = resolver.rank("workload.duration_s")
            if nreq_rank == dur_rank:
                raise ConfigError("give workload.num_requests or workload.duration_s, not both")
            resolver.drop("workload.num_requests" if dur_rank > nreq_rank else "workload.duration_s")
        num_requests = (
            _as_int("workload.num_requests", resolver.get("workload.num_requests"))
            if "workload.num_requests" in resolver
            else None
        )
        duration_s = (
            _as_float("workload.duration_s", resolver.get("workload.duration_s"))
            if "workload.duration_s" in resolver
            else None
        )
        try:
            workload = WorkloadProfile(
                rate_req_per_s=_as_float(
                    "workload.rate_req_per_s", resolver.get("workload.rate_req_per_s")
                ),
                seed=0,  # replaced by the experiment seed at run time
                num_requests=num_requests,
                duration_s=duration_s,
                image_count_dist=_as_enum(
                    "workload.image_count_dist",
                    resolver.get("workload.image_count_dist"),
                    ImageCountDist,
                ),
                images_per_request_mean=_as_float(
                    "workload.images_per_request_mean",
                    resolver.get("workload.images_per_request_mean"),
                ),
                tokens_per_image=_as_int(
                    "workload.tokens_per_image", resolver.get("workload.tokens_per_image")
                ),
                text_dist=_as_enum("workload.text_dist", resolver.get("workload.text_dist"), TokenDist),
                text_tokens_mean=_as_float(
                    "workload.text_tokens_mean", resolver.get("workload.text_tokens_mean")
                ),
                text_lognormal_sigma=_as_float(
                    "workload.text_lognormal_sigma", resolver.get("workload.text_lognormal_sigma")
                ),
                output_dist=_as_enum(
                    "workload.output_dist", resolver.get("workload.output_dist"), TokenDist
                ),
                output_tokens_mean=_as_float(
                    "workload.output_tokens_mean", resolver.get("workload.output_tokens_mean")
                ),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    return ExperimentConfig(
        model=model,
        capacity_bytes=int(capacity_gb * GB),
        pool_mode=pool_mode,
        policy_text=policy_text,
        compressor=compressor,
        cost=cost,
        workload=workload,
        trace_path=trace_path,
        coupled=_as_bool("engine.coupled", resolver.get("engine.coupled")),
        seed=_as_int("seed", resolver.get("seed")),
        out_dir=out_dir,
        explicit_keys=explicit_keys,
    )


def resolved_items(config: ExperimentConfig) -> list[tuple[str, str]]:
    """Canonical flat view of everything that affects simulation output."""
    items: list[tuple[str, str]] = [
        ("model.name", config.model.name),
        ("model.num_layers", str(config.model.num_layers)),
        ("model.num_kv_heads", str(config.model.num_kv_heads)),
        ("model.head_dim", str(config.model.head_dim)),
        ("model.bytes_per_element", str(config.model.bytes_per_element)),
        ("pool.capacity_bytes", str(config.capacity_bytes)),
        ("pool.mode", config.pool_mode.value),
        ("scheduler.policy", config.policy_text),
        ("compress.factor", str(config.compressor.factor)),
        ("compress.map", config.compressor.map_kind.value),
        ("compress.seed", str(config.compressor.seed)),
        ("compress.mode", config.cost.compress_mode.value),
        ("engine.coupled", "on" if config.coupled else "off"),
    ]
    items += [(f"cost.{f}", repr(getattr(config.cost, f))) for f in _COST_FIELDS]
    if config.trace_path is not None:
        items.append(("workload.trace", config.trace_path))
    else:
        w = config.workload
        items += [
            ("workload.rate_req_per_s", repr(w.rate_req_per_s)),
            ("workload.image_count_dist", w.image_count_dist.value),
            ("workload.images_per_request_mean", repr(w.images_per_request_mean)),
            ("workload.tokens_per_image", str(w.tokens_per_image)),
            ("workload.text_dist", w.text_dist.value),
            ("workload.text_tokens_mean", repr(w.text_tokens_mean)),
            ("workload.text_lognormal_sigma", repr(w.text_lognormal_sigma)),
            ("workload.output_dist", w.output_dist.value),
            ("workload.output_tokens_mean", repr(w.output_tokens_mean)),
        ]
        if w.num_requests is not None:
            items.append(("workload.num_requests", str(w.num_requests)))
        if w.duration_s is not None:
            items.append(("workload.duration_s", repr(w.duration_s)))
    return sorted(items)


def config_hash(config: ExperimentConfig) -> str:
    """12 hex digits over the resolved config, excluding seed and out dir."""
    payload = "\n".join(f"{k}={v}" for k, v in resolved_items(config))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def with_overrides(
    config: ExperimentConfig,
    *,
    rate: float | None = None,
    policy_text: str | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
    pool_mode: PoolMode | None = None,
) -> ExperimentConfig:
    """Derive a sweep/ablation point from a base config."""
    kwargs: dict = {}
    if rate is not None:
        if config.workload is None:
            raise ConfigError("cannot sweep rate when replaying a fixed trace")
        kwargs["workload"] = replace(config.workload, rate_req_per_s=rate)
    if policy_text is not None:
        try:
            kwargs["policy_text"] = policy_to_string(parse_policy(policy_text))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if seed is not None:
        kwargs["seed"] = seed
    if out_dir is not None:
        kwargs["out_dir"] = out_dir
    if pool_mode is not None:
        kwargs["pool_mode"] = pool_mode
    return replace(config, **kwargs)


def load_requests(config: ExperimentConfig) -> list[RequestSpec]:
    if config.trace_path is not None:
        return load_trace(config.trace_path)
    return generate(replace(config.workload, seed=config.seed))


def run_experiment(config: ExperimentConfig) -> tuple[SimOutput, MetricsReport]:
    requests = load_requests(config)
    output = simulate(
        requests,
        model=config.model,
        compressor=config.compressor,
        cost=config.cost,
        policy=parse_policy(config.policy_text),
        capacity_bytes=config.capacity_bytes,
        pool_mode=config.pool_mode,
        coupled=config.coupled,
    )
    report = build_report(
        output,
        seed=config.seed,
        config_hash=config_hash(config),
        policy=config.policy_text,
        rate_req_per_s=config.rate_req_per_s,
    )
    return output, report


def run_and_export(config: ExperimentConfig) -> tuple[MetricsReport, dict[str, Path]]:
    _, report = run_experiment(config)
    paths = export_csv(report, config.out_dir)
    return report, paths


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """A grid of (rate, policy) points, each run ``reps`` times.

    A dimension left as None pins the base config's value. Points are
    independent (own seeds, own output subdirectories) and could run
    concurrently; we run them in order for determinism of the log.
    """

    base: ExperimentConfig
    rates: tuple[float, ...] | None = None
    policies: tuple[str, ...] | None = None
    reps: int = 1

    def __post_init__(self) -> None:
        if self.rates is not None and len(self.rates) == 0:
            raise ConfigError("sweep rate list is empty")
        if self.policies is not None and len(self.policies) == 0:
            raise ConfigError("sweep policy list is empty")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", text).strip("-")


def run_sweep(spec: SweepSpec) -> list[dict[str, object]]:
    """Run every point and write consolidated sweep.csv under the base out dir."""
    base = spec.base
    rates = spec.rates if spec.rates is not None else (base.rate_req_per_s,)
    policies = spec.policies if spec.policies is not None else (base.policy_text,)
    rows: list[dict[str, object]] = []
    for rate, policy in itertools.product(rates, policies):
        for rep in range(spec.reps):
            seed = base.seed + rep
            subdir = Path(base.out_dir) / f"rate{rate:g}_{_slug(policy)}_seed{seed}"
            point = with_overrides(
                base, rate=rate, policy_text=policy, seed=seed, out_dir=str(subdir)
            )
            report, _ = run_and_export(point)
            rows.append(report.summary_row())
    _write_rows(Path(base.out_dir) / "sweep.csv", rows)
    return rows


def _write_rows(path: Path, rows: Sequence[dict[str, object]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


BATCHING_ABLATION_STATICS = ("static:p1c1d8", "static:p2c2d8", "static:p4c4d8")


def run_ablation(config: ExperimentConfig, which: str) -> tuple[list[dict[str, object]], dict[str, float]]:
    """Paired runs isolating one mechanism; returns (rows, delta report).

    pool: identical workload under pooled vs legacy retention; deltas are
    peak and time-averaged pool bytes ratios (pooled / legacy).
    batching: dynamic vs the best of a small static grid; deltas are mean
    TTFT and token throughput ratios (dynamic / best static).
    """
    if which == "pool":
        if "pool.mode" in config.explicit_keys:
            raise ConfigError("pool ablation sets pool.mode itself; drop the explicit setting")
        rows = []
        by_mode: dict[str, dict[str, object]] = {}
        for mode in (PoolMode.POOLED, PoolMode.LEGACY_ZOMBIE):
            point = with_overrides(
                config,
                pool_mode=mode,
                out_dir=str(Path(config.out_dir) / mode.value),
            )
            report, _ = run_and_export(point)
            row = report.summary_row()
            rows.append(row)
            by_mode[mode.value] = row
        deltas = {
            "peak_bytes_ratio": by_mode["pooled"]["peak_pool_bytes"]
            / by_mode["legacy"]["peak_pool_bytes"],
            "avg_bytes_ratio": by_mode["pooled"]["avg_pool_bytes"]
            / by_mode["legacy"]["avg_pool_bytes"],
        }
    elif which == "batching":
        dynamic_policy = (
            config.policy_text if config.policy_text.startswith("dynamic") else "dynamic"
        )
        rows = []
        static_rows = []
        for policy in (dynamic_policy,) + BATCHING_ABLATION_STATICS:
            point = with_overrides(
                config,
                policy_text=policy,
                out_dir=str(Path(config.out_dir) / _slug(policy)),
            )
            report, _ = run_and_export(point)
            row = report.summary_row()
            rows.append(row)
            if policy != dynamic_policy:
                static_rows.append(row)
        best_static = min(static_rows, key=lambda r: r["mean_ttft_s"])
        deltas = {
            "ttft_ratio": rows[0]["mean_ttft_s"] / best_static["mean_ttft_s"],
            "throughput_ratio": rows[0]["throughput_tokens_per_s"]
            / best_static["throughput_tokens_per_s"],
        }
    else:
        raise ConfigError(f"unknown ablation {which!r}; expected pool or batching")
    _write_rows(Path(config.out_dir) / "ablation.csv", rows)
    return rows, deltas
