"""Discrete-event simulator for a KV-cache-compressing multimodal serving pipeline."""

from .engine import (
    COST_PRESETS,
    CompressMode,
    ConfigError,
    CostModel,
    SimOutput,
    Simulator,
    plan_decode,
    simulate,
    stage_duration,
)
from .experiment import (
    MODEL_PRESETS,
    ExperimentConfig,
    SweepSpec,
    build_config,
    config_hash,
    parse_config_file,
    run_ablation,
    run_and_export,
    run_experiment,
    run_sweep,
)
from .kv import (
    CompressorSpec,
    KVCacheSpec,
    KVSegment,
    MapKind,
    Modality,
    ModelConfig,
    compress_tensor,
    compressed_spec,
    kv_bytes,
    split_modalities,
)
from .metrics import (
    SLO_TTFT_S,
    MetricsReport,
    RequestRecord,
    build_report,
    export_csv,
    latency,
    throughput,
    tpot,
    ttft,
    utilization_ratio,
)
from .pool import CacheHandle, CapacityExceeded, KVCachePool, PoolMode, PoolStats
from .scheduling import (
    BatchDecision,
    DynamicPolicy,
    FCFSPolicy,
    Stage,
    StaticPolicy,
    form_stage_batch,
    max_feasible_batch,
    parse_policy,
    policy_to_string,
)
from .workload import (
    WORKLOAD_PRESETS,
    RequestSpec,
    WorkloadProfile,
    generate,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"

__all__ = [
    "COST_PRESETS",
    "MODEL_PRESETS",
    "SLO_TTFT_S",
    "WORKLOAD_PRESETS",
    "BatchDecision",
    "CacheHandle",
    "CapacityExceeded",
    "CompressMode",
    "CompressorSpec",
    "ConfigError",
    "CostModel",
    "DynamicPolicy",
    "ExperimentConfig",
    "FCFSPolicy",
    "KVCachePool",
    "KVCacheSpec",
    "KVSegment",
    "MapKind",
    "MetricsReport",
    "Modality",
    "ModelConfig",
    "PoolMode",
    "PoolStats",
    "RequestRecord",
    "RequestSpec",
    "SimOutput",
    "Simulator",
    "Stage",
    "StaticPolicy",
    "SweepSpec",
    "WorkloadProfile",
    "build_config",
    "build_report",
    "compress_tensor",
    "compressed_spec",
    "config_hash",
    "export_csv",
    "form_stage_batch",
    "generate",
    "kv_bytes",
    "latency",
    "load_trace",
    "max_feasible_batch",
    "parse_config_file",
    "parse_policy",
    "plan_decode",
    "policy_to_string",
    "run_ablation",
    "run_and_export",
    "run_experiment",
    "run_sweep",
    "save_trace",
    "simulate",
    "split_modalities",
    "stage_duration",
    "throughput",
    "tpot",
    "ttft",
    "utilization_ratio",
]
