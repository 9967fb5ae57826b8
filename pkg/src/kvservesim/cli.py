"""Command-line experiment harness.

Subcommands: run (one simulation), sweep (rate x policy grid), ablate
(paired mechanism comparisons), gen-trace (emit a workload trace file).
Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import Sequence

from .engine import COST_PRESETS, ConfigError
from .experiment import (
    SweepSpec,
    build_config,
    parse_config_file,
    run_ablation,
    run_and_export,
    run_sweep,
)
from .metrics import MetricsReport
from .workload import WORKLOAD_PRESETS, ParseError, generate, save_trace


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--scheduler", help="fcfs | static:pXcYdZ | dynamic:bmin=..,bmax=..,wmax_ms=..")
    parser.add_argument("--rate", type=float, help="arrival rate, requests per second")
    parser.add_argument("--duration", type=float, help="generate arrivals for this many seconds")
    parser.add_argument("--requests", type=int, help="generate exactly this many arrivals")
    parser.add_argument("--seed", type=int, help="random seed (default 0)")
    parser.add_argument(
        "--workload",
        help=f"workload preset ({', '.join(WORKLOAD_PRESETS)}) or a trace csv path",
    )
    parser.add_argument(
        "--cost-preset", choices=sorted(COST_PRESETS), help="stage cost coefficient preset"
    )
    parser.add_argument("--pool-mode", choices=["pooled", "legacy"], help="kv pool mode")
    parser.add_argument("--capacity-gb", type=float, help="pool capacity in GB (1e9 bytes)")
    parser.add_argument("--compress-mode", choices=["linear", "attention"])
    parser.add_argument("--compress-factor", type=int, help="tokens per compressed chunk")
    parser.add_argument(
        "--coupled", action="store_true", help="prefill and decode share one executor"
    )


def _flag_values(args: argparse.Namespace) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.scheduler:
        values["scheduler.policy"] = args.scheduler
    if args.rate is not None:
        values["workload.rate_req_per_s"] = repr(args.rate)
    if args.duration is not None:
        values["workload.duration_s"] = repr(args.duration)
    if args.requests is not None:
        values["workload.num_requests"] = str(args.requests)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.cost_preset:
        values["cost.preset"] = args.cost_preset
    if args.pool_mode:
        values["pool.mode"] = args.pool_mode
    if args.capacity_gb is not None:
        values["pool.capacity_gb"] = repr(args.capacity_gb)
    if args.compress_mode:
        values["compress.mode"] = args.compress_mode
    if args.compress_factor is not None:
        values["compress.factor"] = str(args.compress_factor)
    if args.workload:
        key = "workload.preset" if args.workload in WORKLOAD_PRESETS else "workload.trace"
        values[key] = args.workload
    if args.coupled:
        values["engine.coupled"] = "on"
    return values


def _build(args: argparse.Namespace):
    file_values = parse_config_file(args.config) if args.config else None
    return build_config(file_values, _flag_values(args), out_dir=args.out)


def _num(value, spec: str = "{:.4f}") -> str:
    return "-" if value is None else spec.format(value)


def _print_summary(report: MetricsReport) -> None:
    a = report.aggregates
    print(f"config {a['config_hash']}  seed {a['seed']}  policy {a['policy']}")
    diverged = "yes" if a["diverged"] else "no"
    print(
        f"  completed {a['n_completed']}/{a['n_arrived']}"
        f"  makespan {_num(a['makespan_s'], '{:.2f}')} s  diverged {diverged}"
    )
    print(
        f"  ttft mean {_num(a['mean_ttft_s'])} s  p95 {_num(a['p95_ttft_s'])} s"
        f"  | tpot mean {_num(a['mean_tpot_s'])} s"
        f"  | slo(ttft<=2s) {_num(a['slo_ttft_frac'], '{:.3f}')}"
    )
    print(
        f"  throughput {_num(a['throughput_tokens_per_s'], '{:.1f}')} tok/s"
        f"  {_num(a['throughput_req_per_s'], '{:.2f}')} req/s"
        f"  | utilization {_num(a['utilization_ratio'], '{:.3f}')}"
    )
    peak = a["peak_pool_bytes"] / 1e9
    avg = a["avg_pool_bytes"] / 1e9
    reclaimed = a["zombie_bytes_reclaimed"] / 1e9
    print(f"  pool peak {peak:.2f} GB  avg {avg:.2f} GB  zombies reclaimed {reclaimed:.2f} GB")


def cmd_run(args: argparse.Namespace) -> int:
    config = _build(args)
    report, paths = run_and_export(config)
    _print_summary(report)
    print("  artifacts: " + "  ".join(str(p) for p in paths.values()))
    return 0


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _build(args)
    spec = SweepSpec(
        base=base,
        rates=_float_list(args.rates) if args.rates is not None else None,
        policies=_str_list(args.schedulers) if args.schedulers is not None else None,
        reps=args.reps,
    )
    rows = run_sweep(spec)
    for row in rows:
        print(
            f"rate {row['rate_req_per_s']:g}  seed {row['seed']}  {row['policy']}"
            f"  ttft {_num(row['mean_ttft_s'])} s"
            f"  tok/s {_num(row['throughput_tokens_per_s'], '{:.1f}')}"
            f"  util {_num(row['utilization_ratio'], '{:.3f}')}"
        )
    print(f"wrote {len(rows)} rows to {args.out}/sweep.csv")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _build(args)
    rows, deltas = run_ablation(config, args.which)
    for row in rows:
        label = row["policy"] if args.which == "batching" else row["config_hash"]
        print(
            f"{label}  ttft {_num(row['mean_ttft_s'])} s"
            f"  tok/s {_num(row['throughput_tokens_per_s'], '{:.1f}')}"
            f"  peak {row['peak_pool_bytes'] / 1e9:.2f} GB"
            f"  avg {row['avg_pool_bytes'] / 1e9:.2f} GB"
        )
    for name, value in deltas.items():
        print(f"{name}: {value:.4f}")
    print(f"wrote {args.out}/ablation.csv")
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    config = _build(args)
    if config.workload is None:
        raise ConfigError("gen-trace needs a workload profile, not a trace path")
    requests = generate(replace(config.workload, seed=config.seed))
    save_trace(args.out, requests)
    print(
        f"wrote {len(requests)} requests to {args.out}"
        f" (rate {config.workload.rate_req_per_s:g}/s, seed {config.seed})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvservesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one simulation and export CSV artifacts")
    _common_flags(run_p)
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="grid of rates x schedulers, consolidated sweep.csv")
    _common_flags(sweep_p)
    sweep_p.add_argument("--out", default="out", help="output directory")
    sweep_p.add_argument("--rates", help="comma-separated rate list, e.g. 1,4,7,10")
    sweep_p.add_argument("--schedulers", help="comma-separated policy list")
    sweep_p.add_argument("--reps", type=int, default=1, help="seeds per point (seed, seed+1, ...)")
    sweep_p.set_defaults(func=cmd_sweep)

    ablate_p = sub.add_parser("ablate", help="paired runs isolating one mechanism")
    _common_flags(ablate_p)
    ablate_p.add_argument("--out", default="out", help="output directory")
    ablate_p.add_argument("--which", required=True, choices=["pool", "batching"])
    ablate_p.set_defaults(func=cmd_ablate)

    trace_p = sub.add_parser("gen-trace", help="write a workload trace csv")
    _common_flags(trace_p)
    trace_p.add_argument("--out", default="trace.csv", help="output trace file")
    trace_p.set_defaults(func=cmd_gen_trace)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"runtime error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
