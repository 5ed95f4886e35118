"""Command-line front end.

Subcommands: equivalence, roofline, threshold, footprint, simulate. Global
options resolve engine settings (config file, environment, flags); every
data file gets a run manifest, and report commands also render PNG figures
next to the tables unless --no-plots is given.

Exit codes: 0 success, 2 usage or config error, 3 numeric property
violation, 4 cache capacity exhausted.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import (
    WorkloadShape,
    cost_breakdown,
    crossover_batch,
    hbm_footprint,
    normalize_method,
    part_time,
    PARALLELISM_PRESETS,
    ParallelismConfig,
    sweep_rows,
)
from .engineconfig import ConfigError, load_settings
from .kvcache import CapacityError
from .reporting import RunManifest, write_json_report, write_rows
from .simbench import LengthDist, WorkloadSpec, run_simulation, speedup_report
from .verify import TOLERANCES, run_exactness_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VIOLATION = 3
EXIT_CAPACITY = 4


def _int_list(text: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated int list, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _pow2_range(lo: int, hi: int) -> list[int]:
    out = []
    b = lo
    while b <= hi:
        out.append(b)
        b *= 2
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--seed", type=int, default=0, help="base RNG seed (default 0)")
    common.add_argument(
        "--output", metavar="DIR", default="mlaref-out", help="output directory (default mlaref-out)"
    )
    common.add_argument(
        "--format", choices=("csv", "jsonl"), default=None, help="table format (default csv)"
    )
    common.add_argument("--no-plots", action="store_true", help="skip PNG figure rendering")
    common.add_argument("--model", metavar="PRESET", help="model preset override")
    common.add_argument("--hardware", metavar="PRESET", help="hardware preset override")
    common.add_argument("--dtype-bytes", type=int, help="cache dtype width override (1=FP8, 2=FP16)")

    parser = argparse.ArgumentParser(
        prog="mlaref",
        description="latent-attention decode engine: exactness checks, cost model, simulator",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "equivalence",
        parents=[common],
        help="randomized agreement checks between the three attention paths",
    )
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument(
        "--inject-fault",
        action="store_true",
        help="perturb one weight copy on the latent path; the run must then fail",
    )
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser(
        "roofline", parents=[common], help="modeled throughput sweep over batch sizes"
    )
    p.add_argument("--methods", default="naive,absorb,hybrid", help="comma list (default all)")
    p.add_argument("--batches", type=_int_list, default=None, help="batch sizes (default 1..4096 pow2)")
    p.add_argument("--query-len", type=int, default=1)
    p.add_argument("--shared-len", type=int, default=4096)
    p.add_argument("--nonshared-len", type=int, default=0)
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser(
        "threshold", parents=[common], help="naive/absorb shared-part crossover batch"
    )
    p.add_argument("--shared-len", type=int, default=4096, help="context for the figure curves")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser(
        "footprint", parents=[common], help="per-device HBM budget over a (batch, max_seq) grid"
    )
    p.add_argument("--batches", type=_int_list, default=[4096, 8192, 16384, 32768])
    p.add_argument("--max-seqs", type=_int_list, default=[32768, 65536, 131072, 262144])
    p.add_argument("--shared-len", type=int, default=26472)
    p.add_argument(
        "--parallelism",
        default="npu-pod-384-deepseek-v3",
        help=f"preset: {', '.join(sorted(PARALLELISM_PRESETS))}",
    )
    p.add_argument("--devices", type=int)
    p.add_argument("--dp", type=int)
    p.add_argument("--tp", type=int)
    p.add_argument("--sp", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--weight-params", type=float)
    p.add_argument("--weight-dtype-bytes", type=int)
    p.add_argument("--cache-dtype-bytes", type=int)
    p.add_argument(
        "--no-expanded-prefix",
        action="store_true",
        help="budget without the expanded shared-prefix region (baseline)",
    )
    p.set_defaults(func=cmd_footprint)

    p = sub.add_parser(
        "simulate", parents=[common], help="continuous-batching decode simulation"
    )
    p.add_argument("--method", default="hybrid", help="naive | absorb | hybrid (alias: typhoon)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--prefix-len", type=int, default=64)
    p.add_argument("--tail", default="fixed:16", help="tail length dist, e.g. fixed:512, uniform:8:32")
    p.add_argument("--gen", default="fixed:8", help="generation length dist, e.g. lognormal:3:0.5")
    p.add_argument("--requests", type=int, default=16)
    p.add_argument("--no-math", action="store_true", help="cost accounting only, skip real math")
    p.add_argument("--capacity-pages", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument(
        "--sweep",
        type=_int_list,
        default=None,
        help="also sweep these batch sizes for a hybrid-vs-absorb speedup table",
    )
    p.set_defaults(func=cmd_simulate)

    return parser


def _settings(args) -> tuple:
    overrides = {}
    if args.model:
        overrides[("model", "preset")] = args.model
    if args.hardware:
        overrides[("hardware", "preset")] = args.hardware
    if args.dtype_bytes:
        overrides[("hardware", "dtype_bytes")] = args.dtype_bytes
    if args.format:
        overrides[("output", "format")] = args.format
    if getattr(args, "capacity_pages", None):
        overrides[("cache", "capacity_pages")] = args.capacity_pages
    if getattr(args, "block_size", None):
        overrides[("cache", "block_size")] = args.block_size
    settings = load_settings(args.config, overrides=overrides)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    return settings, outdir


def _manifest(args, settings, extra: dict | None = None) -> RunManifest:
    return RunManifest(
        command=args.command,
        config=settings.snapshot(),
        seed=args.seed,
        extra=extra or {},
    )


def cmd_equivalence(args, settings, outdir: Path) -> int:
    dtype = np.float64 if args.dtype == "float64" else np.float32
    suite = run_exactness_suite(
        trials=args.trials, seed=args.seed, dtype=dtype, fault_injection=args.inject_fault
    )
    manifest = _manifest(
        args,
        settings,
        extra={"trials": args.trials, "dtype": args.dtype, "inject_fault": args.inject_fault},
    )
    rows = [r.to_row(i) for i, r in enumerate(suite.results)]
    table = write_rows(outdir / "equivalence", rows, settings.output_format, manifest)
    report = write_json_report(outdir / "equivalence_summary.json", suite.to_dict(), manifest)
    if not args.no_plots:
        from .plots import save_equivalence_plot

        save_equivalence_plot(rows, suite.tolerance, outdir / "equivalence_errors.png")
    status = "PASS" if suite.passed else "FAIL"
    print(
        f"equivalence {status}: {suite.trials} trials, dtype={suite.dtype}, "
        f"max rel err {suite.max_err:.3e} (tolerance {suite.tolerance:g})"
    )
    print(f"wrote {table} and {report}")
    if not suite.passed:
        print(f"{suite.failures} trial(s) exceeded tolerance", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_roofline(args, settings, outdir: Path) -> int:
    try:
        methods = [normalize_method(m) for m in args.methods.split(",") if m.strip()]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    batches = args.batches or _pow2_range(1, 4096)
    if args.shared_len + args.nonshared_len < 1:
        raise ConfigError("roofline needs shared-len + nonshared-len >= 1")
    if args.query_len < 1 or min(batches) < 1:
        raise ConfigError("roofline needs query-len >= 1 and batches >= 1")
    rows = sweep_rows(
        methods,
        batches,
        args.query_len,
        args.shared_len,
        args.nonshared_len,
        settings.model,
        settings.hardware,
    )
    cross = crossover_batch(settings.model, settings.hardware)
    rows.append(
        {
            "method": "crossover",
            "B": cross.scheduling_batch,
            "S_q": args.query_len,
            "L_s": args.shared_len,
            "L_n": args.nonshared_len,
            "macs": 0,
            "hbm_bytes": 0,
            "time_s": 0.0,
            "tokens_per_s": 0.0,
        }
    )
    manifest = _manifest(
        args,
        settings,
        extra={
            "methods": methods,
            "batches": batches,
            "crossover_analytic": cross.analytic,
            "crossover_batch": cross.batch,
            "crossover_scheduling_batch": cross.scheduling_batch,
        },
    )
    table = write_rows(outdir / "roofline", rows, settings.output_format, manifest)
    if not args.no_plots:
        from .plots import save_roofline_plot

        save_roofline_plot(rows, outdir / "roofline.png", crossover=cross.scheduling_batch)
    print(
        f"roofline: {len(methods)} methods x {len(batches)} batches on {settings.hardware.name}, "
        f"crossover B={cross.batch} (pow2 {cross.scheduling_batch})"
    )
    print(f"wrote {table}")
    return EXIT_OK


def cmd_threshold(args, settings, outdir: Path) -> int:
    cross = crossover_batch(settings.model, settings.hardware)
    hw = settings.hardware
    c = settings.model
    row = {
        "model": settings.model_name,
        "hardware": hw.name,
        "dtype_bytes": hw.dtype_bytes,
        "analytic": cross.analytic,
        "crossover_batch": cross.batch,
        "scheduling_batch": cross.scheduling_batch,
    }
    manifest = _manifest(args, settings)
    table = write_rows(outdir / "threshold", [row], settings.output_format, manifest)
    if not args.no_plots:
        from .plots import save_threshold_plot

        batches = _pow2_range(1, max(4 * cross.scheduling_batch, 8))
        ls = args.shared_len
        naive_times = []
        absorb_times = []
        for b in batches:
            shape = WorkloadShape(batch=b, query_len=1, shared_len=ls, nonshared_len=0)
            nb = cost_breakdown("naive", shape, c)
            ab = cost_breakdown("absorb", shape, c)
            naive_times.append(part_time(2 * nb.macs_shared, nb.hbm_elems_shared * hw.dtype_bytes, hw))
            absorb_times.append(part_time(2 * ab.macs_shared, ab.hbm_elems_shared * hw.dtype_bytes, hw))
        save_threshold_plot(batches, naive_times, absorb_times, cross.batch, outdir / "threshold.png")
    print(
        f"threshold on {hw.name} ({settings.model_name}): analytic {cross.analytic:.2f}, "
        f"crossover batch {cross.batch}, scheduling batch {cross.scheduling_batch}"
    )
    print(f"wrote {table}")
    return EXIT_OK


def _parallelism_from_args(args) -> ParallelismConfig:
    if args.parallelism not in PARALLELISM_PRESETS:
        raise ConfigError(
            f"unknown parallelism preset {args.parallelism!r} "
            f"(known: {sorted(PARALLELISM_PRESETS)})"
        )
    par = PARALLELISM_PRESETS[args.parallelism]
    fields = {
        "devices": args.devices,
        "dp": args.dp,
        "tp": args.tp,
        "sp": args.sp,
        "layers": args.layers,
        "weight_params": args.weight_params,
        "weight_dtype_bytes": args.weight_dtype_bytes,
        "cache_dtype_bytes": args.cache_dtype_bytes,
    }
    updates = {k: v for k, v in fields.items() if v is not None}
    try:
        return replace(par, **updates) if updates else par
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_footprint(args, settings, outdir: Path) -> int:
    par = _parallelism_from_args(args)
    rows = []
    for b in args.batches:
        for ms in args.max_seqs:
            try:
                rep = hbm_footprint(
                    settings.model,
                    par,
                    batch=b,
                    max_seq=ms,
                    shared_len=args.shared_len,
                    expanded_prefix=not args.no_expanded_prefix,
                )
            except ValueError as e:
                raise ConfigError(str(e)) from None
            d = rep.to_dict()
            d.pop("assumptions")
            d["total_gib"] = rep.total_bytes / 2**30
            rows.append(d)
    manifest = _manifest(
        args,
        settings,
        extra={
            "parallelism": {
                "devices": par.devices,
                "dp": par.dp,
                "tp": par.tp,
                "sp": par.sp,
                "layers": par.layers,
                "weight_params": par.weight_params,
                "weight_dtype_bytes": par.weight_dtype_bytes,
                "cache_dtype_bytes": par.cache_dtype_bytes,
            },
            "expanded_prefix": not args.no_expanded_prefix,
        },
    )
    table = write_rows(outdir / "footprint", rows, settings.output_format, manifest)
    if not args.no_plots and not args.no_expanded_prefix:
        from .plots import save_footprint_heatmap

        save_footprint_heatmap(rows, outdir / "footprint.png")
    worst = max(rows, key=lambda r: r["overhead_ratio"])
    print(
        f"footprint: {len(rows)} grid cells, worst expanded-prefix overhead "
        f"{100 * worst['overhead_ratio']:.2f}% at B={worst['batch']}, max_seq={worst['max_seq']}"
    )
    print(f"wrote {table}")
    return EXIT_OK


def cmd_simulate(args, settings, outdir: Path) -> int:
    try:
        tail = LengthDist.parse(args.tail)
        gen = LengthDist.parse(args.gen)
        spec = WorkloadSpec(
            batch_size=args.batch_size,
            prefix_len=args.prefix_len,
            tail_dist=tail,
            gen_dist=gen,
            num_requests=args.requests,
            seed=args.seed,
            execute_math=not args.no_math,
            capacity_pages=settings.capacity_pages,
            block_size=settings.block_size,
        )
        method = normalize_method(args.method)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    policy = settings.resolved_policy()
    report = run_simulation(spec, method, settings.model, settings.hardware, policy=policy)
    manifest = _manifest(
        args,
        settings,
        extra={
            "method": method,
            "workload": {
                "batch_size": spec.batch_size,
                "prefix_len": spec.prefix_len,
                "tail": tail.describe(),
                "gen": gen.describe(),
                "requests": spec.num_requests,
                "execute_math": spec.execute_math,
            },
        },
    )
    report_path = write_json_report(outdir / "sim_report.json", report.to_dict(), manifest)
    trace_rows = [t.to_row() for t in report.trace]
    trace_path = write_rows(outdir / "sim_trace", trace_rows, settings.output_format, manifest)
    if not args.no_plots:
        from .plots import save_breakdown_plot

        save_breakdown_plot(
            {f"{method} B={spec.batch_size}": report.component_times},
            outdir / "sim_breakdown.png",
        )
    print(
        f"simulate [{method}] B={spec.batch_size} prefix={spec.prefix_len}: "
        f"{report.total_tokens} tokens in {report.steps} steps, "
        f"modeled {report.modeled_time_s * 1e3:.3f} ms, "
        f"{report.tokens_per_s:.1f} tokens/s (policy threshold {policy.threshold_batch})"
    )
    print(f"wrote {report_path} and {trace_path}")

    if args.sweep:
        sweep = speedup_report(
            spec, args.sweep, settings.model, settings.hardware, policy=policy
        )
        sweep_path = write_rows(outdir / "speedup", sweep, settings.output_format, manifest)
        if not args.no_plots:
            from .plots import save_speedup_plot

            save_speedup_plot(sweep, outdir / "speedup.png")
        hybrid_rows = [r for r in sweep if r["method"] == "hybrid"]
        best = max(hybrid_rows, key=lambda r: r["speedup_vs_absorb"])
        print(
            f"sweep: best hybrid speedup {best['speedup_vs_absorb']:.2f}x at B={best['B']}; "
            f"wrote {sweep_path}"
        )
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings, outdir = _settings(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, settings, outdir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
