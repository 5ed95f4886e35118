"""Acceptance gate: the nine release criteria, one test each.

Every test prints a single PASS/FAIL line (visible with ``pytest -s`` or in
the captured output of a failure) and then asserts, so the gate reads the
same from the terminal report and from the printed summary. Criteria with a
stated runtime budget assert the elapsed wall time too.
"""

from __future__ import annotations

import math
import time

import numpy as np

from mlaref.cli import main as cli_main
from mlaref.costmodel import (
    PARALLELISM_PRESETS,
    WorkloadShape,
    cost_breakdown,
    get_hardware_preset,
    hbm_footprint,
    part_time,
    roofline_throughput,
)
from mlaref.hybrid import FallbackPolicy, combine_lse
from mlaref.mla import AttentionPartial, attend_naive, get_model_preset
from mlaref.numerics import softmax_lse_rows
from mlaref.simbench import LengthDist, WorkloadSpec, run_simulation, speedup_report
from mlaref.verify import run_exactness_suite
from test_kvcache import run_cache_fuzz

DS = get_model_preset("deepseek-v3")
KIMI = get_model_preset("kimi-k2")
NPU = get_hardware_preset("ascend-910-class")
FIG2 = get_hardware_preset("fig2-npu")


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


def test_criterion_1_exactness_suite():
    t0 = time.perf_counter()
    r64 = run_exactness_suite(trials=500, seed=101, dtype=np.float64)
    r32 = run_exactness_suite(trials=500, seed=102, dtype=np.float32)
    elapsed = time.perf_counter() - t0
    ok = r64.passed and r32.passed and elapsed < 30.0
    _verdict(
        1,
        "exactness-500x2",
        ok,
        f"f64 max {r64.max_err:.3e} <= 1e-10, f32 max {r32.max_err:.3e} <= 1e-5, "
        f"{elapsed:.1f}s < 30s",
    )


def test_criterion_2_split_invariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        heads = int(rng.integers(1, 9))
        dim = int(rng.integers(2, 24))
        dv = int(rng.integers(1, 24))
        length = int(rng.integers(1, 49))
        cut = int(rng.integers(0, length + 1))
        q_nope = rng.standard_normal((heads, dim))
        keys = rng.standard_normal((length, heads, dim))
        values = rng.standard_normal((length, heads, dv))
        scale = 1.0 / math.sqrt(dim)
        scores = np.einsum("hd,lhd->hl", q_nope, keys) * scale
        probs, lse = softmax_lse_rows(scores)
        full_out = np.einsum("hl,lhv->hv", probs, values)

        def attend_range(lo, hi):
            if lo == hi:
                return AttentionPartial.empty(heads, dv, dtype=np.float64)
            p, l = softmax_lse_rows(scores[:, lo:hi])
            return AttentionPartial(
                output=np.einsum("hl,lhv->hv", p, values[lo:hi]), lse=l
            )

        merged = combine_lse(attend_range(0, cut), attend_range(cut, length))
        err = max(
            float(np.max(np.abs(merged.output - full_out))),
            float(np.max(np.abs(merged.lse - lse))),
        )
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5.0
    _verdict(2, "split-invariance-100", ok, f"max abs err {worst:.3e} <= 1e-10, {elapsed:.1f}s < 5s")


def test_criterion_3_table_coefficients():
    checks = [
        DS.expanded_token_elems == 40960,
        DS.naive_token_macs == 40960,
        DS.absorb_token_macs == 139264,
        DS.latent_token_elems == 576,
        KIMI.expanded_token_elems == 20480,
        KIMI.naive_token_macs == 20480,
        KIMI.absorb_token_macs == 69632,
        KIMI.latent_token_elems == 576,
    ]
    _verdict(
        3,
        "per-token-coefficients",
        all(checks),
        "deepseek-v3 40960/139264/576, kimi-k2 20480/69632/576, exact integers",
    )


def test_criterion_4_cost_dominance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    violations = 0
    for _ in range(1000):
        shape = WorkloadShape(
            batch=int(rng.integers(1, 65537)),
            query_len=int(rng.integers(1, 9)),
            shared_len=int(rng.integers(0, 100000)),
            nonshared_len=int(rng.integers(0, 20000)),
        )
        cfg = DS if rng.random() < 0.5 else KIMI
        h = cost_breakdown("hybrid", shape, cfg)
        a = cost_breakdown("absorb", shape, cfg)
        n = cost_breakdown("naive", shape, cfg)
        if h.macs_total > a.macs_total:
            violations += 1
        elif (h.macs_total == a.macs_total) != (shape.shared_len == 0):
            violations += 1
        if h.hbm_elems_total > n.hbm_elems_total:
            violations += 1
        elif (h.hbm_elems_total == n.hbm_elems_total) != (shape.nonshared_len == 0):
            violations += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 1.0
    _verdict(
        4,
        "dominance-1000",
        ok,
        f"{violations} violations over 1000 shapes, {elapsed:.2f}s < 1s",
    )


def test_criterion_5_ratio_reproductions():
    # (a) compute-bound throughput ratio between the two uniform methods.
    shape = WorkloadShape(batch=65536, query_len=1, shared_len=4096, nonshared_len=0)
    tp_naive = roofline_throughput("naive", shape, DS, NPU)
    tp_absorb = roofline_throughput("absorb", shape, DS, NPU)
    ratio_compute = tp_naive / tp_absorb
    ok_a = abs(ratio_compute - 3.4) <= 0.05

    # (b) per-token non-shared read ratio.
    shape_b = WorkloadShape(batch=64, query_len=1, shared_len=0, nonshared_len=1000)
    n = cost_breakdown("naive", shape_b, DS)
    h = cost_breakdown("hybrid", shape_b, DS)
    ratio_hbm = n.hbm_elems_nonshared / h.hbm_elems_nonshared
    ok_b = abs(ratio_hbm - 71.1) <= 0.5

    # (c) shared-attention time ratio at the 64-head reference shape.
    shape_c = WorkloadShape(batch=1024, query_len=1, shared_len=4096, nonshared_len=512)
    ac = cost_breakdown("absorb", shape_c, KIMI)
    hc = cost_breakdown("hybrid", shape_c, KIMI)
    t_absorb = part_time(2 * ac.macs_shared, ac.hbm_elems_shared * FIG2.dtype_bytes, FIG2)
    t_hybrid = part_time(2 * hc.macs_shared, hc.hbm_elems_shared * FIG2.dtype_bytes, FIG2)
    ratio_shared = t_absorb / t_hybrid
    ok_c = 3.0 <= ratio_shared <= 3.6

    _verdict(
        5,
        "ratio-reproductions",
        ok_a and ok_b and ok_c,
        f"compute {ratio_compute:.3f} in 3.4+-0.05, reads {ratio_hbm:.2f} in 71.1+-0.5, "
        f"shared-time {ratio_shared:.3f} in [3.0, 3.6]",
    )


def test_criterion_6_crossover_batch(tmp_path):
    out = tmp_path / "threshold"
    code = cli_main(
        [
            "threshold",
            "--output",
            str(out),
            "--hardware",
            "ascend-910-class",
            "--model",
            "deepseek-v3",
            "--no-plots",
        ]
    )
    import csv

    with open(out / "threshold.csv", newline="") as f:
        row = next(csv.DictReader(f))
    analytic = float(row["analytic"])
    sched = int(row["scheduling_batch"])
    ok = code == 0 and 60.0 <= analytic <= 64.0 and sched == 64
    _verdict(
        6,
        "crossover-batch-64",
        ok,
        f"threshold command: analytic {analytic:.4f} in [60, 64], rounded {sched} == 64",
    )


def test_criterion_7_footprint_overhead():
    par = PARALLELISM_PRESETS["npu-pod-384-deepseek-v3"]
    grid_b = [4096, 8192, 16384, 32768]
    grid_s = [32768, 65536, 131072, 262144]
    ratios = {
        (b, s): hbm_footprint(DS, par, batch=b, max_seq=s, shared_len=26472).overhead_ratio
        for b in grid_b
        for s in grid_s
    }
    monotone = all(
        ratios[(grid_b[i], s)] > ratios[(grid_b[i + 1], s)]
        for i in range(len(grid_b) - 1)
        for s in grid_s
    ) and all(
        ratios[(b, grid_s[j])] > ratios[(b, grid_s[j + 1])]
        for j in range(len(grid_s) - 1)
        for b in grid_b
    )
    corner = ratios[(32768, 262144)]
    ok = monotone and corner <= 0.05
    _verdict(
        7,
        "footprint-overhead",
        ok,
        f"monotone decreasing in B and max_seq; {100 * corner:.3f}% <= 5% at (32K, 256K)",
    )


def test_criterion_8_simulator_properties():
    # Conservation and determinism on a mixed workload.
    spec = WorkloadSpec(
        batch_size=6,
        prefix_len=512,
        tail_dist=LengthDist.uniform(1, 40),
        gen_dist=LengthDist.uniform(1, 12),
        num_requests=25,
        seed=808,
        execute_math=False,
        capacity_pages=4096,
        block_size=128,
    )
    first = run_simulation(spec, "hybrid", DS, NPU)
    second = run_simulation(spec, "hybrid", DS, NPU)
    from mlaref.simbench import generate_workload

    conserved = first.total_tokens == sum(r.gen_len for r in generate_workload(spec))
    deterministic = (
        first.total_tokens == second.total_tokens
        and first.steps == second.steps
        and abs(first.modeled_time_s - second.modeled_time_s) <= 1e-12
    )

    # Fallback equality below the threshold and dominance across batches at
    # a long-shared-prefix shape.
    policy = FallbackPolicy("auto", threshold_batch=64)
    sweep_spec = WorkloadSpec(
        batch_size=1,
        prefix_len=26472,
        tail_dist=LengthDist.fixed(512),
        gen_dist=LengthDist.fixed(2),
        num_requests=1,
        seed=809,
        execute_math=False,
        capacity_pages=50_000,
        block_size=128,
    )
    batches = [1, 8, 32, 63, 64, 65, 128, 512, 1024]
    rows = speedup_report(sweep_spec, batches, DS, NPU, policy=policy)
    by = {(r["method"], r["B"]): r for r in rows}
    below_equal = all(
        by[("hybrid", b)]["modeled_time_s"] == by[("absorb", b)]["modeled_time_s"]
        for b in batches
        if b < 64
    )
    dominance = all(by[("hybrid", b)]["speedup_vs_absorb"] >= 1.0 for b in batches)
    speedup_1024 = by[("hybrid", 1024)]["speedup_vs_absorb"]
    fast_enough = speedup_1024 >= 1.5

    ok = conserved and deterministic and below_equal and dominance and fast_enough
    _verdict(
        8,
        "simulator-properties",
        ok,
        f"tokens conserved; deterministic; equal below threshold; "
        f"hybrid >= absorb at all {len(batches)} batches; "
        f"speedup {speedup_1024:.2f}x >= 1.5x at B=1024",
    )


def test_criterion_9_cache_invariants():
    tiny = get_model_preset("tiny")
    ops = run_cache_fuzz(100_000, seed=909, config=tiny, capacity_pages=64, block_size=128)

    # Block-boundary arithmetic at the standard page size.
    from mlaref.kvcache import PagedLatentCache
    from mlaref.mla import LatentKv

    cache = PagedLatentCache(tiny, capacity_pages=8, block_size=128)
    handle = cache.register_sequence()
    token = LatentKv(
        nope=np.zeros(tiny.kv_lora_rank, dtype=np.float32),
        pe=np.zeros(tiny.rope_dim, dtype=np.float32),
    )
    boundary_exact = True
    for t in range(1, 300):
        cache.append_token(handle, token)
        boundary_exact &= cache.pages_used == -(-t // 128)

    # Shared-prefix immutability: sealed buffers reject writes.
    from mlaref.kvcache import seal_shared_prefix
    from mlaref.mla import LatentSeq, MlaWeights, project_kv

    weights = MlaWeights.random(tiny, seed=99, dtype=np.float64)
    rng = np.random.default_rng(99)
    hiddens = rng.standard_normal((4, tiny.model_dim))
    latents = LatentSeq.stack([project_kv(hiddens[t], weights, t) for t in range(4)])
    shared = seal_shared_prefix("p", latents, weights)
    immutable = True
    for arr in (shared.keys, shared.values, shared.latents.nope, shared.latents.pe):
        try:
            arr[0] = 1.0
            immutable = False
        except ValueError:
            pass

    ok = ops == 100_000 and boundary_exact and immutable
    _verdict(
        9,
        "cache-invariants",
        ok,
        f"{ops} fuzz ops page-conserving; 128-token boundaries exact; sealed prefix immutable",
    )
