"""Continuous-batching decode simulator with roofline-modeled time.

The scheduler is real (FIFO admission at step boundaries, release on
completion, page-pool backpressure) and optionally runs real engine math at
desk-scale dims, but every reported duration comes from the analytic cost
model, so throughput numbers are hardware-model statements, not wall-clock
measurements of this process. Wall time is recorded separately.

Per-step modeled time is the sum of five component times:

    stage1_attn   expanded attention over the shared prefix (hybrid/naive)
    stage2_attn   latent attention (tails for hybrid; full context for absorb)
    wkvb1_proj    latent key-side projection work
    wkvb2_proj    latent value-side projection work
    combine_lse   partial merge traffic, hybrid branch only

Attention components also carry a shared/non-shared decomposition so the
shared-part cost of different methods can be compared directly.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import hybrid as hy
from .costmodel import HardwareProfile, part_time
from .kvcache import CapacityError, EngineStore
from .mla import MlaConfig, MlaWeights, project_kv, project_query, scaled_config

COMPONENTS = ("stage1_attn", "stage2_attn", "wkvb1_proj", "wkvb2_proj", "combine_lse")

SIM_METHODS = ("naive", "absorb", "hybrid")
_SIM_METHOD_ALIASES = {"naive": "naive", "absorb": "absorb", "hybrid": "hybrid", "typhoon": "hybrid"}

PREFIX_ID = "shared-prefix"


@dataclass(frozen=True)
class LengthDist:
    """Request-length distribution: fixed n, uniform[a, b], or lognormal(mu,
    sigma). Samples are rounded to ints and clamped to >= 1."""

    kind: str
    a: float
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown length distribution {self.kind!r}")
        if self.kind == "fixed" and self.a < 1:
            raise ValueError("fixed length must be >= 1")
        if self.kind == "uniform" and not (1 <= self.a <= self.b):
            raise ValueError("uniform bounds need 1 <= a <= b")
        if self.kind == "lognormal" and self.b < 0:
            raise ValueError("lognormal sigma must be >= 0")

    @classmethod
    def fixed(cls, n: int) -> "LengthDist":
        return cls("fixed", float(n))

    @classmethod
    def uniform(cls, a: int, b: int) -> "LengthDist":
        return cls("uniform", float(a), float(b))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LengthDist":
        return cls("lognormal", mu, sigma)

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.a)
        if self.kind == "uniform":
            return int(rng.integers(int(self.a), int(self.b) + 1))
        return max(1, int(round(rng.lognormal(self.a, self.b))))

    def mean(self) -> float:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return (self.a + self.b) / 2.0
        return float(np.exp(self.a + self.b**2 / 2.0))

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"fixed({int(self.a)})"
        if self.kind == "uniform":
            return f"uniform({int(self.a)},{int(self.b)})"
        return f"lognormal({self.a},{self.b})"

    @classmethod
    def parse(cls, text: str) -> "LengthDist":
        """Parse 'fixed:N', 'uniform:A:B', 'lognormal:MU:SIGMA', or a bare int."""
        text = text.strip()
        if ":" not in text:
            return cls.fixed(int(text))
        parts = text.split(":")
        kind = parts[0].lower()
        if kind == "fixed" and len(parts) == 2:
            return cls.fixed(int(parts[1]))
        if kind == "uniform" and len(parts) == 3:
            return cls.uniform(int(parts[1]), int(parts[2]))
        if kind == "lognormal" and len(parts) == 3:
            return cls.lognormal(float(parts[1]), float(parts[2]))
        raise ValueError(f"cannot parse length distribution {text!r}")


@dataclass(frozen=True)
class Request:
    tail_len: int
    gen_len: int


@dataclass(frozen=True)
class WorkloadSpec:
    """Everything a simulation run consumes.

    execute_math runs real projections/attention at ``run_config`` scale in
    addition to the cost accounting; switch it off for large shapes where
    only modeled time is wanted. The cost model always uses the full model
    config passed to run_simulation, never run_config.
    """

    batch_size: int
    prefix_len: int
    tail_dist: LengthDist
    gen_dist: LengthDist
    num_requests: int
    seed: int = 0
    execute_math: bool = True
    capacity_pages: int = 4096
    block_size: int = 128

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.num_requests < 1:
            raise ValueError("batch_size and num_requests must be >= 1")
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    """Reproducible (tail_len, gen_len) stream for the run's seed."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.num_requests):
        tail = spec.tail_dist.sample(rng)
        gen = spec.gen_dist.sample(rng)
        out.append(Request(tail_len=tail, gen_len=gen))
    return out


@dataclass
class StepTrace:
    """One scheduler step: shape, branch, costs, and component times."""

    step: int
    active: int
    mode: str
    tokens: int
    stage1_macs: int
    stage2_macs: int
    stage1_elems: int
    stage2_elems: int
    combine_elems: int
    attn_shared_time: float
    attn_nonshared_time: float
    component_times: dict[str, float] = field(default_factory=dict)

    @property
    def step_time(self) -> float:
        return sum(self.component_times.values())

    def to_row(self) -> dict:
        row = {
            "step": self.step,
            "active": self.active,
            "mode": self.mode,
            "tokens": self.tokens,
            "stage1_macs": self.stage1_macs,
            "stage2_macs": self.stage2_macs,
            "stage1_elems": self.stage1_elems,
            "stage2_elems": self.stage2_elems,
            "combine_elems": self.combine_elems,
            "attn_shared_time": self.attn_shared_time,
            "attn_nonshared_time": self.attn_nonshared_time,
            "step_time": self.step_time,
        }
        for name in COMPONENTS:
            row[name] = self.component_times.get(name, 0.0)
        return row


@dataclass
class SimReport:
    """Aggregate simulation result; tokens_per_s uses modeled time only."""

    method: str
    batch_size: int
    prefix_len: int
    num_requests: int
    total_tokens: int
    steps: int
    modeled_time_s: float
    wall_time_s: float
    tokens_per_s: float
    component_times: dict[str, float]
    attn_shared_time: float
    attn_nonshared_time: float
    requests_completed: int
    peak_active: int
    executed_math: bool
    output_checksum: float | None
    cost_model: str
    hardware: str
    seed: int
    trace: list[StepTrace] = field(default_factory=list)

    def to_dict(self, include_trace: bool = False) -> dict:
        d = {
            "method": self.method,
            "batch_size": self.batch_size,
            "prefix_len": self.prefix_len,
            "num_requests": self.num_requests,
            "total_tokens": self.total_tokens,
            "steps": self.steps,
            "modeled_time_s": self.modeled_time_s,
            "wall_time_s": self.wall_time_s,
            "tokens_per_s": self.tokens_per_s,
            "component_times": dict(self.component_times),
            "attn_shared_time": self.attn_shared_time,
            "attn_nonshared_time": self.attn_nonshared_time,
            "requests_completed": self.requests_completed,
            "peak_active": self.peak_active,
            "executed_math": self.executed_math,
            "output_checksum": self.output_checksum,
            "cost_model": self.cost_model,
            "hardware": self.hardware,
            "seed": self.seed,
        }
        if include_trace:
            d["trace"] = [t.to_row() for t in self.trace]
        return d


class _ActiveSeq:
    __slots__ = ("req_index", "tail_len", "gen_len", "generated", "handle", "query", "rng")

    def __init__(self, req_index: int, req: Request, rng: np.random.Generator) -> None:
        self.req_index = req_index
        self.tail_len = req.tail_len
        self.gen_len = req.gen_len
        self.generated = 0
        self.handle = None
        self.query = None
        self.rng = rng

    @property
    def cache_len(self) -> int:
        return self.tail_len + self.generated


class _PageMeter:
    """Arithmetic stand-in for the page pool when no arrays are allocated.

    Enforces the same conservation and capacity rules: a sequence of n tail
    tokens owns ceil(n / block_size) pages; exhaustion raises CapacityError.
    """

    def __init__(self, capacity_pages: int, block_size: int) -> None:
        self.capacity = capacity_pages
        self.block = block_size
        self.used = 0

    def _claim(self, pages: int, what: str) -> None:
        if self.used + pages > self.capacity:
            raise CapacityError(
                f"page pool exhausted ({self.used}/{self.capacity} pages used, "
                f"{pages} more needed) while {what}"
            )
        self.used += pages

    def admit(self, tokens: int) -> None:
        self._claim(-(-tokens // self.block) if tokens else 0, "admitting a sequence")

    def grow(self, length_before: int) -> None:
        if length_before % self.block == 0:
            self._claim(1, "appending a generated token")

    def release(self, tokens: int) -> None:
        self.used -= -(-tokens // self.block)


def _component_times(cost: hy.StepCost, hw: HardwareProfile) -> tuple[dict[str, float], float, float]:
    """Roofline times for one step's components plus the shared/non-shared
    attention decomposition."""
    b = hw.dtype_bytes
    shared_t = part_time(2 * cost.shared_attn_macs, cost.shared_attn_elems * b, hw)
    nonshared_t = part_time(2 * cost.nonshared_attn_macs, cost.nonshared_attn_elems * b, hw)
    if cost.mode == hy.BRANCH_HYBRID:
        stage1, stage2 = shared_t, nonshared_t
    elif cost.mode == hy.BRANCH_ABSORB:
        stage1, stage2 = 0.0, shared_t + nonshared_t
    else:
        stage1, stage2 = shared_t + nonshared_t, 0.0
    times = {
        "stage1_attn": stage1,
        "stage2_attn": stage2,
        "wkvb1_proj": part_time(2 * cost.wkvb1_macs, cost.wkvb_weight_elems * b / 2, hw),
        "wkvb2_proj": part_time(2 * cost.wkvb2_macs, cost.wkvb_weight_elems * b / 2, hw),
        "combine_lse": part_time(0.0, cost.combine_elems * b, hw),
    }
    return times, shared_t, nonshared_t


def run_simulation(
    spec: WorkloadSpec,
    method: str,
    cost_config: MlaConfig,
    hw: HardwareProfile,
    policy: hy.FallbackPolicy | None = None,
    run_config: MlaConfig | None = None,
    keep_trace: bool = True,
) -> SimReport:
    """Drive the decode loop to request exhaustion.

    Args:
        spec: workload description (lengths, batch, seed, math switch).
        method: naive | absorb | hybrid (hybrid obeys ``policy``).
        cost_config: full model dims used for every cost figure.
        hw: hardware profile for roofline times.
        policy: batch fallback policy for the hybrid method; defaults to
            auto with the standard threshold.
        run_config: scaled dims for real math; defaults to a desk-scale
            shrink of cost_config. Ignored when spec.execute_math is False.

    Raises:
        CapacityError: the page pool cannot hold an admitted sequence's tail
            (the error message carries the pool stats for backpressure
            decisions).
    """
    method = _SIM_METHOD_ALIASES.get(method.strip().lower())
    if method is None:
        raise ValueError(f"unknown simulation method; known: {sorted(set(_SIM_METHOD_ALIASES))}")
    policy = policy or hy.FallbackPolicy()
    requests = generate_workload(spec)
    wall_start = time.perf_counter()

    do_math = spec.execute_math
    store = weights = None
    prefix_hiddens = None
    if do_math:
        rc = run_config or scaled_config(cost_config)
        weights = MlaWeights.random(rc, seed=spec.seed + 1)
        store = EngineStore(
            rc, capacity_pages=spec.capacity_pages, block_size=spec.block_size
        )
        master = np.random.default_rng(spec.seed + 2)
        if spec.prefix_len > 0:
            prefix_hiddens = master.standard_normal((spec.prefix_len, rc.model_dim)).astype(
                np.float32
            )

    pending = deque(
        _ActiveSeq(i, r, np.random.default_rng((spec.seed << 20) + i))
        for i, r in enumerate(requests)
    )
    active: list[_ActiveSeq] = []
    meter = None if do_math else _PageMeter(spec.capacity_pages, spec.block_size)
    component_totals = {name: 0.0 for name in COMPONENTS}
    attn_shared_total = 0.0
    attn_nonshared_total = 0.0
    trace: list[StepTrace] = []
    total_tokens = 0
    steps = 0
    peak_active = 0
    completed = 0
    checksum = 0.0

    def admit(seq: _ActiveSeq) -> None:
        if do_math:
            tail = seq.rng.standard_normal((seq.tail_len, weights.config.model_dim)).astype(
                np.float32
            )
            handles, states = hy.prefill(
                prefix_hiddens, [tail], weights, store, prefix_id=PREFIX_ID
            )
            seq.handle, seq.query = handles[0], states[0]
        else:
            meter.admit(seq.tail_len)
            seq.handle = None
            seq.query = None
        seq.generated = 0

    while pending or active:
        while pending and len(active) < spec.batch_size:
            seq = pending.popleft()
            admit(seq)
            active.append(seq)
        if not active:
            break
        peak_active = max(peak_active, len(active))
        batch = len(active)

        if method == "hybrid":
            branch = policy.resolve(batch)
        else:
            branch = method

        # Per-query visible lengths for this step's accounting.
        shared_lens = [spec.prefix_len] * batch
        tail_lens = [s.tail_len + s.generated for s in active]
        distinct_shared = [spec.prefix_len] if spec.prefix_len > 0 else []
        cost = hy.step_cost(
            mode=branch,
            config=cost_config,
            shared_lens=shared_lens,
            distinct_shared_lens=distinct_shared,
            tail_lens=tail_lens,
        )
        times, shared_t, nonshared_t = _component_times(cost, hw)

        if do_math:
            queries = [s.query for s in active]
            handles = [s.handle for s in active]
            step_policy = hy.FallbackPolicy(
                mode=hy.MODE_FORCE_HYBRID if branch == hy.BRANCH_HYBRID else hy.MODE_FORCE_ABSORB,
                threshold_batch=policy.threshold_batch,
            )
            if branch == hy.BRANCH_NAIVE:
                outputs = _naive_step(queries, handles, store, weights)
            else:
                outputs, _ = hy.batched_decode(
                    queries, handles, store, weights, step_policy
                )
            checksum += float(np.mean([np.mean(np.abs(o)) for o in outputs]))
            for seq in active:
                pos = spec.prefix_len + seq.handle.length
                hidden = seq.rng.standard_normal(weights.config.model_dim).astype(np.float32)
                store.paged.append_token(seq.handle, project_kv(hidden, weights, pos))
                seq.query = project_query(hidden, weights, pos)

        if not do_math:
            for seq in active:
                meter.grow(seq.cache_len)
        for name in COMPONENTS:
            component_totals[name] += times[name]
        attn_shared_total += shared_t
        attn_nonshared_total += nonshared_t
        total_tokens += batch
        for seq in active:
            seq.generated += 1
        steps += 1
        if keep_trace:
            trace.append(
                StepTrace(
                    step=steps,
                    active=batch,
                    mode=branch,
                    tokens=batch,
                    stage1_macs=cost.stage1_macs,
                    stage2_macs=cost.stage2_macs,
                    stage1_elems=cost.stage1_elems,
                    stage2_elems=cost.stage2_elems,
                    combine_elems=cost.combine_elems,
                    attn_shared_time=shared_t,
                    attn_nonshared_time=nonshared_t,
                    component_times=times,
                )
            )

        still_active = []
        for seq in active:
            if seq.generated >= seq.gen_len:
                completed += 1
                if do_math:
                    store.paged.release_sequence(seq.handle)
                else:
                    meter.release(seq.cache_len)
            else:
                still_active.append(seq)
        active = still_active

    modeled = sum(component_totals.values())
    wall = time.perf_counter() - wall_start
    return SimReport(
        method=method,
        batch_size=spec.batch_size,
        prefix_len=spec.prefix_len,
        num_requests=spec.num_requests,
        total_tokens=total_tokens,
        steps=steps,
        modeled_time_s=modeled,
        wall_time_s=wall,
        tokens_per_s=total_tokens / modeled if modeled > 0 else 0.0,
        component_times=component_totals,
        attn_shared_time=attn_shared_total,
        attn_nonshared_time=attn_nonshared_total,
        requests_completed=completed,
        peak_active=peak_active,
        executed_math=do_math,
        output_checksum=checksum if do_math else None,
        cost_model=f"H={cost_config.num_heads},Dl={cost_config.kv_lora_rank}",
        hardware=hw.name,
        seed=spec.seed,
        trace=trace,
    )


def _naive_step(queries, handles, store, weights):
    """Reference baseline: expanded attention over the full context."""
    from .mla import LatentSeq, attend_naive, expand_latents, output_projection

    outputs = []
    for query, handle in zip(queries, handles):
        shared = store.get_prefix(handle.prefix_id)
        tail = store.paged.gather_sequence(handle)
        if shared is not None:
            context = LatentSeq.concat(shared.latents, tail)
        else:
            context = tail
        keys, values = expand_latents(context, weights)
        partial = attend_naive(query, keys, values, weights.config.softmax_scale)
        outputs.append(output_projection(partial.output, weights))
    return outputs


def speedup_report(
    spec: WorkloadSpec,
    batches: list[int],
    cost_config: MlaConfig,
    hw: HardwareProfile,
    policy: hy.FallbackPolicy | None = None,
    methods: tuple[str, ...] = ("absorb", "hybrid"),
    run_config: MlaConfig | None = None,
) -> list[dict]:
    """Modeled throughput per (method, batch) plus hybrid-over-absorb speedup.

    Methods at the same batch level replay the same workload stream (same
    seed), so the speedup column compares identical request sequences. The
    request count is raised to at least one full wave per level; a fixed
    count would leave large batches underfilled and every level identical.
    """
    rows: list[dict] = []
    for batch in batches:
        per_method: dict[str, SimReport] = {}
        for method in methods:
            report = run_simulation(
                replace(spec, batch_size=batch, num_requests=max(spec.num_requests, batch)),
                method,
                cost_config,
                hw,
                policy=policy,
                run_config=run_config,
                keep_trace=False,
            )
            per_method[report.method] = report
        base = per_method.get("absorb")
        for name, report in per_method.items():
            rows.append(
                {
                    "method": name,
                    "B": batch,
                    "tokens": report.total_tokens,
                    "steps": report.steps,
                    "modeled_time_s": report.modeled_time_s,
                    "tokens_per_s": report.tokens_per_s,
                    "speedup_vs_absorb": (
                        report.tokens_per_s / base.tokens_per_s if base is not None else float("nan")
                    ),
                }
            )
    return rows
