"""Analytic cost model: MAC and HBM-traffic counts per decode step, roofline
times, the naive/absorb batch crossover, and a device-memory footprint model.

Counting conventions, per step over a batch of B sequences each issuing S_q
query tokens against a context of L_s shared plus L_n non-shared tokens:

    method   MACs                                   HBM reads (elements)
    naive    B*S_q*(L_s+L_n) * H*(D_qk+D_v)         (L_s + B*L_n) * H*(D_qk+D_v)
    absorb   B*S_q*(L_s+L_n) * H*(2*D_l+D_r)        (L_s + B*L_n) * (D_l+D_r)
    hybrid   B*S_q*(L_s*H*(D_qk+D_v)                L_s*H*(D_qk+D_v)
                    + L_n*H*(2*D_l+D_r))              + B*L_n*(D_l+D_r)

with H heads, D_qk = nope+rope per-head key dim, D_v per-head value dim,
D_l latent rank, D_r rotary dim. Shared reads count once per step because
every query reuses the same buffer. FLOPs = 2 * MACs throughout. All count
functions are exact integer arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .mla import MlaConfig

METHOD_NAIVE = "naive"
METHOD_ABSORB = "absorb"
METHOD_HYBRID = "hybrid"
METHODS = (METHOD_NAIVE, METHOD_ABSORB, METHOD_HYBRID)

# Accepted spellings for method tags in configs, CLI flags, and sweep files.
_METHOD_ALIASES = {
    "naive": METHOD_NAIVE,
    "absorb": METHOD_ABSORB,
    "hybrid": METHOD_HYBRID,
    "typhoon": METHOD_HYBRID,
}


def normalize_method(name: str) -> str:
    try:
        return _METHOD_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown method {name!r} (known: {sorted(_METHOD_ALIASES)})") from None


@dataclass(frozen=True)
class WorkloadShape:
    """One decode-step shape: batch, query tokens per sequence, context split."""

    batch: int
    query_len: int
    shared_len: int
    nonshared_len: int

    def __post_init__(self) -> None:
        for name in ("batch", "query_len", "shared_len", "nonshared_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"WorkloadShape.{name} must be a non-negative int, got {v!r}")

    @property
    def query_tokens(self) -> int:
        return self.batch * self.query_len


@dataclass(frozen=True)
class HardwareProfile:
    """Peak compute (FLOPs/s), HBM bandwidth (bytes/s), cache dtype width."""

    name: str
    peak_flops: float
    hbm_bandwidth: float
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        if self.peak_flops <= 0 or self.hbm_bandwidth <= 0:
            raise ValueError("peak_flops and hbm_bandwidth must be positive")
        if self.dtype_bytes < 1:
            raise ValueError("dtype_bytes must be >= 1")


HARDWARE_PRESETS: dict[str, HardwareProfile] = {
    # NPU class: 376 TFLOPS dense FP16, 1.8 TB/s.
    "ascend-910-class": HardwareProfile("ascend-910-class", 376e12, 1.8e12, 2),
    # Round-number NPU used for roofline illustrations: 400 TFLOPS, 1.8 TB/s.
    "fig2-npu": HardwareProfile("fig2-npu", 400e12, 1.8e12, 2),
    # Large GPU class: 1 PFLOPS dense FP16, 3.3 TB/s.
    "gpu-h-class": HardwareProfile("gpu-h-class", 1e15, 3.3e12, 2),
}


def get_hardware_preset(name: str, dtype_bytes: int | None = None) -> HardwareProfile:
    try:
        hw = HARDWARE_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(HARDWARE_PRESETS))
        raise KeyError(f"unknown hardware preset {name!r} (known: {known})") from None
    if dtype_bytes is not None and dtype_bytes != hw.dtype_bytes:
        hw = HardwareProfile(hw.name, hw.peak_flops, hw.hbm_bandwidth, dtype_bytes)
    return hw


@dataclass(frozen=True)
class CostBreakdown:
    """Integer MAC and element counts for one method at one shape, split into
    the shared-context part and the non-shared part."""

    method: str
    shape: WorkloadShape
    macs_shared: int
    macs_nonshared: int
    hbm_elems_shared: int
    hbm_elems_nonshared: int

    @property
    def macs_total(self) -> int:
        return self.macs_shared + self.macs_nonshared

    @property
    def hbm_elems_total(self) -> int:
        return self.hbm_elems_shared + self.hbm_elems_nonshared

    def hbm_bytes(self, dtype_bytes: int) -> int:
        return self.hbm_elems_total * dtype_bytes

    @property
    def flops_total(self) -> int:
        return 2 * self.macs_total


def cost_breakdown(method: str, shape: WorkloadShape, config: MlaConfig) -> CostBreakdown:
    """MACs and HBM reads for one decode step; see the module docstring."""
    method = normalize_method(method)
    c = config
    q = shape.query_tokens
    ls, ln, b = shape.shared_len, shape.nonshared_len, shape.batch
    naive_c, absorb_c, latent_c = c.naive_token_macs, c.absorb_token_macs, c.latent_token_elems
    if method == METHOD_NAIVE:
        macs_s, macs_n = q * ls * naive_c, q * ln * naive_c
        elems_s, elems_n = ls * naive_c, b * ln * naive_c
    elif method == METHOD_ABSORB:
        macs_s, macs_n = q * ls * absorb_c, q * ln * absorb_c
        elems_s, elems_n = ls * latent_c, b * ln * latent_c
    else:
        macs_s, macs_n = q * ls * naive_c, q * ln * absorb_c
        elems_s, elems_n = ls * naive_c, b * ln * latent_c
    return CostBreakdown(
        method=method,
        shape=shape,
        macs_shared=macs_s,
        macs_nonshared=macs_n,
        hbm_elems_shared=elems_s,
        hbm_elems_nonshared=elems_n,
    )


def macs(method: str, shape: WorkloadShape, config: MlaConfig) -> CostBreakdown:
    """Alias of cost_breakdown; use the macs_* fields."""
    return cost_breakdown(method, shape, config)


def hbm_elems(method: str, shape: WorkloadShape, config: MlaConfig) -> CostBreakdown:
    """Alias of cost_breakdown; use the hbm_elems_* fields."""
    return cost_breakdown(method, shape, config)


def part_time(flops: float, bytes_read: float, hw: HardwareProfile) -> float:
    """Roofline time for one part: max of compute time and memory time."""
    if flops < 0 or bytes_read < 0:
        raise ValueError("flops and bytes_read must be non-negative")
    return max(flops / hw.peak_flops, bytes_read / hw.hbm_bandwidth)


def step_time(method: str, shape: WorkloadShape, config: MlaConfig, hw: HardwareProfile) -> float:
    """Modeled decode-step time: shared and non-shared parts each take their
    own roofline max, then add (they run as separate kernels)."""
    cb = cost_breakdown(method, shape, config)
    t_shared = part_time(2 * cb.macs_shared, cb.hbm_elems_shared * hw.dtype_bytes, hw)
    t_nonshared = part_time(2 * cb.macs_nonshared, cb.hbm_elems_nonshared * hw.dtype_bytes, hw)
    return t_shared + t_nonshared


def roofline_throughput(
    method: str, shape: WorkloadShape, config: MlaConfig, hw: HardwareProfile
) -> float:
    """Query tokens per second for one method at one shape.

    Raises:
        ValueError: if the shape produces no query tokens or no context.
    """
    if shape.query_tokens < 1:
        raise ValueError("throughput needs batch * query_len >= 1")
    if shape.shared_len + shape.nonshared_len < 1:
        raise ValueError("throughput needs a non-empty context")
    return shape.query_tokens / step_time(method, shape, config, hw)


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError("next_pow2 needs n >= 1")
    return 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class CrossoverResult:
    """Batch size where expanded shared-part attention starts beating absorb.

    analytic: real-valued solution of naive-memory-time == absorb-compute-time
        per shared token (math.inf when compute is free).
    batch: smallest integer batch strictly past the analytic point.
    scheduling_batch: ``batch`` rounded up to a power of two.
    """

    analytic: float
    batch: int
    scheduling_batch: int


def crossover_batch(
    config: MlaConfig, hw: HardwareProfile, max_batch: int = 1 << 20
) -> CrossoverResult:
    """Solve for the batch where the naive shared part gets cheaper.

    Per shared-context token the naive pass is memory-bound with time
    H*(D_qk+D_v)*dtype_bytes / bandwidth (batch-independent), while the
    absorb pass is compute-bound with time B * 2*H*(2*D_l+D_r) / peak.
    Both sides scale with L_s and S_q, so the crossover depends only on the
    dims and the hardware. Results are capped at ``max_batch``.
    """
    mem_per_token = config.expanded_token_elems * hw.dtype_bytes / hw.hbm_bandwidth
    compute_per_token_per_b = 2 * config.absorb_token_macs / hw.peak_flops
    if compute_per_token_per_b == 0.0:
        return CrossoverResult(analytic=math.inf, batch=max_batch, scheduling_batch=max_batch)
    analytic = mem_per_token / compute_per_token_per_b
    if analytic < 1.0:
        return CrossoverResult(analytic=analytic, batch=1, scheduling_batch=1)
    batch = min(math.floor(analytic) + 1, max_batch)
    return CrossoverResult(
        analytic=analytic, batch=batch, scheduling_batch=min(next_pow2(batch), max_batch)
    )


@dataclass(frozen=True)
class ParallelismConfig:
    """Deployment sharding for the footprint model.

    The compressed cache splits across sequence-parallel ranks and data-
    parallel replicas but is replicated across tensor-parallel ranks (its
    single latent head cannot be split by head). The expanded shared-prefix
    region splits across both tp (by head) and sp (by position). Weights
    spread evenly over all devices.
    """

    devices: int
    dp: int
    tp: int
    sp: int
    layers: int
    weight_params: float
    weight_dtype_bytes: int = 1
    cache_dtype_bytes: int = 1

    def __post_init__(self) -> None:
        for name in ("devices", "dp", "tp", "sp", "layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"ParallelismConfig.{name} must be a positive int")
        if self.devices % (self.dp * self.tp * self.sp) != 0:
            raise ValueError(
                f"dp*tp*sp = {self.dp * self.tp * self.sp} must divide devices = {self.devices}"
            )
        if self.weight_params <= 0:
            raise ValueError("weight_params must be positive")


PARALLELISM_PRESETS: dict[str, ParallelismConfig] = {
    # 384-device pod, 24-way data / 4-way tensor / 4-way sequence parallel, FP8.
    "npu-pod-384-deepseek-v3": ParallelismConfig(
        devices=384, dp=24, tp=4, sp=4, layers=61, weight_params=671e9
    ),
    "npu-pod-384-kimi-k2": ParallelismConfig(
        devices=384, dp=24, tp=4, sp=4, layers=61, weight_params=1.04e12
    ),
}


@dataclass(frozen=True)
class FootprintReport:
    """Per-device HBM bytes by region, plus the expanded-prefix overhead ratio
    (expanded bytes over everything else)."""

    batch: int
    max_seq: int
    shared_len: int
    weights_bytes: float
    compressed_bytes: float
    expanded_bytes: float
    overhead_ratio: float
    assumptions: dict

    @property
    def total_bytes(self) -> float:
        return self.weights_bytes + self.compressed_bytes + self.expanded_bytes

    def to_dict(self) -> dict:
        d = {
            "batch": self.batch,
            "max_seq": self.max_seq,
            "shared_len": self.shared_len,
            "weights_bytes": self.weights_bytes,
            "compressed_bytes": self.compressed_bytes,
            "expanded_bytes": self.expanded_bytes,
            "total_bytes": self.total_bytes,
            "overhead_ratio": self.overhead_ratio,
        }
        d["assumptions"] = dict(self.assumptions)
        return d


def hbm_footprint(
    config: MlaConfig,
    par: ParallelismConfig,
    batch: int,
    max_seq: int,
    shared_len: int,
    expanded_prefix: bool = True,
) -> FootprintReport:
    """Per-device HBM budget for serving.

    weights    = weight_params * weight_dtype_bytes / devices
    compressed = layers * (batch // dp) * max_seq * (D_l + D_r)
                 * cache_dtype_bytes / sp
    expanded   = layers * shared_len * H * (D_qk + D_v) * cache_dtype_bytes
                 / (tp * sp)                       (0 when expanded_prefix off)

    overhead_ratio = expanded / (weights + compressed): the relative price of
    keeping the shared prefix in expanded form. Capacity figures assume every
    sequence may reach max_seq.
    """
    if batch < 1 or max_seq < 1 or shared_len < 0:
        raise ValueError("batch, max_seq must be >= 1 and shared_len >= 0")
    if shared_len > max_seq:
        raise ValueError("shared_len cannot exceed max_seq")
    c = config
    per_replica_batch = batch // par.dp
    weights_bytes = par.weight_params * par.weight_dtype_bytes / par.devices
    compressed_bytes = (
        par.layers
        * per_replica_batch
        * max_seq
        * c.latent_token_elems
        * par.cache_dtype_bytes
        / par.sp
    )
    if expanded_prefix and shared_len > 0:
        expanded_bytes = (
            par.layers
            * shared_len
            * c.expanded_token_elems
            * par.cache_dtype_bytes
            / (par.tp * par.sp)
        )
    else:
        expanded_bytes = 0.0
    overhead = expanded_bytes / (weights_bytes + compressed_bytes)
    return FootprintReport(
        batch=batch,
        max_seq=max_seq,
        shared_len=shared_len,
        weights_bytes=weights_bytes,
        compressed_bytes=compressed_bytes,
        expanded_bytes=expanded_bytes,
        overhead_ratio=overhead,
        assumptions={
            "weight_params": par.weight_params,
            "weight_dtype_bytes": par.weight_dtype_bytes,
            "cache_dtype_bytes": par.cache_dtype_bytes,
            "layers": par.layers,
            "devices": par.devices,
            "dp": par.dp,
            "tp": par.tp,
            "sp": par.sp,
            "weights_spread": "even across all devices",
            "latent_tp_sharding": "replicated across tp, split across sp",
            "per_replica_batch": per_replica_batch,
        },
    )


def sweep_rows(
    methods: list[str],
    batches: list[int],
    query_len: int,
    shared_len: int,
    nonshared_len: int,
    config: MlaConfig,
    hw: HardwareProfile,
) -> list[dict]:
    """Roofline sweep rows for the report CSV.

    One row per (method, batch) with the pinned column set: method, B, S_q,
    L_s, L_n, macs, hbm_bytes, time_s, tokens_per_s.
    """
    rows = []
    for method in methods:
        method = normalize_method(method)
        for b in batches:
            shape = WorkloadShape(
                batch=b, query_len=query_len, shared_len=shared_len, nonshared_len=nonshared_len
            )
            cb = cost_breakdown(method, shape, config)
            t = step_time(method, shape, config, hw)
            rows.append(
                {
                    "method": method,
                    "B": b,
                    "S_q": query_len,
                    "L_s": shared_len,
                    "L_n": nonshared_len,
                    "macs": cb.macs_total,
                    "hbm_bytes": cb.hbm_bytes(hw.dtype_bytes),
                    "time_s": t,
                    "tokens_per_s": shape.query_tokens / t,
                }
            )
    return rows
