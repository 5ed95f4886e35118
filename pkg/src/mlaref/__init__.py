"""Hybrid latent-attention decode engine with a roofline cost model.

Exact attention over a compressed KV cache in two interchangeable
formulations (decompress-then-attend, and attend-in-latent-space with the
key projection absorbed into the query), a split decode step that runs the
expanded form over a shared prefix and the latent form over per-sequence
tails, and the cost/capacity models that decide when the split pays off.
"""

from .costmodel import (
    CostBreakdown,
    CrossoverResult,
    FootprintReport,
    HARDWARE_PRESETS,
    HardwareProfile,
    PARALLELISM_PRESETS,
    ParallelismConfig,
    WorkloadShape,
    cost_breakdown,
    crossover_batch,
    get_hardware_preset,
    hbm_footprint,
    normalize_method,
    roofline_throughput,
    step_time,
    sweep_rows,
)
from .hybrid import (
    FallbackPolicy,
    StepCost,
    batched_decode,
    combine_lse,
    hybrid_decode_step,
    prefill,
    step_cost,
)
from .kvcache import (
    CapacityError,
    EngineStore,
    PagedLatentCache,
    SequenceHandle,
    SharedPrefixCache,
    seal_shared_prefix,
)
from .mla import (
    AttentionPartial,
    LatentKv,
    LatentSeq,
    MODEL_PRESETS,
    MlaConfig,
    MlaWeights,
    QueryState,
    attend_absorb,
    attend_naive,
    expand_kv,
    expand_latents,
    get_model_preset,
    output_projection,
    project_kv,
    project_query,
)
from .numerics import SoftmaxRow, matmul, rmsnorm, rope, softmax_lse, softmax_lse_rows
from .simbench import (
    LengthDist,
    SimReport,
    WorkloadSpec,
    generate_workload,
    run_simulation,
    speedup_report,
)
from .verify import run_exactness_suite, run_exactness_trial

__version__ = "0.1.0"

__all__ = [
    "AttentionPartial",
    "CapacityError",
    "CostBreakdown",
    "CrossoverResult",
    "EngineStore",
    "FallbackPolicy",
    "FootprintReport",
    "HARDWARE_PRESETS",
    "HardwareProfile",
    "LatentKv",
    "LatentSeq",
    "LengthDist",
    "MODEL_PRESETS",
    "MlaConfig",
    "MlaWeights",
    "PARALLELISM_PRESETS",
    "PagedLatentCache",
    "ParallelismConfig",
    "QueryState",
    "SequenceHandle",
    "SharedPrefixCache",
    "SimReport",
    "SoftmaxRow",
    "StepCost",
    "WorkloadShape",
    "WorkloadSpec",
    "attend_absorb",
    "attend_naive",
    "batched_decode",
    "combine_lse",
    "cost_breakdown",
    "crossover_batch",
    "expand_kv",
    "expand_latents",
    "generate_workload",
    "get_hardware_preset",
    "get_model_preset",
    "hbm_footprint",
    "hybrid_decode_step",
    "matmul",
    "normalize_method",
    "output_projection",
    "prefill",
    "project_kv",
    "project_query",
    "rmsnorm",
    "roofline_throughput",
    "rope",
    "run_exactness_suite",
    "run_exactness_trial",
    "run_simulation",
    "seal_shared_prefix",
    "softmax_lse",
    "softmax_lse_rows",
    "speedup_report",
    "step_cost",
    "step_time",
    "sweep_rows",
    "__version__",
]
