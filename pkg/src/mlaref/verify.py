"""Randomized cross-checks that the three attention paths agree.

Each trial builds a full random instance (weights, prefix, tail, query) at a
small shape, runs the same query through expanded attention, latent
attention, and the two-stage hybrid, and records the worst relative
disagreement on per-head outputs, log-sum-exp values, and the projected
model-dim output. Used by the test suite and by the CLI's equivalence
subcommand (including its fault-injection self-check).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hybrid import hybrid_decode_step
from .kvcache import seal_shared_prefix
from .mla import (
    LatentSeq,
    MlaConfig,
    MlaWeights,
    attend_absorb,
    attend_naive,
    expand_latents,
    output_projection,
    project_kv,
    project_query,
)

TOLERANCES = {"float64": 1e-10, "float32": 1e-5}


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference over the max magnitude of either operand."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / denom


def random_small_config(rng: np.random.Generator) -> MlaConfig:
    return MlaConfig(
        model_dim=int(rng.integers(8, 33)),
        num_heads=int(rng.choice([1, 2, 4, 8])),
        nope_head_dim=int(rng.choice([4, 8, 16])),
        rope_dim=int(rng.choice([2, 4, 8])),
        v_head_dim=int(rng.choice([4, 8, 16])),
        kv_lora_rank=int(rng.choice([8, 16, 32])),
        q_lora_rank=int(rng.integers(4, 17)),
    )


@dataclass(frozen=True)
class TrialResult:
    config: MlaConfig
    shared_len: int
    tail_len: int
    err_heads_naive_absorb: float
    err_heads_naive_hybrid: float
    err_lse_naive_absorb: float
    err_lse_naive_hybrid: float
    err_out_naive_absorb: float
    err_out_naive_hybrid: float

    @property
    def max_err(self) -> float:
        return max(
            self.err_heads_naive_absorb,
            self.err_heads_naive_hybrid,
            self.err_lse_naive_absorb,
            self.err_lse_naive_hybrid,
            self.err_out_naive_absorb,
            self.err_out_naive_hybrid,
        )

    def to_row(self, index: int) -> dict:
        return {
            "trial": index,
            "H": self.config.num_heads,
            "D_l": self.config.kv_lora_rank,
            "L_s": self.shared_len,
            "L_n": self.tail_len,
            "err_heads_naive_absorb": self.err_heads_naive_absorb,
            "err_heads_naive_hybrid": self.err_heads_naive_hybrid,
            "err_lse_naive_absorb": self.err_lse_naive_absorb,
            "err_lse_naive_hybrid": self.err_lse_naive_hybrid,
            "err_out_naive_absorb": self.err_out_naive_absorb,
            "err_out_naive_hybrid": self.err_out_naive_hybrid,
            "max_err": self.max_err,
        }


def run_exactness_trial(
    rng: np.random.Generator,
    dtype=np.float64,
    fault_injection: bool = False,
    config: MlaConfig | None = None,
    shared_len: int | None = None,
    tail_len: int | None = None,
) -> TrialResult:
    """One random instance through all three paths.

    fault_injection perturbs the latent key up-projection used only by the
    absorb-side paths, which must make the comparison fail; it proves the
    detector can actually detect.
    """
    cfg = config or random_small_config(rng)
    if shared_len is None:
        shared_len = int(rng.integers(0, 33))
    if tail_len is None:
        tail_len = int(rng.integers(0, 33))
    if shared_len + tail_len == 0:
        tail_len = 1
    weights = MlaWeights.random(cfg, seed=int(rng.integers(0, 2**31)), dtype=dtype)
    scale = cfg.softmax_scale

    total = shared_len + tail_len
    hiddens = rng.standard_normal((total, cfg.model_dim)).astype(dtype)
    latents = LatentSeq.stack([project_kv(hiddens[t], weights, t) for t in range(total)])
    # Decode pattern: the query token is the last cached token.
    query = project_query(hiddens[total - 1], weights, total - 1)

    keys, values = expand_latents(latents, weights)
    ref = attend_naive(query, keys, values, scale)

    absorb_weights = weights
    if fault_injection:
        w_kb = weights.w_kb.copy()
        w_kb[0] += 0.25
        absorb_weights = replace_weights(weights, w_kb=w_kb)
    part_absorb = attend_absorb(query, latents, absorb_weights, scale)

    shared = None
    if shared_len > 0:
        shared = seal_shared_prefix("trial-prefix", latents[:shared_len], weights)
    part_hybrid = hybrid_decode_step(query, shared, latents[shared_len:], absorb_weights, scale)

    out_ref = output_projection(ref.output, weights)
    out_absorb = output_projection(part_absorb.output, weights)
    out_hybrid = output_projection(part_hybrid.output, weights)

    return TrialResult(
        config=cfg,
        shared_len=shared_len,
        tail_len=tail_len,
        err_heads_naive_absorb=max_rel_err(ref.output, part_absorb.output),
        err_heads_naive_hybrid=max_rel_err(ref.output, part_hybrid.output),
        err_lse_naive_absorb=max_rel_err(ref.lse, part_absorb.lse),
        err_lse_naive_hybrid=max_rel_err(ref.lse, part_hybrid.lse),
        err_out_naive_absorb=max_rel_err(out_ref, out_absorb),
        err_out_naive_hybrid=max_rel_err(out_ref, out_hybrid),
    )


def replace_weights(weights: MlaWeights, **arrays) -> MlaWeights:
    """Copy of the weights with named arrays swapped (for fault injection)."""
    kw = {
        name: arrays.get(name, getattr(weights, name))
        for name in ("w_qa", "w_qb", "w_kva", "w_kb", "w_vb", "w_o", "q_gain", "kv_gain")
    }
    kw = {k: np.array(v) for k, v in kw.items()}
    return MlaWeights(config=weights.config, **kw)


@dataclass
class SuiteReport:
    trials: int
    dtype: str
    tolerance: float
    max_err: float
    failures: int
    results: list[TrialResult]

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "dtype": self.dtype,
            "tolerance": self.tolerance,
            "max_err": self.max_err,
            "failures": self.failures,
            "passed": self.passed,
        }


def run_exactness_suite(
    trials: int, seed: int, dtype=np.float64, fault_injection: bool = False
) -> SuiteReport:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    tol = TOLERANCES[dtype.name]
    results = []
    worst = 0.0
    failures = 0
    for _ in range(trials):
        r = run_exactness_trial(rng, dtype=dtype.type, fault_injection=fault_injection)
        results.append(r)
        worst = max(worst, r.max_err)
        if r.max_err > tol:
            failures += 1
    return SuiteReport(
        trials=trials,
        dtype=dtype.name,
        tolerance=tol,
        max_err=worst,
        failures=failures,
        results=results,
    )
