"""Two-stage decode: expanded attention over the shared prefix, latent
attention over per-sequence tails, merged exactly via log-sum-exp.

Stage 1 runs ``attend_naive`` over a sealed prefix, so the expanded keys are
read once per step and reused by every query in the batch. Stage 2 runs
``attend_absorb`` over each sequence's compressed tail, which is the
bandwidth-friendly formulation when nothing is shared. ``combine_lse`` merges
the per-head partials so the result equals one softmax over the full context.
Small batches cannot amortise stage 1, so a batch-size policy can fall back
to a single absorb pass over the whole context (possible because sealed
prefixes retain their compressed form).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kvcache import EngineStore, SequenceHandle
from .mla import (
    AttentionPartial,
    LatentSeq,
    MlaConfig,
    MlaWeights,
    QueryState,
    attend_absorb,
    attend_naive,
    output_projection,
    project_kv,
    project_query,
)

DEFAULT_BATCH_THRESHOLD = 64

MODE_AUTO = "auto"
MODE_FORCE_HYBRID = "force-hybrid"
MODE_FORCE_ABSORB = "force-absorb"
_POLICY_MODES = (MODE_AUTO, MODE_FORCE_HYBRID, MODE_FORCE_ABSORB)

# Branch tags carried in step cost reports. "naive" appears only in
# simulator baselines, never as a policy outcome.
BRANCH_HYBRID = "hybrid"
BRANCH_ABSORB = "absorb"
BRANCH_NAIVE = "naive"


@dataclass(frozen=True)
class FallbackPolicy:
    """Chooses the decode branch from the step's batch size.

    mode:
        auto          hybrid when batch >= threshold_batch, else absorb
        force-hybrid  always two-stage
        force-absorb  always single absorb pass
    """

    mode: str = MODE_AUTO
    threshold_batch: int = DEFAULT_BATCH_THRESHOLD

    def __post_init__(self) -> None:
        if self.mode not in _POLICY_MODES:
            raise ValueError(f"policy mode must be one of {_POLICY_MODES}, got {self.mode!r}")
        if self.threshold_batch < 1:
            raise ValueError("threshold_batch must be >= 1")

    def resolve(self, batch: int) -> str:
        if self.mode == MODE_FORCE_HYBRID:
            return BRANCH_HYBRID
        if self.mode == MODE_FORCE_ABSORB:
            return BRANCH_ABSORB
        return BRANCH_HYBRID if batch >= self.threshold_batch else BRANCH_ABSORB


def combine_lse(a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """Merge two attention partials over disjoint key ranges, per head.

    With m = max(lse_a, lse_b) and w_x = exp(lse_x - m):

        output = (w_a * out_a + w_b * out_b) / (w_a + w_b)
        lse    = m + log(w_a + w_b)

    This equals softmax attention over the union of the two key ranges.
    Empty partials (lse == -inf) are the identity element; merging two empty
    heads yields an empty head.
    """
    if a.output.shape != b.output.shape:
        raise ValueError(f"combine_lse head shapes disagree: {a.output.shape} vs {b.output.shape}")
    m = np.maximum(a.lse, b.lse)
    both_empty = np.isneginf(m)
    safe_m = np.where(both_empty, 0.0, m)
    w_a = np.exp(a.lse - safe_m)
    w_b = np.exp(b.lse - safe_m)
    denom = w_a + w_b
    safe_denom = np.where(both_empty, 1.0, denom)
    out = (w_a[:, None] * a.output + w_b[:, None] * b.output) / safe_denom[:, None].astype(
        a.output.dtype
    )
    out = np.where(both_empty[:, None], np.zeros_like(out), out)
    lse = np.where(both_empty, -np.inf, safe_m + np.log(safe_denom))
    return AttentionPartial(output=out.astype(a.output.dtype), lse=lse)


def hybrid_decode_step(
    query: QueryState,
    shared,  # SharedPrefixCache | None
    tail: LatentSeq,
    weights: MlaWeights,
    scale: float,
    visible_shared: int | None = None,
    visible_tail: int | None = None,
) -> AttentionPartial:
    """One query's two-stage attention over shared prefix + compressed tail.

    Either side may be empty or fully masked (stage skipped, identity partial
    merged in), but not both. ``visible_*`` are causal boundaries applied as
    -inf scores inside each stage.
    """
    c = weights.config
    shared_len = 0 if shared is None else len(shared)
    vis_shared = shared_len if visible_shared is None else min(int(visible_shared), shared_len)
    vis_tail = len(tail) if visible_tail is None else min(int(visible_tail), len(tail))
    if vis_shared <= 0 and vis_tail <= 0:
        raise ValueError("hybrid_decode_step needs a non-empty prefix or tail")
    dtype = query.q_nope.dtype
    if vis_shared > 0:
        part1 = attend_naive(query, shared.keys, shared.values, scale, visible=vis_shared)
    else:
        part1 = AttentionPartial.empty(c.num_heads, c.v_head_dim, dtype)
    if vis_tail > 0:
        part2 = attend_absorb(query, tail, weights, scale, visible=vis_tail)
    else:
        part2 = AttentionPartial.empty(c.num_heads, c.v_head_dim, dtype)
    return combine_lse(part1, part2)


@dataclass(frozen=True)
class StepCost:
    """Exact integer cost accounting for one decode step.

    Attention work is split into the shared-prefix part and the non-shared
    part. Element counts are cache reads in elements (multiply by dtype bytes
    for traffic); distinct prefixes are counted once per step because every
    query in the batch reuses the same buffer. ``wkvb(1|2)_macs`` charge the
    latent up/down projections (query absorption and value up-projection on
    the absorb side, new-token key/value expansion on the naive side);
    ``wkvb_weight_elems`` is the one-per-step read of those weights.
    ``combine_elems`` is the partial-merge traffic, nonzero only on the
    hybrid branch.
    """

    mode: str
    batch: int
    shared_attn_macs: int
    shared_attn_elems: int
    nonshared_attn_macs: int
    nonshared_attn_elems: int
    wkvb1_macs: int
    wkvb2_macs: int
    wkvb_weight_elems: int
    combine_elems: int

    @property
    def stage1_macs(self) -> int:
        return self.shared_attn_macs if self.mode in (BRANCH_HYBRID, BRANCH_NAIVE) else 0

    @property
    def stage1_elems(self) -> int:
        return self.shared_attn_elems if self.mode in (BRANCH_HYBRID, BRANCH_NAIVE) else 0

    @property
    def stage2_macs(self) -> int:
        if self.mode == BRANCH_HYBRID:
            return self.nonshared_attn_macs
        if self.mode == BRANCH_ABSORB:
            return self.shared_attn_macs + self.nonshared_attn_macs
        return 0

    @property
    def stage2_elems(self) -> int:
        if self.mode == BRANCH_HYBRID:
            return self.nonshared_attn_elems
        if self.mode == BRANCH_ABSORB:
            return self.shared_attn_elems + self.nonshared_attn_elems
        return 0

    @property
    def attn_macs_total(self) -> int:
        return self.shared_attn_macs + self.nonshared_attn_macs

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(
            stage1_macs=self.stage1_macs,
            stage1_elems=self.stage1_elems,
            stage2_macs=self.stage2_macs,
            stage2_elems=self.stage2_elems,
        )
        return d


def step_cost(
    mode: str,
    config: MlaConfig,
    shared_lens: Sequence[int],
    distinct_shared_lens: Sequence[int],
    tail_lens: Sequence[int],
    query_count: int | None = None,
) -> StepCost:
    """Cost of one decode step from its logical shape.

    Args:
        mode: hybrid | absorb | naive branch actually executed.
        shared_lens: per-query visible shared-prefix length.
        distinct_shared_lens: length of each distinct prefix buffer touched
            this step (counted once for reads).
        tail_lens: per-query visible tail length.
        query_count: defaults to len(shared_lens).
    """
    if mode not in (BRANCH_HYBRID, BRANCH_ABSORB, BRANCH_NAIVE):
        raise ValueError(f"unknown step mode {mode!r}")
    if len(shared_lens) != len(tail_lens):
        raise ValueError("shared_lens and tail_lens must align per query")
    c = config
    batch = query_count if query_count is not None else len(shared_lens)
    shared_q_tokens = int(sum(shared_lens))
    tail_q_tokens = int(sum(tail_lens))
    distinct_shared = int(sum(distinct_shared_lens))
    total_tail = tail_q_tokens

    if mode == BRANCH_NAIVE:
        shared_macs = shared_q_tokens * c.naive_token_macs
        shared_elems = distinct_shared * c.expanded_token_elems
        nonshared_macs = tail_q_tokens * c.naive_token_macs
        nonshared_elems = total_tail * c.expanded_token_elems
    elif mode == BRANCH_ABSORB:
        shared_macs = shared_q_tokens * c.absorb_token_macs
        shared_elems = distinct_shared * c.latent_token_elems
        nonshared_macs = tail_q_tokens * c.absorb_token_macs
        nonshared_elems = total_tail * c.latent_token_elems
    else:
        shared_macs = shared_q_tokens * c.naive_token_macs
        shared_elems = distinct_shared * c.expanded_token_elems
        nonshared_macs = tail_q_tokens * c.absorb_token_macs
        nonshared_elems = total_tail * c.latent_token_elems

    wkvb1 = batch * c.num_heads * c.kv_lora_rank * c.nope_head_dim
    wkvb2 = batch * c.num_heads * c.kv_lora_rank * c.v_head_dim
    weight_elems = c.num_heads * c.kv_lora_rank * (c.nope_head_dim + c.v_head_dim)
    combine = 2 * batch * c.num_heads * (c.v_head_dim + 1) if mode == BRANCH_HYBRID else 0
    return StepCost(
        mode=mode,
        batch=batch,
        shared_attn_macs=shared_macs,
        shared_attn_elems=shared_elems,
        nonshared_attn_macs=nonshared_macs,
        nonshared_attn_elems=nonshared_elems,
        wkvb1_macs=wkvb1,
        wkvb2_macs=wkvb2,
        wkvb_weight_elems=weight_elems,
        combine_elems=combine,
    )


def _visible_lengths(
    query: QueryState, shared_len: int, tail_len: int
) -> tuple[int, int]:
    """Causal visibility: cache positions <= query.position are attendable."""
    budget = query.position + 1
    vis_shared = min(shared_len, budget)
    vis_tail = min(tail_len, max(0, budget - shared_len))
    return vis_shared, vis_tail


def batched_decode(
    queries: Sequence[QueryState],
    handles: Sequence[SequenceHandle],
    store: EngineStore,
    weights: MlaWeights,
    policy: FallbackPolicy,
    scale: float | None = None,
) -> tuple[list[np.ndarray], StepCost]:
    """One decode step for a batch of sequences.

    Queries are grouped by prefix id so each sealed prefix buffer is read
    once per step. The policy picks hybrid or absorb for the whole step.
    Per-query causal boundaries derive from each query's position, so several
    query entries for one sequence (multi-token decode) stay causal.

    Returns:
        (model_dim output vectors in input order, StepCost for the step).
    """
    if len(queries) != len(handles):
        raise ValueError("queries and handles must align")
    if not queries:
        raise ValueError("batched_decode needs at least one query")
    c = weights.config
    scale = c.softmax_scale if scale is None else scale
    branch = policy.resolve(len(queries))

    shared_lens: list[int] = []
    tail_lens: list[int] = []
    touched_prefixes: dict[str, int] = {}
    tails: dict[int, LatentSeq] = {}
    outputs: list[np.ndarray] = []

    for query, handle in zip(queries, handles):
        shared = store.get_prefix(handle.prefix_id)
        shared_len = 0 if shared is None else len(shared)
        if handle.seq_id not in tails:
            tails[handle.seq_id] = store.paged.gather_sequence(handle)
        tail = tails[handle.seq_id]
        vis_shared, vis_tail = _visible_lengths(query, shared_len, len(tail))
        if vis_shared + vis_tail == 0:
            raise ValueError(f"sequence {handle.seq_id} has no visible context")
        shared_lens.append(vis_shared)
        tail_lens.append(vis_tail)
        if shared is not None and vis_shared > 0:
            touched_prefixes[shared.prefix_id] = vis_shared

        if branch == BRANCH_HYBRID:
            partial = hybrid_decode_step(
                query,
                shared,
                tail,
                weights,
                scale,
                visible_shared=vis_shared,
                visible_tail=vis_tail,
            )
        else:
            if shared is not None and vis_shared > 0:
                context = LatentSeq.concat(shared.latents, tail)
            else:
                context = tail
            # vis_tail > 0 implies vis_shared == shared_len, so the visible
            # region is always a prefix of the concatenated context.
            partial = attend_absorb(
                query, context, weights, scale, visible=vis_shared + vis_tail
            )
        outputs.append(output_projection(partial.output, weights))

    cost = step_cost(
        mode=branch,
        config=c,
        shared_lens=shared_lens,
        distinct_shared_lens=list(touched_prefixes.values()),
        tail_lens=tail_lens,
    )
    return outputs, cost


def prefill(
    prefix_hiddens: np.ndarray | None,
    tail_hiddens: Sequence[np.ndarray],
    weights: MlaWeights,
    store: EngineStore,
    prefix_id: str = "prefix-0",
) -> tuple[list[SequenceHandle], list[QueryState]]:
    """Populate caches for a batch of requests sharing one prefix.

    The prefix is projected and sealed once per distinct id (re-declaring the
    same id with identical content is a no-op). Each request's tail tokens
    are projected at their absolute positions and appended to the paged
    cache. Nothing a tail token produces depends on any later token.

    Args:
        prefix_hiddens: [L_s, model_dim] shared prompt activations, or None.
        tail_hiddens: per request, [T_i, model_dim] non-shared activations
            (T_i may be 0).

    Returns:
        Per-request sequence handles and last-position query states, ready
        for the first decode step.

    Raises:
        ValueError: a request with no prefix and an empty tail, or a prefix
            id redeclared with different content.
    """
    c = weights.config
    shared_len = 0
    shared = None
    if prefix_hiddens is not None and len(prefix_hiddens) > 0:
        prefix_hiddens = np.asarray(prefix_hiddens)
        if prefix_hiddens.ndim != 2 or prefix_hiddens.shape[1] != c.model_dim:
            raise ValueError(f"prefix hiddens must be [L_s, {c.model_dim}]")
        shared_len = prefix_hiddens.shape[0]
        latents = LatentSeq.stack(
            [project_kv(prefix_hiddens[t], weights, t) for t in range(shared_len)]
        )
        shared = store.ensure_prefix(prefix_id, latents, weights)

    handles: list[SequenceHandle] = []
    states: list[QueryState] = []
    for i, hiddens in enumerate(tail_hiddens):
        hiddens = np.asarray(hiddens)
        tail_len = 0 if hiddens.size == 0 else hiddens.shape[0]
        if tail_len == 0 and shared_len == 0:
            raise ValueError(f"request {i} has no prefix and an empty tail")
        if tail_len > 0 and (hiddens.ndim != 2 or hiddens.shape[1] != c.model_dim):
            raise ValueError(f"request {i} tail hiddens must be [T, {c.model_dim}]")
        handle = store.paged.register_sequence(prefix_id if shared is not None else None)
        for t in range(tail_len):
            latent = project_kv(hiddens[t], weights, shared_len + t)
            store.paged.append_token(handle, latent)
        if tail_len > 0:
            last_hidden = hiddens[tail_len - 1]
            last_pos = shared_len + tail_len - 1
        else:
            last_hidden = prefix_hiddens[shared_len - 1]
            last_pos = shared_len - 1
        handles.append(handle)
        states.append(project_query(last_hidden, weights, last_pos))
    return handles, states
