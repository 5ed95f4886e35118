"""Multi-head latent attention: shapes, weights, and the two base formulations.

The cache stores each context token as a compressed latent (rank
``kv_lora_rank``) plus a small rotary key shared by every head. From that
single representation attention can be computed two mathematically equivalent
ways:

* ``attend_naive``: up-project every cached token to per-head keys/values and
  run standard multi-head attention. Cheap in multiply-accumulates because
  score and value work run at head dimension, but the expanded cache is large,
  so it only pays off when many queries reuse the same keys.
* ``attend_absorb``: fold the key up-projection into the query and the value
  up-projection into the output, so scores and the weighted sum run directly
  over the compressed latents. Reads stay small (one latent per token) at the
  price of more multiply-accumulates per scored token.

Both return per-head outputs together with per-head log-sum-exp values so
that partial results over disjoint key ranges can be merged exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import DEFAULT_ROPE_BASE, rmsnorm, rope, softmax_lse_rows

RMSNORM_EPS = 1e-6


@dataclass(frozen=True)
class MlaConfig:
    """Dimension bundle for one attention layer.

    Attributes:
        model_dim: hidden size entering/leaving the layer.
        num_heads: number of attention heads.
        nope_head_dim: per-head key/query dim without rotary embedding.
        rope_dim: rotary key/query dim, shared across heads on the key side.
        v_head_dim: per-head value dim.
        kv_lora_rank: rank of the compressed key/value latent.
        q_lora_rank: rank of the query down-projection.
        rope_base: rotary frequency base.
    """

    model_dim: int
    num_heads: int
    nope_head_dim: int
    rope_dim: int
    v_head_dim: int
    kv_lora_rank: int
    q_lora_rank: int
    rope_base: float = DEFAULT_ROPE_BASE

    def __post_init__(self) -> None:
        for name in (
            "model_dim",
            "num_heads",
            "nope_head_dim",
            "rope_dim",
            "v_head_dim",
            "kv_lora_rank",
            "q_lora_rank",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"MlaConfig.{name} must be a positive int, got {value!r}")
        if self.rope_dim % 2 != 0:
            raise ValueError("rope_dim must be even")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")

    @property
    def qk_head_dim(self) -> int:
        return self.nope_head_dim + self.rope_dim

    @property
    def softmax_scale(self) -> float:
        return 1.0 / float(np.sqrt(self.qk_head_dim))

    @property
    def expanded_token_elems(self) -> int:
        """Elements one cached token occupies in expanded per-head form."""
        return self.num_heads * (self.qk_head_dim + self.v_head_dim)

    @property
    def latent_token_elems(self) -> int:
        """Elements one cached token occupies in compressed form."""
        return self.kv_lora_rank + self.rope_dim

    @property
    def absorb_token_macs(self) -> int:
        """MACs per query-token pair when attending over compressed latents."""
        return self.num_heads * (2 * self.kv_lora_rank + self.rope_dim)

    @property
    def naive_token_macs(self) -> int:
        """MACs per query-token pair when attending over expanded keys/values."""
        return self.expanded_token_elems


MODEL_PRESETS: dict[str, MlaConfig] = {
    "deepseek-v3": MlaConfig(
        model_dim=7168,
        num_heads=128,
        nope_head_dim=128,
        rope_dim=64,
        v_head_dim=128,
        kv_lora_rank=512,
        q_lora_rank=1536,
    ),
    "kimi-k2": MlaConfig(
        model_dim=7168,
        num_heads=64,
        nope_head_dim=128,
        rope_dim=64,
        v_head_dim=128,
        kv_lora_rank=512,
        q_lora_rank=1536,
    ),
    # Desk-scale shape for demos, simulator smoke runs, and docs.
    "tiny": MlaConfig(
        model_dim=32,
        num_heads=4,
        nope_head_dim=8,
        rope_dim=4,
        v_head_dim=8,
        kv_lora_rank=16,
        q_lora_rank=16,
    ),
}


def get_model_preset(name: str) -> MlaConfig:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_PRESETS))
        raise KeyError(f"unknown model preset {name!r} (known: {known})") from None


def _lock(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass
class MlaWeights:
    """Projection weights for one layer. Arrays are frozen after construction.

    Shapes (H = num_heads):
        w_qa   [model_dim, q_lora_rank]        query down-projection
        w_qb   [q_lora_rank, H * qk_head_dim]  query up-projection
        w_kva  [model_dim, kv_lora_rank + rope_dim]  joint latent projection
        w_kb   [H, kv_lora_rank, nope_head_dim]      per-head key up-projection
        w_vb   [H, kv_lora_rank, v_head_dim]         per-head value up-projection
        w_o    [H * v_head_dim, model_dim]     output projection
        q_gain [q_lora_rank], kv_gain [kv_lora_rank]  rmsnorm gains
    """

    config: MlaConfig
    w_qa: np.ndarray
    w_qb: np.ndarray
    w_kva: np.ndarray
    w_kb: np.ndarray
    w_vb: np.ndarray
    w_o: np.ndarray
    q_gain: np.ndarray
    kv_gain: np.ndarray

    def __post_init__(self) -> None:
        c = self.config
        expect = {
            "w_qa": (c.model_dim, c.q_lora_rank),
            "w_qb": (c.q_lora_rank, c.num_heads * c.qk_head_dim),
            "w_kva": (c.model_dim, c.kv_lora_rank + c.rope_dim),
            "w_kb": (c.num_heads, c.kv_lora_rank, c.nope_head_dim),
            "w_vb": (c.num_heads, c.kv_lora_rank, c.v_head_dim),
            "w_o": (c.num_heads * c.v_head_dim, c.model_dim),
            "q_gain": (c.q_lora_rank,),
            "kv_gain": (c.kv_lora_rank,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"MlaWeights.{name} shape {arr.shape} != expected {shape}")
            _lock(arr)
        dtypes = {getattr(self, name).dtype for name in expect}
        if len(dtypes) != 1:
            raise ValueError(f"MlaWeights arrays must share one dtype, got {dtypes}")

    @property
    def dtype(self) -> np.dtype:
        return self.w_qa.dtype

    @classmethod
    def random(cls, config: MlaConfig, seed: int, dtype=np.float32) -> "MlaWeights":
        """Seeded uniform [-0.05, 0.05] init; gains start at 1."""
        rng = np.random.default_rng(seed)
        c = config

        def u(*shape):
            return rng.uniform(-0.05, 0.05, size=shape).astype(dtype)

        return cls(
            config=c,
            w_qa=u(c.model_dim, c.q_lora_rank),
            w_qb=u(c.q_lora_rank, c.num_heads * c.qk_head_dim),
            w_kva=u(c.model_dim, c.kv_lora_rank + c.rope_dim),
            w_kb=u(c.num_heads, c.kv_lora_rank, c.nope_head_dim),
            w_vb=u(c.num_heads, c.kv_lora_rank, c.v_head_dim),
            w_o=u(c.num_heads * c.v_head_dim, c.model_dim),
            q_gain=np.ones(c.q_lora_rank, dtype=dtype),
            kv_gain=np.ones(c.kv_lora_rank, dtype=dtype),
        )

    def astype(self, dtype) -> "MlaWeights":
        if np.dtype(dtype) == self.dtype:
            return self
        kw = {
            name: getattr(self, name).astype(dtype)
            for name in ("w_qa", "w_qb", "w_kva", "w_kb", "w_vb", "w_o", "q_gain", "kv_gain")
        }
        return MlaWeights(config=self.config, **kw)


@dataclass(frozen=True)
class QueryState:
    """Per-head query halves for one token position.

    q_nope [H, nope_head_dim] carries the content part, q_pe [H, rope_dim]
    the rotary part (already rotated for ``position``).
    """

    q_nope: np.ndarray
    q_pe: np.ndarray
    position: int


@dataclass(frozen=True)
class LatentKv:
    """Compressed cache entry for one token: latent [kv_lora_rank] + rotary
    key [rope_dim] (already rotated, shared by all heads)."""

    nope: np.ndarray
    pe: np.ndarray


@dataclass(frozen=True)
class LatentSeq:
    """A run of compressed cache entries as stacked arrays.

    nope has shape [L, kv_lora_rank], pe has shape [L, rope_dim]. Behaves as
    a sequence of LatentKv for indexing; slicing returns a LatentSeq view.
    """

    nope: np.ndarray
    pe: np.ndarray

    def __post_init__(self) -> None:
        if self.nope.ndim != 2 or self.pe.ndim != 2 or self.nope.shape[0] != self.pe.shape[0]:
            raise ValueError(f"LatentSeq shapes disagree: {self.nope.shape} vs {self.pe.shape}")

    def __len__(self) -> int:
        return self.nope.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return LatentSeq(nope=self.nope[idx], pe=self.pe[idx])
        return LatentKv(nope=self.nope[idx], pe=self.pe[idx])

    @classmethod
    def empty(cls, config: MlaConfig, dtype=np.float32) -> "LatentSeq":
        return cls(
            nope=np.zeros((0, config.kv_lora_rank), dtype=dtype),
            pe=np.zeros((0, config.rope_dim), dtype=dtype),
        )

    @classmethod
    def stack(cls, tokens: list[LatentKv]) -> "LatentSeq":
        if not tokens:
            raise ValueError("LatentSeq.stack needs at least one token; use empty()")
        return cls(
            nope=np.stack([t.nope for t in tokens]),
            pe=np.stack([t.pe for t in tokens]),
        )

    @classmethod
    def concat(cls, a: "LatentSeq", b: "LatentSeq") -> "LatentSeq":
        return cls(
            nope=np.concatenate([a.nope, b.nope], axis=0),
            pe=np.concatenate([a.pe, b.pe], axis=0),
        )


@dataclass(frozen=True)
class AttentionPartial:
    """Per-head attention output over some key range plus per-head lse.

    output [H, v_head_dim], lse [H]. An all--inf lse with zero output is the
    identity element for merging: it denotes attention over an empty range.
    """

    output: np.ndarray
    lse: np.ndarray

    def __post_init__(self) -> None:
        if self.output.ndim != 2 or self.lse.shape != (self.output.shape[0],):
            raise ValueError(
                f"AttentionPartial shapes disagree: output {self.output.shape}, lse {self.lse.shape}"
            )

    @property
    def is_empty(self) -> bool:
        return bool(np.all(np.isneginf(self.lse)))

    @classmethod
    def empty(cls, num_heads: int, v_head_dim: int, dtype=np.float32) -> "AttentionPartial":
        return cls(
            output=np.zeros((num_heads, v_head_dim), dtype=dtype),
            lse=np.full(num_heads, -np.inf, dtype=np.float64),
        )


def project_query(hidden: np.ndarray, weights: MlaWeights, position: int) -> QueryState:
    """Down-project, normalise, up-project, split per head, rotate.

    Args:
        hidden: [model_dim] input activation for the query token.
        weights: layer weights.
        position: absolute token position used for the rotary embedding.
    """
    c = weights.config
    hidden = np.asarray(hidden)
    if hidden.shape != (c.model_dim,):
        raise ValueError(f"project_query expects [{c.model_dim}] hidden, got {hidden.shape}")
    latent = rmsnorm(hidden @ weights.w_qa, weights.q_gain, RMSNORM_EPS)
    q = (latent @ weights.w_qb).reshape(c.num_heads, c.qk_head_dim)
    q_nope = q[:, : c.nope_head_dim]
    q_pe = rope(q[:, c.nope_head_dim :], position, c.rope_base)
    return QueryState(q_nope=q_nope, q_pe=q_pe, position=position)


def project_kv(hidden: np.ndarray, weights: MlaWeights, position: int) -> LatentKv:
    """Compress one token into its cache entry.

    The latent half is rmsnorm-ed; the rotary half is rotated for
    ``position``. Everything attention needs later derives from this entry.
    """
    c = weights.config
    hidden = np.asarray(hidden)
    if hidden.shape != (c.model_dim,):
        raise ValueError(f"project_kv expects [{c.model_dim}] hidden, got {hidden.shape}")
    joint = hidden @ weights.w_kva
    nope = rmsnorm(joint[: c.kv_lora_rank], weights.kv_gain, RMSNORM_EPS)
    pe = rope(joint[c.kv_lora_rank :], position, c.rope_base)
    return LatentKv(nope=nope, pe=pe)


def expand_kv(latent: LatentKv, weights: MlaWeights) -> tuple[np.ndarray, np.ndarray]:
    """Up-project one cache entry to per-head key/value.

    Returns (k [H, qk_head_dim], v [H, v_head_dim]); k is the head-specific
    content key with the shared rotary key appended.
    """
    c = weights.config
    k_nope = np.einsum("d,hdn->hn", latent.nope, weights.w_kb)
    k = np.concatenate([k_nope, np.broadcast_to(latent.pe, (c.num_heads, c.rope_dim))], axis=1)
    v = np.einsum("d,hdv->hv", latent.nope, weights.w_vb)
    return k, v


def expand_latents(seq: LatentSeq, weights: MlaWeights) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised expand_kv over a LatentSeq.

    Returns (keys [L, H, qk_head_dim], values [L, H, v_head_dim]).
    """
    c = weights.config
    length = len(seq)
    k_nope = np.einsum("ld,hdn->lhn", seq.nope, weights.w_kb)
    pe = np.broadcast_to(seq.pe[:, None, :], (length, c.num_heads, c.rope_dim))
    keys = np.concatenate([k_nope, pe], axis=2)
    values = np.einsum("ld,hdv->lhv", seq.nope, weights.w_vb)
    return keys, values


def _resolve_visible(length: int, visible: int | None) -> int:
    if visible is None:
        return length
    visible = min(int(visible), length)
    if visible < 1:
        raise ValueError(f"attention needs at least one visible key, got visible={visible}")
    return visible


def attend_naive(
    query: QueryState,
    keys: np.ndarray,
    values: np.ndarray,
    scale: float,
    visible: int | None = None,
) -> AttentionPartial:
    """Standard multi-head attention over expanded keys/values.

    Args:
        query: per-head query halves.
        keys: [L, H, qk_head_dim] expanded keys.
        values: [L, H, v_head_dim] expanded values.
        scale: score scale, typically 1/sqrt(qk_head_dim).
        visible: optional causal boundary; keys at index >= visible get -inf
            scores and therefore exactly zero probability.

    Returns:
        AttentionPartial with per-head outputs and per-head lse.
    """
    if keys.ndim != 3 or values.ndim != 3 or keys.shape[0] != values.shape[0]:
        raise ValueError(f"attend_naive key/value shapes disagree: {keys.shape} vs {values.shape}")
    length = keys.shape[0]
    if length == 0:
        raise ValueError("attend_naive needs at least one key")
    vis = _resolve_visible(length, visible)
    q = np.concatenate([query.q_nope, query.q_pe], axis=1)
    scores = np.einsum("hd,lhd->hl", q, keys) * q.dtype.type(scale)
    if vis < length:
        scores[:, vis:] = -np.inf
    probs, lse = softmax_lse_rows(scores)
    out = np.einsum("hl,lhv->hv", probs, values)
    return AttentionPartial(output=out, lse=lse.astype(np.float64))


def attend_absorb(
    query: QueryState,
    latents: LatentSeq,
    weights: MlaWeights,
    scale: float,
    visible: int | None = None,
) -> AttentionPartial:
    """Attention directly over compressed latents.

    The key up-projection is absorbed into the query (q_nope @ w_kb per
    head), the value up-projection into the output, so no per-token expanded
    keys or values are ever formed. Produces the same partial as
    attend_naive over the expansion of the same latents, up to rounding.
    """
    length = len(latents)
    if length == 0:
        raise ValueError("attend_absorb needs at least one cached token")
    vis = _resolve_visible(length, visible)
    # [H, kv_lora_rank]: head-specific absorbed query
    q_abs = np.einsum("hn,hdn->hd", query.q_nope, weights.w_kb)
    scores = (q_abs @ latents.nope.T + query.q_pe @ latents.pe.T) * q_abs.dtype.type(scale)
    if vis < length:
        scores[:, vis:] = -np.inf
    probs, lse = softmax_lse_rows(scores)
    # [H, kv_lora_rank]: probability-weighted latent, then value up-projection
    mixed = probs @ latents.nope
    out = np.einsum("hd,hdv->hv", mixed, weights.w_vb)
    return AttentionPartial(output=out, lse=lse.astype(np.float64))


def output_projection(head_outputs: np.ndarray, weights: MlaWeights) -> np.ndarray:
    """Concatenate per-head outputs and project back to model_dim."""
    c = weights.config
    if head_outputs.shape != (c.num_heads, c.v_head_dim):
        raise ValueError(
            f"output_projection expects [{c.num_heads}, {c.v_head_dim}], got {head_outputs.shape}"
        )
    return head_outputs.reshape(-1) @ weights.w_o


def scaled_config(config: MlaConfig, heads: int = 4, kv_lora_rank: int = 16) -> MlaConfig:
    """Shrink a config for desk-scale real-math runs, keeping proportions legible."""
    return replace(
        config,
        model_dim=max(8, heads * 8),
        num_heads=heads,
        nope_head_dim=8,
        rope_dim=4,
        v_head_dim=8,
        kv_lora_rank=kv_lora_rank,
        q_lora_rank=16,
    )
