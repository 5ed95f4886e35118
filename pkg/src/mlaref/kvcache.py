"""Cache stores for decode: sealed shared prefixes and paged per-sequence tails.

Two regions with different lifetimes and layouts:

* ``SharedPrefixCache``: one expanded key/value buffer per distinct prompt
  prefix, built once and then immutable. It also keeps the compressed form of
  the same tokens so an absorb-only pass over the full context stays possible.
* ``PagedLatentCache``: per-sequence non-shared tails in compressed form,
  allocated out of a fixed pool of fixed-size pages so sequences can grow and
  be released without fragmentation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .mla import LatentKv, LatentSeq, MlaConfig, MlaWeights, expand_latents

DEFAULT_BLOCK_SIZE = 128


class CapacityError(RuntimeError):
    """Raised when the page pool cannot satisfy an allocation."""


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass(frozen=True)
class SharedPrefixCache:
    """Immutable expanded (plus retained compressed) cache for one prefix.

    keys [L_s, H, qk_head_dim], values [L_s, H, v_head_dim]; ``latents`` holds
    the same tokens in compressed form. ``source_digest`` fingerprints the
    latents so conflicting re-declarations of the same prefix id are caught.
    """

    prefix_id: str
    keys: np.ndarray
    values: np.ndarray
    latents: LatentSeq
    source_digest: str

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def expanded_elems(self) -> int:
        return int(self.keys.size + self.values.size)


def seal_shared_prefix(prefix_id: str, latents: LatentSeq, weights: MlaWeights) -> SharedPrefixCache:
    """Expand a prefix's latents once and freeze every buffer.

    Raises:
        ValueError: on an empty prefix.
    """
    if len(latents) == 0:
        raise ValueError("cannot seal an empty shared prefix")
    keys, values = expand_latents(latents, weights)
    for arr in (keys, values, latents.nope, latents.pe):
        arr.flags.writeable = False
    digest = _digest(latents.nope) + _digest(latents.pe)
    return SharedPrefixCache(
        prefix_id=prefix_id, keys=keys, values=values, latents=latents, source_digest=digest
    )


@dataclass
class SequenceHandle:
    """Ticket for one decoding sequence's non-shared tail.

    ``length`` mirrors the cache's authoritative count and is refreshed by
    append/release calls that return the handle.
    """

    seq_id: int
    prefix_id: str | None
    length: int = 0


class _Page:
    __slots__ = ("nope", "pe", "fill")

    def __init__(self, block_size: int, config: MlaConfig, dtype) -> None:
        self.nope = np.zeros((block_size, config.kv_lora_rank), dtype=dtype)
        self.pe = np.zeros((block_size, config.rope_dim), dtype=dtype)
        self.fill = 0


class PagedLatentCache:
    """Fixed pool of latent pages with per-sequence page tables.

    Pages hold ``block_size`` compressed tokens each. A sequence owns
    ceil(length / block_size) pages; releasing it returns them to the free
    list. The pool never grows: exhausting it raises CapacityError so callers
    can apply admission backpressure.
    """

    def __init__(
        self,
        config: MlaConfig,
        capacity_pages: int,
        block_size: int = DEFAULT_BLOCK_SIZE,
        dtype=np.float32,
    ) -> None:
        if capacity_pages < 1 or block_size < 1:
            raise ValueError("capacity_pages and block_size must be >= 1")
        self.config = config
        self.block_size = block_size
        self.dtype = np.dtype(dtype)
        self._pages = [_Page(block_size, config, dtype) for _ in range(capacity_pages)]
        self._free: list[int] = list(range(capacity_pages - 1, -1, -1))
        self._tables: dict[int, list[int]] = {}
        self._lengths: dict[int, int] = {}
        self._prefix_of: dict[int, str | None] = {}
        self._next_seq = 0

    # -- bookkeeping ------------------------------------------------------

    @property
    def capacity_pages(self) -> int:
        return len(self._pages)

    @property
    def pages_free(self) -> int:
        return len(self._free)

    @property
    def pages_used(self) -> int:
        return self.capacity_pages - self.pages_free

    @property
    def sequences(self) -> int:
        return len(self._tables)

    def length(self, seq_id: int) -> int:
        self._require(seq_id)
        return self._lengths[seq_id]

    def prefix_of(self, seq_id: int) -> str | None:
        self._require(seq_id)
        return self._prefix_of[seq_id]

    def _require(self, seq_id: int) -> None:
        if seq_id not in self._tables:
            raise KeyError(f"unknown sequence id {seq_id}")

    # -- lifecycle --------------------------------------------------------

    def register_sequence(self, prefix_id: str | None = None) -> SequenceHandle:
        seq_id = self._next_seq
        self._next_seq += 1
        self._tables[seq_id] = []
        self._lengths[seq_id] = 0
        self._prefix_of[seq_id] = prefix_id
        return SequenceHandle(seq_id=seq_id, prefix_id=prefix_id, length=0)

    def append_token(self, handle: SequenceHandle, latent: LatentKv) -> SequenceHandle:
        """Copy one compressed token into the sequence's current page.

        Allocates a fresh page exactly at block boundaries.

        Raises:
            KeyError: unknown sequence.
            CapacityError: page pool exhausted; the sequence is left unchanged.
        """
        self._require(handle.seq_id)
        c = self.config
        if latent.nope.shape != (c.kv_lora_rank,) or latent.pe.shape != (c.rope_dim,):
            raise ValueError(
                f"latent shapes {latent.nope.shape}/{latent.pe.shape} do not match config"
            )
        table = self._tables[handle.seq_id]
        length = self._lengths[handle.seq_id]
        slot = length % self.block_size
        if slot == 0:
            if not self._free:
                raise CapacityError(
                    f"page pool exhausted: {self.capacity_pages} pages in use, "
                    f"cannot grow sequence {handle.seq_id}"
                )
            table.append(self._free.pop())
        page = self._pages[table[-1]]
        page.nope[slot] = latent.nope
        page.pe[slot] = latent.pe
        page.fill = slot + 1
        self._lengths[handle.seq_id] = length + 1
        handle.length = length + 1
        return handle

    def release_sequence(self, handle: SequenceHandle) -> int:
        """Return the sequence's pages to the pool; returns pages freed."""
        self._require(handle.seq_id)
        table = self._tables.pop(handle.seq_id)
        self._lengths.pop(handle.seq_id)
        self._prefix_of.pop(handle.seq_id)
        for page_id in reversed(table):
            self._pages[page_id].fill = 0
            self._free.append(page_id)
        handle.length = 0
        return len(table)

    def gather_sequence(self, handle: SequenceHandle) -> LatentSeq:
        """Contiguous copy of the sequence's tail, in append order."""
        self._require(handle.seq_id)
        length = self._lengths[handle.seq_id]
        c = self.config
        if length == 0:
            return LatentSeq(
                nope=np.zeros((0, c.kv_lora_rank), dtype=self.dtype),
                pe=np.zeros((0, c.rope_dim), dtype=self.dtype),
            )
        nope = np.empty((length, c.kv_lora_rank), dtype=self.dtype)
        pe = np.empty((length, c.rope_dim), dtype=self.dtype)
        for i, page_id in enumerate(self._tables[handle.seq_id]):
            page = self._pages[page_id]
            start = i * self.block_size
            take = min(self.block_size, length - start)
            nope[start : start + take] = page.nope[:take]
            pe[start : start + take] = page.pe[:take]
        return LatentSeq(nope=nope, pe=pe)


@dataclass
class CacheStats:
    """Structured size report for capacity planning.

    Element counts are logical (filled tokens), byte figures are allocated
    storage. Expanded prefixes store num_heads * (qk_head_dim + v_head_dim)
    elements per token; compressed tails store kv_lora_rank + rope_dim.
    """

    pages_total: int
    pages_used: int
    pages_free: int
    block_size: int
    sequences: int
    tail_tokens: int
    tail_elems: int
    tail_bytes_allocated: int
    prefix_count: int
    prefix_tokens: int
    prefix_elems_expanded: int
    prefix_bytes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class EngineStore:
    """Bundles the shared-prefix registry with the paged tail cache."""

    def __init__(
        self,
        config: MlaConfig,
        capacity_pages: int = 1024,
        block_size: int = DEFAULT_BLOCK_SIZE,
        dtype=np.float32,
    ) -> None:
        self.config = config
        self.paged = PagedLatentCache(config, capacity_pages, block_size, dtype)
        self.prefixes: dict[str, SharedPrefixCache] = {}
        self.seal_count = 0

    def ensure_prefix(
        self, prefix_id: str, latents: LatentSeq, weights: MlaWeights
    ) -> SharedPrefixCache:
        """Seal a prefix once; re-declarations must match byte for byte.

        Raises:
            ValueError: same id declared with different content.
        """
        digest = _digest(latents.nope) + _digest(latents.pe)
        existing = self.prefixes.get(prefix_id)
        if existing is not None:
            if existing.source_digest != digest:
                raise ValueError(f"prefix {prefix_id!r} re-declared with different content")
            return existing
        sealed = seal_shared_prefix(prefix_id, latents, weights)
        self.prefixes[prefix_id] = sealed
        self.seal_count += 1
        return sealed

    def get_prefix(self, prefix_id: str | None) -> SharedPrefixCache | None:
        if prefix_id is None:
            return None
        if prefix_id not in self.prefixes:
            raise KeyError(f"unknown prefix id {prefix_id!r}")
        return self.prefixes[prefix_id]

    def stats(self) -> CacheStats:
        c = self.config
        paged = self.paged
        tail_tokens = sum(paged._lengths.values())
        itemsize = paged.dtype.itemsize
        prefix_tokens = sum(len(p) for p in self.prefixes.values())
        prefix_elems = sum(p.expanded_elems for p in self.prefixes.values())
        return CacheStats(
            pages_total=paged.capacity_pages,
            pages_used=paged.pages_used,
            pages_free=paged.pages_free,
            block_size=paged.block_size,
            sequences=paged.sequences,
            tail_tokens=tail_tokens,
            tail_elems=tail_tokens * c.latent_token_elems,
            tail_bytes_allocated=paged.pages_used * paged.block_size * c.latent_token_elems * itemsize,
            prefix_count=len(self.prefixes),
            prefix_tokens=prefix_tokens,
            prefix_elems_expanded=prefix_elems,
            prefix_bytes=sum(
                p.keys.nbytes + p.values.nbytes + p.latents.nope.nbytes + p.latents.pe.nbytes
                for p in self.prefixes.values()
            ),
        )
