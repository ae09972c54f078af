"""Decoder-only base transformer with an explicit-position KV cache."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from types import MappingProxyType

import torch
from torch import nn

from . import nn as hnn
from .config import ModelConfig
from .errors import (
    ArgumentError,
    CapacityError,
    DimensionError,
    OrderingError,
    VocabularyError,
)


@dataclass(frozen=True)
class StepOutput:
    last_hidden: torch.Tensor
    taps: Mapping[int, torch.Tensor]
    logits: torch.Tensor | None = None


class KVCache:
    """Append-only per-layer key/value store with one absolute position per entry.

    Keys are stored already rotated, shaped (n_heads, entries, head_dim).
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, capacity: int = 64):
        self._k = [torch.empty(n_heads, capacity, head_dim, dtype=hnn.DTYPE) for _ in range(n_layers)]
        self._v = [torch.empty(n_heads, capacity, head_dim, dtype=hnn.DTYPE) for _ in range(n_layers)]
        self._positions: list[int] = []
        self._pending = 0

    def __len__(self) -> int:
        return len(self._positions)

    @property
    def n_layers(self) -> int:
        return len(self._k)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(self._positions)

    @property
    def last_position(self) -> int | None:
        return self._positions[-1] if self._positions else None

    def keys(self, layer: int) -> torch.Tensor:
        return self._k[layer][:, : len(self)]

    def values(self, layer: int) -> torch.Tensor:
        return self._v[layer][:, : len(self)]

    # -- writes happen layer by layer during one forward, then get committed --

    def _begin(self, positions: Sequence[int]) -> None:
        last = self.last_position
        prev = -1 if last is None else last
        for p in positions:
            if p <= prev:
                raise OrderingError(f"position {p} does not exceed previous position {prev}")
            prev = p
        need = len(self) + len(positions)
        cap = self._k[0].shape[1]
        if need > cap:
            new_cap = max(need, 2 * cap)
            for store in (self._k, self._v):
                for i, t in enumerate(store):
                    grown = torch.empty(t.shape[0], new_cap, t.shape[2], dtype=t.dtype)
                    grown[:, :cap] = t
                    store[i] = grown
        self._pending = len(positions)

    def _write(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, m = len(self), self._pending
        self._k[layer][:, n : n + m] = k
        self._v[layer][:, n : n + m] = v
        return self._k[layer][:, : n + m], self._v[layer][:, : n + m]

    def _commit(self, positions: Sequence[int]) -> None:
        self._positions.extend(int(p) for p in positions)
        self._pending = 0


class Block(nn.Module):
    """Pre-norm attention + MLP block with RMS normalization."""

    def __init__(self, config: ModelConfig, out_scale: float = 1.0):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.attn_norm = nn.Parameter(torch.ones(d))
        self.wqkv = nn.Linear(d, 3 * d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ffn_norm = nn.Parameter(torch.ones(d))
        self.w1 = nn.Linear(d, config.ffn_mult * d, bias=False)
        self.w2 = nn.Linear(config.ffn_mult * d, d, bias=False)
        for lin in (self.wqkv, self.w1):
            nn.init.normal_(lin.weight, std=0.02)
        for lin in (self.wo, self.w2):
            nn.init.normal_(lin.weight, std=0.02 * out_scale)

    def _qkv(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor):
        *lead, t, d = x.shape
        qkv = self.wqkv(hnn.rms_norm(x, self.attn_norm))
        qkv = qkv.view(*lead, t, 3, self.n_heads, self.head_dim).movedim(-4, -2)
        q, k, v = qkv.unbind(-4)  # each (..., H, T, hd)
        return hnn.apply_rope(q, cos, sin), hnn.apply_rope(k, cos, sin), v

    def _finish(self, x: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
        *lead, h, t, hd = attn.shape
        x = x + self.wo(attn.transpose(-3, -2).reshape(*lead, t, h * hd))
        return x + self.w2(torch.nn.functional.silu(self.w1(hnn.rms_norm(x, self.ffn_norm))))

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, mask: torch.Tensor | None):
        """x: (B, T, d); cos/sin broadcastable to (B, 1, T, hd/2); mask (B, 1, T, T) or (T, T)."""
        q, k, v = self._qkv(x, cos, sin)
        return self._finish(x, hnn.attention(q, k, v, mask))

    def forward_cached(self, x: torch.Tensor, cos, sin, cache: KVCache, layer: int) -> torch.Tensor:
        """x: (T, d) new rows appended after the cached entries."""
        q, k, v = self._qkv(x, cos, sin)
        keys, values = cache._write(layer, k, v)
        t = x.shape[0]
        mask = None
        if t > 1:
            n_old = keys.shape[1] - t
            mask = torch.ones(t, n_old + t, dtype=torch.bool).tril(n_old)
        return self._finish(x, hnn.attention(q, keys, values, mask))


class BaseModel(nn.Module):
    """The unmodified base language model.

    The LM head is untied from the embedding table.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        nn.init.normal_(self.tok_emb.weight, std=1.0)
        scale = 1.0 / math.sqrt(2 * config.n_layers)
        self.blocks = nn.ModuleList(Block(config, scale) for _ in range(config.n_layers))
        self.final_norm = nn.Parameter(torch.ones(config.d_model))
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        nn.init.normal_(self.head.weight, std=0.02)
        cos, sin = hnn.rope_angles(range(config.max_context), config.head_dim, config.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    # ---- tables ----

    def embed(self, token_id: int) -> torch.Tensor:
        if not 0 <= int(token_id) < self.config.vocab_size:
            raise VocabularyError(f"token id {token_id} outside vocabulary of {self.config.vocab_size}")
        return self.tok_emb.weight[int(token_id)]

    def embed_ids(self, ids: torch.Tensor | Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise VocabularyError(f"token ids outside vocabulary of {self.config.vocab_size}")
        return self.tok_emb(ids)

    def lm_head(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.config.d_model:
            raise DimensionError(f"lm_head wants width {self.config.d_model}, got {hidden.shape[-1]}")
        return self.head(hidden)

    def angles(self, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        positions = torch.as_tensor(positions, dtype=torch.long)
        if positions.numel() and int(positions.max()) >= self.config.max_context:
            raise CapacityError(
                f"position {int(positions.max())} exceeds max_context {self.config.max_context}"
            )
        return self.rope_cos[positions], self.rope_sin[positions]

    # ---- batched teacher-forced path ----

    def forward_embeddings(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        valid: torch.Tensor | None = None,
    ) -> tuple[dict[int, torch.Tensor], torch.Tensor]:
        """Run the stack over (B, T, d) inputs with explicit (B, T) positions.

        Returns hidden states after each tap layer and the final-normed last
        hidden, both (B, T, d). ``valid`` marks non-padding rows; padding
        sits at the end of each row.
        """
        b, t, _ = x.shape
        cos, sin = self.angles(positions)
        cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
        mask = torch.ones(t, t, dtype=torch.bool).tril()
        if valid is not None:
            mask = mask & valid[:, None, None, :]
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, cos, sin, mask)
            if i in self.config.tap_layers:
                taps[i] = x
        return taps, hnn.rms_norm(x, self.final_norm)

    # ---- incremental path ----

    def new_cache(self) -> KVCache:
        c = self.config
        return KVCache(c.n_layers, c.n_heads, c.head_dim)

    def _run_cached(self, x: torch.Tensor, positions: Sequence[int], cache: KVCache) -> StepOutput:
        positions = list(positions)
        cos, sin = self.angles(positions)
        cache._begin(positions)
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block.forward_cached(x, cos, sin, cache, i - 1)
            if i in self.config.tap_layers:
                taps[i] = x[-1]
        cache._commit(positions)
        last = hnn.rms_norm(x[-1], self.final_norm)
        return StepOutput(last, MappingProxyType(taps), self.lm_head(last))

    def prefill(self, token_ids: Sequence[int], start_position: int = 0) -> tuple[StepOutput, KVCache]:
        ids = list(token_ids)
        if not ids:
            raise ArgumentError("prefill needs at least one token")
        cache = self.new_cache()
        x = self.embed_ids(ids)
        out = self._run_cached(x, range(start_position, start_position + len(ids)), cache)
        return out, cache

    def decode_step(self, input_embedding: torch.Tensor, position: int, cache: KVCache) -> StepOutput:
        """Consume one (possibly fused) embedding and append exactly one KV entry."""
        if input_embedding.shape != (self.config.d_model,):
            raise DimensionError(f"decode_step wants a ({self.config.d_model},) embedding")
        return self._run_cached(input_embedding.unsqueeze(0), [int(position)], cache)
