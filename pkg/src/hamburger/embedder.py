"""Fuse the tokens emitted in one macro-step into a single input embedding."""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch
from torch import nn

from . import nn as hnn
from .config import ModelConfig
from .errors import ArgumentError


def assign_position(prev_last_position: int, k: int) -> int:
    """Position of a virtual token fusing ``k`` tokens: that of its last constituent."""
    if k < 1:
        raise ArgumentError(f"fused count must be >= 1, got {k}")
    return prev_last_position + k


def _stack(token_embeddings: Sequence[torch.Tensor] | torch.Tensor, k: int | None, max_steps: int):
    emb = token_embeddings if isinstance(token_embeddings, torch.Tensor) else torch.stack(list(token_embeddings))
    if k is None:
        k = emb.shape[0]
    if not 1 <= k <= max_steps or emb.shape[0] != k:
        raise ArgumentError(f"fuse needs 1..{max_steps} embeddings, got k={k} with {emb.shape[0]} rows")
    return emb, k


class _Merger(nn.Module):
    max_steps: int

    def fuse(self, token_embeddings: Sequence[torch.Tensor] | torch.Tensor, k: int | None = None) -> torch.Tensor:
        """Fuse an ordered list of ``k`` embeddings into one ``(d,)`` vector.

        A single token bypasses the module and is returned unchanged.
        """
        emb, k = _stack(token_embeddings, k, self.max_steps)
        if k == 1:
            return emb[0]
        return self._merge(emb.unsqueeze(0), torch.ones(1, k, dtype=torch.bool))[0]

    def forward(self, emb: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Batched fuse over (N, S, d) slot-padded embeddings with (N,) lengths."""
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if int(lengths.min()) < 1 or int(lengths.max()) > self.max_steps:
            raise ArgumentError(f"fuse lengths must lie in [1, {self.max_steps}]")
        slots = torch.arange(emb.shape[1])
        valid = slots[None, :] < lengths[:, None]
        merged = self._merge(emb, valid)
        return torch.where((lengths == 1)[:, None], emb[:, 0], merged)


class CompositionalEmbedder(_Merger):
    """Cross-attention pooling with the (augmented) input mean as the single query."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.max_steps = config.max_steps
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.intra_patch_pos = nn.Parameter(torch.randn(config.max_steps, d) * 0.5)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.out_proj = nn.Linear(d, d)
        for lin in (self.wq, self.wk, self.wv, self.wo, self.out_proj):
            nn.init.normal_(lin.weight, std=1.0 / math.sqrt(d))
        nn.init.zeros_(self.out_proj.bias)

    def _merge(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        n, s, d = emb.shape
        x = emb + self.intra_patch_pos[:s]
        w = valid.to(x.dtype).unsqueeze(-1)
        query = (x * w).sum(1) / w.sum(1)

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(n, -1, self.n_heads, self.head_dim).transpose(1, 2)

        q = heads(self.wq(query).unsqueeze(1))
        out = hnn.attention(q, heads(self.wk(x)), heads(self.wv(x)), valid[:, None, None, :])
        return self.out_proj(self.wo(out.transpose(1, 2).reshape(n, d)))


class SoftmaxMergeEmbedder(_Merger):
    """Ablation baseline: per-dimension convex combination with learned slot weights."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.max_steps = config.max_steps
        self.slot_logits = nn.Parameter(torch.zeros(config.max_steps, config.d_model))

    def _merge(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        logits = self.slot_logits[: emb.shape[1]].expand(emb.shape[0], -1, -1)
        logits = logits.masked_fill(~valid.unsqueeze(-1), float("-inf"))
        return (torch.softmax(logits, dim=1) * emb).sum(1)


def build_embedder(config: ModelConfig) -> _Merger:
    if config.embedder == "softmax":
        return SoftmaxMergeEmbedder(config)
    return CompositionalEmbedder(config)
