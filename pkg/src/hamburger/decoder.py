"""Local transformer that emits micro-step tokens 2..max_steps of a macro-step."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import torch
from torch import nn

from . import nn as hnn
from .config import STOP, ModelConfig
from .errors import ArgumentError, ConfigError
from .model import Block


class MicroStepDecoder(nn.Module):
    """Conditions on projected tap-layer hiddens and the micro tokens emitted so far.

    The context is rebuilt every macro-step from a fixed number of rows, so
    one invocation costs the same whatever the length of the base cache.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.config = config
        self.tap_layers = config.tap_layers
        self.context_proj = nn.ModuleList(nn.Linear(d, d) for _ in self.tap_layers)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.decoder_layers))
        self.norm = nn.Parameter(torch.ones(d))
        self.stop_head = nn.Linear(d, 1) if config.stop_mode == "head" else None
        if self.stop_head is not None:
            nn.init.zeros_(self.stop_head.weight)
            nn.init.zeros_(self.stop_head.bias)
        n = len(self.tap_layers) + config.max_steps
        cos, sin = hnn.rope_angles(range(n), config.head_dim, config.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self._masks: dict[int, torch.Tensor] = {}

    @property
    def n_context(self) -> int:
        return len(self.tap_layers)

    def build_context(self, taps: Mapping[int, torch.Tensor]) -> torch.Tensor:
        """One projected row per tap layer, ascending layer order: (..., n_ctx, d)."""
        if set(taps) != set(self.tap_layers):
            missing = sorted(set(self.tap_layers) - set(taps))
            raise ConfigError(f"taps {sorted(taps)} do not match tap_layers {list(self.tap_layers)}; missing {missing}")
        rows = [proj(hnn.rms_norm(taps[layer])) for proj, layer in zip(self.context_proj, self.tap_layers)]
        return torch.stack(rows, dim=-2)

    def _mask(self, length: int) -> torch.Tensor:
        mask = self._masks.get(length)
        if mask is None:
            idx = torch.arange(length)
            mask = (idx[None, :] < self.n_context) | (idx[None, :] <= idx[:, None])
            self._masks[length] = mask
        return mask

    def run(self, context: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        """Final-normed hiddens for every row of [context ∥ prior], shape (..., n_ctx+m, d).

        Context rows see each other; micro rows see all context rows and
        earlier micro rows.
        """
        x = torch.cat((context, prior), dim=-2)
        length = x.shape[-2]
        if length > self.rope_cos.shape[0]:
            raise ArgumentError(f"micro sequence of {length} rows exceeds {self.rope_cos.shape[0]}")
        cos, sin = self.rope_cos[:length], self.rope_sin[:length]
        mask = self._mask(length)
        for block in self.blocks:
            x = block(x, cos, sin, mask)
        return hnn.rms_norm(x, self.norm)

    def micro_decode(self, context: torch.Tensor, prior_micro_embeddings: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
        """Hidden state of the final position for a single macro-step."""
        if isinstance(prior_micro_embeddings, torch.Tensor):
            prior = prior_micro_embeddings
        elif len(prior_micro_embeddings):
            prior = torch.stack(list(prior_micro_embeddings))
        else:
            prior = context.new_zeros(0, context.shape[-1])
        if prior.shape[0] > self.config.max_steps - 1:
            raise ArgumentError(
                f"{prior.shape[0]} prior micro tokens; at most {self.config.max_steps - 1} allowed"
            )
        return self.run(context, prior)[-1]

    def stop_logit(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.stop_head is None:
            raise ConfigError("stop head disabled (stop_mode='token')")
        return self.stop_head(hidden).squeeze(-1)

    def stop_prob(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.stop_logit(hidden))


def stop_via_token_baseline(logits: torch.Tensor, stop_id: int = STOP) -> bool:
    """Stop-token ablation: stop when the reserved id is the greedy choice."""
    return int(torch.argmax(logits)) == stop_id
