"""Base model with the compositional embedder and micro-step decoder grafted on."""

from __future__ import annotations

import torch
from torch import nn

from . import nn as hnn
from .config import ModelConfig
from .decoder import MicroStepDecoder
from .embedder import build_embedder
from .model import BaseModel

GROUPS = ("base", "grafted")


class HamburgerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # parameters are float64 whatever the caller's default dtype
        with hnn.float64_default():
            self.base = BaseModel(config)
            self.embedder = build_embedder(config)
            self.decoder = MicroStepDecoder(config)

    def parameter_group(self, name: str) -> str:
        return "base" if name.startswith("base.") else "grafted"

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Learnable parameters split into the base and grafted learning-rate groups."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            if p.requires_grad:
                groups[self.parameter_group(name)].append((name, p))
        return groups


def build_model(config: ModelConfig, seed: int = 0) -> HamburgerModel:
    torch.manual_seed(seed)
    return HamburgerModel(config)
