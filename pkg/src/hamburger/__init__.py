"""Hierarchically autoregressive decoding on top of a small byte-level transformer.

A base model consumes one (possibly fused) embedding per macro-step; a small
micro-step decoder reading middle-layer taps emits further tokens until a stop
head fires, and a compositional embedder folds them into the next input.
"""

from .config import BOS, EOS, PAD, RESP, STOP, VARIANTS, ModelConfig, variant_config
from .hamburger import HamburgerModel, build_model
from .inference import (
    GenerationConfig,
    GenerationTrace,
    base_greedy,
    compression_rate,
    generate,
    sweep_confidence,
)
from .segmenter import Segmentation, SegmenterConfig, segment
from .trainer import Trainer, TrainingExample, forward_teacher_forced

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "RESP",
    "STOP",
    "VARIANTS",
    "GenerationConfig",
    "GenerationTrace",
    "HamburgerModel",
    "ModelConfig",
    "Segmentation",
    "SegmenterConfig",
    "Trainer",
    "TrainingExample",
    "base_greedy",
    "build_model",
    "compression_rate",
    "forward_teacher_forced",
    "generate",
    "segment",
    "sweep_confidence",
    "variant_config",
]
