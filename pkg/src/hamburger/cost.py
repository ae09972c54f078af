"""Analytic FLOPs accounting and speedup formulas.

FLOPs follow the 2·(multiply-accumulate) convention; attention adds the
score and weighted-sum terms that scale with the number of visible keys.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .config import ModelConfig
from .errors import ArgumentError

if TYPE_CHECKING:
    from .inference import GenerationTrace


class DomainError(ArgumentError):
    pass


def hamburger_speedup(n: float, C: float, c: float) -> float:
    """Per-macro-step speedup n·C / (C + (n-1)·c) of emitting n tokens per base forward."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not 0 < c < C:
        raise DomainError(f"need 0 < c < C, got c={c}, C={C}")
    return n * C / (C + (n - 1) * c)


def specdec_speedup(alpha: float, gamma: int, c_ratio: float) -> float:
    """Expected speedup of draft-and-verify decoding with ``gamma`` drafted tokens.

    ``gamma`` is the drafting depth, unrelated to the fused token count of
    :func:`hamburger_speedup`.
    """
    if not 0 <= alpha < 1:
        raise DomainError(f"acceptance rate must lie in [0, 1), got {alpha}")
    if gamma < 1 or c_ratio < 0:
        raise DomainError(f"need gamma >= 1 and c_ratio >= 0, got {gamma}, {c_ratio}")
    return (1 - alpha ** (gamma + 1)) / ((1 - alpha) * (gamma * c_ratio + 1))


def _layer_flops(config: ModelConfig, rows: int, keys_per_row: float) -> float:
    d, f = config.d_model, config.ffn_mult * config.d_model
    dense = 2 * rows * (4 * d * d + 2 * d * f)
    attn = 2 * 2 * rows * keys_per_row * d
    return dense + attn


def flops_base_step(config: ModelConfig, S: int) -> float:
    """One base forward for a single new entry attending over ``S`` cached entries (itself included)."""
    if S < 1:
        raise ArgumentError("context length must be >= 1")
    return config.n_layers * _layer_flops(config, 1, S) + 2 * config.d_model * config.vocab_size


def flops_context(config: ModelConfig) -> float:
    """Projecting the tap hiddens into decoder context rows, once per macro-step."""
    return 2 * len(config.tap_layers) * config.d_model * config.d_model


def flops_micro_step(config: ModelConfig, prior_len: int | None = None, context_length: int | None = None) -> float:
    """One micro-decoder invocation over |taps| + prior_len rows, plus its LM and stop heads.

    ``context_length`` (the base cache size) is accepted so callers can state
    it; nothing here depends on it. ``prior_len`` defaults to the longest run.
    """
    m = config.max_steps - 1 if prior_len is None else prior_len
    rows = len(config.tap_layers) + m
    # row i attends to |taps| context rows plus earlier micro rows; total visible keys summed over rows
    n_ctx = len(config.tap_layers)
    keys = n_ctx * n_ctx + sum(n_ctx + i + 1 for i in range(m))
    d, f = config.d_model, config.ffn_mult * config.d_model
    per_layer = 2 * rows * (4 * d * d + 2 * d * f) + 2 * 2 * keys * d
    heads = 2 * d * config.vocab_size + 2 * d
    return config.decoder_layers * per_layer + heads


def flops_fuse(config: ModelConfig, k: int) -> float:
    if k <= 1:
        return 0.0
    d = config.d_model
    if config.embedder == "softmax":
        return 2.0 * k * d
    return 2 * d * d * (1 + 2 * k) + 2 * 2 * k * d + 2 * 2 * d * d


@dataclass(frozen=True)
class CostParams:
    n: float
    C_of_S: Callable[[int], float]
    c: float
    alpha: float = 0.0
    c_ratio: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.alpha < 1:
            raise DomainError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass(frozen=True)
class ReconcileReport:
    n_bar: float
    C: float
    c: float
    predicted: float
    measured: float
    gap: float

    @property
    def condition_holds(self) -> bool:
        return self.c < self.C

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_bar", "C", "c", "predicted", "measured", "gap")}
        d["condition_holds"] = self.condition_holds
        return d


def reconcile(trace: GenerationTrace, baseline: GenerationTrace | None) -> ReconcileReport:
    """Compare the formula's prediction with the FLOPs actually traced.

    ``baseline`` is the same prompt generated at confidence 1.0 (one token
    per base forward). The effective n is the trace's mean tokens per
    macro-step; C is its mean base FLOPs per step and c its mean micro FLOPs
    per decoder invocation (context build and fusion amortized in).
    """
    if baseline is None:
        raise ArgumentError("reconcile needs a baseline (confidence 1.0) trace")
    n_bar = trace.compression_rate
    C = trace.flops_base / trace.macro_steps
    calls = trace.decoder_calls
    overhead = trace.flops_micro + trace.flops_fuse
    c = overhead / calls if calls else 0.0
    if calls == 0 or 0 < c < C:
        predicted = hamburger_speedup(n_bar, C, c if calls else C / 2)
    else:
        # c >= C breaks the formula's side condition; report its value anyway
        predicted = n_bar * C / (C + (n_bar - 1) * c)
    per_token = (trace.flops_base + overhead) / trace.tokens
    base_per_token = (baseline.flops_base + baseline.flops_micro + baseline.flops_fuse) / baseline.tokens
    measured = base_per_token / per_token
    return ReconcileReport(n_bar, C, c, predicted, measured, (predicted - measured) / measured)
